import math
from collections import defaultdict
from fractions import Fraction
from itertools import permutations, product

import numpy as np
import pytest

from pirlab import audit, pir_base
from pirlab.audit import (
    InfeasibleAuditError,
    correctness_audit,
    eq2_audit,
    exact_query_distribution,
    lemma2_audit,
    privacy_tv_distance,
    sampled_privacy_check,
    scheme_joint,
    total_variation,
)
from pirlab.core import SchemeParams, SeededRandomness, encode_query


def _h(rows, cols):
    marg = defaultdict(int)
    for r in rows:
        marg[tuple(r[c] for c in cols)] += 1
    total = len(rows)
    return -sum(m / total * math.log2(m / total) for m in marg.values())


def oracle_rows(theta):
    """(W1, W2, Q1, Q2, A1, A2) for every message atom and permutation pair,
    N=2, K=2, L=4, 1-bit symbols."""
    t = pir_base.plan_template(2, 2, theta)
    rows = []
    for p0, p1 in product(permutations(range(4)), repeat=2):
        plan = pir_base.build_plan(t, np.array([p0, p1]))
        wires = [encode_query(q) for q in plan.queries]
        for w1, w2 in product(range(16), repeat=2):
            bits = [[(w1 >> i) & 1 for i in range(4)], [(w2 >> i) & 1 for i in range(4)]]
            answers = []
            for q in plan.queries:
                a = []
                for s in q.sums:
                    v = 0
                    for m, i in s.terms:
                        v ^= bits[m][i]
                    a.append(v)
                answers.append(tuple(a))
            rows.append((w1, w2, wires[0], wires[1], answers[0], answers[1]))
    return rows


@pytest.fixture(scope="module")
def oracle():
    return {theta: oracle_rows(theta) for theta in range(2)}


def test_oracle_lemma2_and_eq2(oracle):
    # W1=0, W2=1, Q=2,3, A=4,5; Z empty at s=0
    rows0 = oracle[0]
    lhs = _h(rows0, [1, 0]) - _h(rows0, [0]) - (_h(rows0, [1, 0, 2, 3, 4, 5]) - _h(rows0, [0, 2, 3, 4, 5]))
    fresh = _h(rows0, [1, 0]) - _h(rows0, [0])
    h1 = _h(rows0, [0])
    assert lhs == pytest.approx(2.0, abs=1e-9)
    assert fresh == pytest.approx(4.0, abs=1e-9)
    assert h1 == pytest.approx(4.0, abs=1e-9)

    params = SchemeParams(2, 2)
    res = lemma2_audit(params, 2)
    assert res.lhs == pytest.approx(lhs, abs=1e-9)
    assert res.terms["fresh_entropy"] == pytest.approx(fresh, abs=1e-9)
    assert res.rhs == pytest.approx(2.0, abs=1e-9)
    assert res.slack == pytest.approx(0.0, abs=1e-9)
    assert res.passed

    eq2 = eq2_audit(params)
    assert eq2.lhs == 6.0
    assert eq2.terms["desired_entropy"] == pytest.approx(h1, abs=1e-9)
    assert eq2.terms["undesired_information"] == pytest.approx(lhs, abs=1e-9)
    assert eq2.slack == pytest.approx(0.0, abs=1e-9)
    assert eq2.download_bits == eq2.expected_download_bits == 6


def test_oracle_privacy(oracle):
    for db in range(2):
        laws = []
        for theta in range(2):
            counts = defaultdict(int)
            for r in oracle[theta][::256]:
                counts[r[2 + db]] += 1
            laws.append({k: Fraction(v, 576) for k, v in counts.items()})
        assert laws[0] == laws[1]
        assert laws[0] == exact_query_distribution(SchemeParams(2, 2), 1, db)


def test_exact_distribution_mass():
    dist = exact_query_distribution(SchemeParams(2, 2), 0, 0)
    assert sum(dist.values()) == 1
    assert all(isinstance(p, Fraction) for p in dist.values())


def test_single_database_point_mass():
    dist = exact_query_distribution(SchemeParams(1, 1), 0, 0)
    assert list(dist.values()) == [Fraction(1)]
    assert list(dist) == [b"\x01\x00\x01\x00\x00\x00\x00\x00\x00"]


@pytest.mark.parametrize("params", [SchemeParams(2, 2), SchemeParams(2, 2, 1, 2), SchemeParams(1, 2),
                                    SchemeParams(3, 1), SchemeParams(2, 2, 1, 1)])
def test_tv_zero(params):
    for db in range(params.num_databases):
        assert privacy_tv_distance(params, db) == 0


@pytest.mark.parametrize("mutation", pir_base.MUTATIONS)
def test_tv_detects_mutations(mutation):
    params = SchemeParams(2, 2)
    assert max(privacy_tv_distance(params, db, mutation) for db in range(2)) > 0


def test_total_variation():
    assert total_variation({"a": Fraction(1)}, {"b": Fraction(1)}) == 1
    assert total_variation({"a": Fraction(1, 2), "b": Fraction(1, 2)}, {"a": Fraction(1)}) == Fraction(1, 2)


def test_infeasible_named():
    with pytest.raises(InfeasibleAuditError) as info:
        exact_query_distribution(SchemeParams(3, 3), 0, 0)
    assert "atoms" in str(info.value) or str(info.value.atoms) in str(info.value)


def test_sampled_passes():
    for params in (SchemeParams(2, 3), SchemeParams(3, 2)):
        for db in range(params.num_databases):
            rep = sampled_privacy_check(params, db, 10 ** 4, SeededRandomness(db))
            assert rep.passed, rep


@pytest.mark.parametrize("mutation", pir_base.MUTATIONS)
def test_sampled_flags_mutations(mutation):
    params = SchemeParams(2, 3)
    reps = [sampled_privacy_check(params, db, 10 ** 4, SeededRandomness(5), mutation) for db in range(2)]
    assert any(not r.passed for r in reps)


def test_sampled_rejects_few_trials():
    with pytest.raises(ValueError):
        sampled_privacy_check(SchemeParams(2, 2), 0, 0)


def test_correctness_audit():
    rep = correctness_audit(SchemeParams(3, 2, 1, 3), 20, SeededRandomness(0))
    assert rep.passed and rep.runs == 40


def test_lemma2_degenerate_k1():
    res = lemma2_audit(SchemeParams(2, 1), 2)
    assert (res.lhs, res.rhs) == (0.0, 0.0)


def test_lemma2_half_cache():
    res = lemma2_audit(SchemeParams(2, 2, 1, 2), 2)
    assert res.slack >= -1e-9 and res.passed


def test_lemma2_last_step():
    # k = K+1: nothing left to learn, both sides vanish
    res = lemma2_audit(SchemeParams(2, 2), 3)
    assert res.lhs == pytest.approx(0.0, abs=1e-9) and res.passed


def test_eq2_full_cache():
    res = eq2_audit(SchemeParams(2, 2, 1, 1))
    assert (res.lhs, res.rhs) == (0.0, 0.0)


def test_eq2_half_cache():
    res = eq2_audit(SchemeParams(2, 2, 1, 2))
    assert res.lhs == 6.0
    assert res.terms["desired_entropy"] == pytest.approx(4.0)
    assert res.terms["undesired_information"] == pytest.approx(2.0)
    assert res.slack == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("mutation", pir_base.MUTATIONS)
def test_lemma2_detects_mutations(mutation):
    assert not lemma2_audit(SchemeParams(2, 2), 2, mutation).passed


@pytest.mark.parametrize("params", [SchemeParams(2, 1, 1, 2), SchemeParams(1, 2, 1, 2)])
def test_factored_matches_full(params):
    for k in range(2, params.num_messages + 2):
        a = lemma2_audit(params, k, factor_cache=True)
        b = lemma2_audit(params, k, factor_cache=False)
        assert a.lhs == pytest.approx(b.lhs, abs=1e-9)
        assert a.rhs == pytest.approx(b.rhs, abs=1e-9)
    a, b = eq2_audit(params, factor_cache=True), eq2_audit(params, factor_cache=False)
    assert a.rhs == pytest.approx(b.rhs, abs=1e-9)
    assert a.lhs == b.lhs


def test_scheme_joint_shape():
    joint = scheme_joint(SchemeParams(2, 2), 0)
    assert joint.dist.num_atoms == 256 * 576
    assert joint.download_bits == 6
    assert joint.transcript == ["Q1", "Q2", "A1", "A2"]


def test_permutation_atoms():
    assert audit.permutation_atoms(SchemeParams(2, 2)) == 576
    assert audit.permutation_atoms(SchemeParams(2, 2, 1, 1)) == 1
