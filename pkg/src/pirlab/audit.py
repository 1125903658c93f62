"""Machine checks of privacy, correctness and the converse inequalities.

Exact audits enumerate every tuple of private permutations (and, for the
entropy audits, every 1-bit message assignment), so the resulting
distributions are exact. Sizes are guarded; nothing falls back silently to
sampling.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from itertools import combinations, permutations, product

import numpy as np

from pirlab import _kernels, pir_base
from pirlab.bounds import TOL, JointDistribution, entropy, mutual_information, optimal_download_cost
from pirlab.cache_pir import LocalDatabases, encode_cache, retrieve
from pirlab.core import MessageStore, ParameterError, Query, SchemeParams, SeededRandomness, encode_query

PRIVACY_ATOM_LIMIT = 10 ** 7
JOINT_ATOM_LIMIT = 10 ** 8


class InfeasibleAuditError(ValueError):
    def __init__(self, what: str, atoms: int, limit: int):
        super().__init__(f"{what}: {atoms} atoms exceeds the enumeration limit of {limit}")
        self.atoms = atoms
        self.limit = limit


def permutation_atoms(params: SchemeParams) -> int:
    """Number of equally likely private-permutation tuples."""
    if params.pir_length == 0:
        return 1
    return math.factorial(params.block_size) ** (params.num_messages * params.pir_blocks)


def _permutation_tuples(params: SchemeParams, mutation: str | None):
    """Yield every (K, L') permutation array, each equally likely."""
    k, blocks, block = params.num_messages, params.pir_blocks, params.block_size
    if mutation == "no_permutation":
        yield np.tile(np.arange(params.pir_length, dtype=np.int64), (k, 1))
        return
    segments = [np.array(p, dtype=np.int64) for p in permutations(range(block))]
    offsets = [b * block for b in range(blocks)]
    for combo in product(segments, repeat=k * blocks):
        rows = [np.concatenate([combo[j * blocks + b] + offsets[b] for b in range(blocks)])
                for j in range(k)]
        yield np.stack(rows)


def _wire_plans(params: SchemeParams, theta: int, mutation: str | None):
    template = pir_base.plan_template(params.num_databases, params.num_messages, theta,
                                      params.pir_blocks, mutation)
    for perms in _permutation_tuples(params, mutation):
        plan = pir_base.build_plan(template, perms)
        yield plan, [q.shifted(params.cached_length) for q in plan.queries]


# --------------------------------------------------------------------------
# Privacy
# --------------------------------------------------------------------------


def exact_query_distribution(params: SchemeParams, theta: int, db: int,
                             mutation: str | None = None) -> dict[bytes, Fraction]:
    """Exact law of the query database ``db`` receives, keyed by its wire bytes.

    The key preserves sum order, so it distinguishes anything the database
    can observe (for canonically ordered queries it equals ``canonical_form``).
    """
    if not 0 <= db < params.num_databases:
        raise ParameterError(f"database {db} outside [0, {params.num_databases})")
    if params.pir_length == 0:
        return {encode_query(Query.from_sums([])): Fraction(1)}
    atoms = permutation_atoms(params) if mutation != "no_permutation" else 1
    if atoms > PRIVACY_ATOM_LIMIT:
        raise InfeasibleAuditError("query distribution", atoms, PRIVACY_ATOM_LIMIT)
    counts: Counter[bytes] = Counter()
    for _, wire in _wire_plans(params, theta, mutation):
        counts[encode_query(wire[db])] += 1
    return {k: Fraction(v, atoms) for k, v in counts.items()}


def total_variation(p: dict, q: dict) -> Fraction:
    keys = set(p) | set(q)
    return sum((abs(p.get(k, 0) - q.get(k, 0)) for k in keys), Fraction(0)) / 2


def privacy_tv_distance(params: SchemeParams, db: int, mutation: str | None = None) -> Fraction:
    """Largest TV distance between the query laws of any two desired indices."""
    dists = [exact_query_distribution(params, theta, db, mutation)
             for theta in range(params.num_messages)]
    worst = Fraction(0)
    for a, b in combinations(dists, 2):
        worst = max(worst, total_variation(a, b))
    return worst


@dataclass(frozen=True)
class SampledPrivacyReport:
    trials: int
    max_ks: float            # largest per-coordinate two-sample KS distance
    max_marginal_tv: float   # largest per-coordinate empirical TV (informational)
    threshold: float
    flagged: bool
    structural_ok: bool

    @property
    def passed(self) -> bool:
        return self.structural_ok and not self.flagged


def dkw_threshold(trials: int, delta: float = 1e-6) -> float:
    return 3 * math.sqrt(math.log(2 / delta) / (2 * trials))


def _sum_keys(template: pir_base.PlanTemplate, perms: np.ndarray, part_length: int) -> np.ndarray:
    """Integer key per (trial, sum), monotone in the canonical sum order."""
    msgs, pos = template.msgs, template.pos
    live = msgs >= 0
    width = msgs.shape[1]
    base = template.num_messages * part_length + 1
    if base ** width >= 2 ** 62:
        raise InfeasibleAuditError("sum key encoding", base ** width, 2 ** 62)
    m0, p0 = np.where(live, msgs, 0), np.where(live, pos, 0)
    real = perms[:, m0, p0]  # (T, S, w)
    digits = np.where(live[None], msgs[None] * part_length + real + 1, 0)
    keys = np.zeros(digits.shape[:2], dtype=np.int64)
    for t in range(width):
        keys = keys * base + digits[:, :, t]
    return keys


def sampled_privacy_check(params: SchemeParams, db: int, trials: int,
                          rng: SeededRandomness | None = None,
                          mutation: str | None = None, delta: float = 1e-6) -> SampledPrivacyReport:
    """Monte Carlo privacy check for instances too large to enumerate.

    Each query is summarized by the key of every sum slot (slots in wire
    order). Per slot, the empirical laws under every pair of desired indices
    are compared by the two-sample KS distance, and the run is flagged when
    any distance exceeds ``dkw_threshold``.
    """
    if trials < 10 ** 4:
        raise ValueError(f"need at least 10^4 trials, got {trials}")
    if not 0 <= db < params.num_databases:
        raise ParameterError(f"database {db} outside [0, {params.num_databases})")
    rng = rng or SeededRandomness(0)
    threshold = dkw_threshold(trials, delta)
    if params.pir_length == 0:
        return SampledPrivacyReport(trials, 0.0, 0.0, threshold, False, True)

    n_db, k_msg = params.num_databases, params.num_messages
    block, blocks, part = params.block_size, params.pir_blocks, params.pir_length
    observations = []
    structural = True
    for theta in range(k_msg):
        template = pir_base.plan_template(n_db, k_msg, theta, blocks, mutation)
        structural &= pir_base.structural_symmetry_ok(
            pir_base.build_plan(template, pir_base.draw_permutations(template, rng)))
        if mutation == "no_permutation":
            perms = np.broadcast_to(np.arange(part, dtype=np.int64), (trials, k_msg, part))
        else:
            perms = rng.permutations(trials * k_msg * blocks, block).reshape(trials, k_msg, blocks, block)
            perms = (perms + (np.arange(blocks) * block)[None, None, :, None]).reshape(trials, k_msg, part)
        lo, hi = int(template.db_offsets[db]), int(template.db_offsets[db + 1])
        keys = _sum_keys(template, perms, part)[:, lo:hi]
        if mutation != "theta_order":
            keys = np.sort(keys, axis=1)
        observations.append(keys)

    max_ks = max_tv = 0.0
    for a, b in combinations(observations, 2):
        for col in range(a.shape[1]):
            xa, xb = np.sort(a[:, col]), np.sort(b[:, col])
            support = np.union1d(xa, xb)
            cdf_a = np.searchsorted(xa, support, side="right") / trials
            cdf_b = np.searchsorted(xb, support, side="right") / trials
            max_ks = max(max_ks, float(np.abs(cdf_a - cdf_b).max()))
            pmf_a = np.diff(np.concatenate([[0.0], cdf_a]))
            pmf_b = np.diff(np.concatenate([[0.0], cdf_b]))
            max_tv = max(max_tv, 0.5 * float(np.abs(pmf_a - pmf_b).sum()))
    return SampledPrivacyReport(trials, max_ks, max_tv, threshold, max_ks > threshold, structural)


# --------------------------------------------------------------------------
# Correctness
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrectnessReport:
    runs: int
    failures: int
    cost_mismatches: int

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.cost_mismatches == 0


def correctness_audit(params: SchemeParams, runs: int, rng: SeededRandomness,
                      mutation: str | None = None) -> CorrectnessReport:
    """Random (store, seed) retrievals for every desired index."""
    expected = optimal_download_cost(params.num_databases, params.num_messages, params.storage)
    failures = mismatches = 0
    for theta in range(params.num_messages):
        for _ in range(runs):
            store = MessageStore.random(params, rng)
            cache = encode_cache(store, params)
            provider = LocalDatabases(store, params.num_databases)
            message, report = retrieve(theta, params, cache, provider, rng, mutation)
            failures += not np.array_equal(message, store.data[theta])
            mismatches += report.normalized != expected
    return CorrectnessReport(runs * params.num_messages, failures, mismatches)


# --------------------------------------------------------------------------
# Converse audits over the exact joint law of messages, queries, answers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SchemeJoint:
    dist: JointDistribution
    message_vars: tuple[str, ...]
    cache_vars: tuple[str, ...]
    query_vars: tuple[str, ...]
    answer_vars: tuple[str, ...]
    download_bits: int
    symbol_bits: int  # length in 1-bit symbols of each enumerated message

    @property
    def transcript(self) -> list[str]:
        return list(self.query_vars) + list(self.answer_vars)


class _QueryCodes:
    """Shared ids for query wire encodings so joints for different theta agree."""

    def __init__(self):
        self.ids: dict[bytes, int] = {}

    def __call__(self, wire: bytes) -> int:
        return self.ids.setdefault(wire, len(self.ids))


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """Rows of 0/1 values -> integer codes (row-wise factorization past 62 bits)."""
    if bits.shape[1] == 0:
        return np.zeros(bits.shape[0], dtype=np.int64)
    if bits.shape[1] <= 62:
        weights = (np.int64(1) << np.arange(bits.shape[1], dtype=np.int64))
        return (bits.astype(np.int64) * weights).sum(axis=1)
    _, inverse = np.unique(bits, axis=0, return_inverse=True)
    return inverse.ravel().astype(np.int64)


def scheme_joint(params: SchemeParams, theta: int, mutation: str | None = None,
                 factor_cache: bool = True, query_codes: _QueryCodes | None = None) -> SchemeJoint:
    """Exact joint law of (W_1..W_K, Z, Q_1..Q_N, A_1..A_N) for desired ``theta``.

    Messages are uniform over 1-bit symbols. With ``factor_cache`` the cached
    prefixes are left out of the enumeration: they are independent of the
    suffixes and fully known given Z, so every conditional term in the audits
    is unchanged while the space shrinks by 2^(K*s*L).
    """
    n_db, k_msg = params.num_databases, params.num_messages
    query_codes = query_codes or _QueryCodes()
    bits = params.pir_length if factor_cache else params.length
    cached = 0 if factor_cache else params.cached_length
    msg_atoms = 2 ** (k_msg * bits)
    perm_atoms = permutation_atoms(params) if mutation != "no_permutation" else 1
    if msg_atoms * perm_atoms > JOINT_ATOM_LIMIT:
        raise InfeasibleAuditError("scheme joint", msg_atoms * perm_atoms, JOINT_ATOM_LIMIT)

    atom = np.arange(msg_atoms, dtype=np.int64)
    stores = ((atom[:, None] >> np.arange(k_msg * bits, dtype=np.int64)) & 1).astype(np.uint8)
    stores = np.ascontiguousarray(stores.reshape(msg_atoms, k_msg, bits))
    w_codes = [(atom >> (j * bits)) & ((1 << bits) - 1) for j in range(k_msg)]
    if cached:
        z_code = _pack_bits(stores[:, :, :cached].reshape(msg_atoms, -1))
    else:
        z_code = np.zeros(msg_atoms, dtype=np.int64)

    q_cols = [[] for _ in range(n_db)]
    a_cols = [[] for _ in range(n_db)]
    download = 0
    if params.pir_length == 0:
        for n in range(n_db):
            q_cols[n].append(np.full(msg_atoms, query_codes(b""), dtype=np.int64))
            a_cols[n].append(np.zeros(msg_atoms, dtype=np.int64))
        n_perm = 1
    else:
        n_perm = 0
        for plan, wire in _wire_plans(params, theta, mutation):
            n_perm += 1
            # Answers of every message atom to every database, one kernel call.
            if not factor_cache:
                shifted = wire
            else:
                shifted = list(plan.queries)
            msgs = np.concatenate([q.msgs for q in shifted])
            idx = np.concatenate([q.idx for q in shifted])
            answers = _kernels.xor_gather_batch(stores, msgs, idx)
            start = 0
            for n, q in enumerate(wire):
                stop = start + len(q)
                q_cols[n].append(np.full(msg_atoms, query_codes(encode_query(q)), dtype=np.int64))
                a_cols[n].append(_pack_bits(answers[:, start:stop]))
                start = stop
            download = start

    names, codes = [], []
    message_vars = tuple(f"W{j + 1}" for j in range(k_msg))
    for j, name in enumerate(message_vars):
        names.append(name)
        codes.append(np.tile(w_codes[j], n_perm))
    names.append("Z")
    codes.append(np.tile(z_code, n_perm))
    query_vars = tuple(f"Q{n + 1}" for n in range(n_db))
    answer_vars = tuple(f"A{n + 1}" for n in range(n_db))
    for n in range(n_db):
        names.append(query_vars[n])
        codes.append(np.concatenate(q_cols[n]))
    for n in range(n_db):
        names.append(answer_vars[n])
        codes.append(np.concatenate(a_cols[n]))
    dist = JointDistribution.from_codes(names, codes)
    return SchemeJoint(dist, message_vars, ("Z",), query_vars, answer_vars, download, bits)


@lru_cache(maxsize=64)
def _cached_joints(params: SchemeParams, mutation: str | None, factor_cache: bool):
    codes = _QueryCodes()
    return tuple(scheme_joint(params, theta, mutation, factor_cache, codes)
                 for theta in range(params.num_messages))


def _joint_privacy_ok(a: SchemeJoint, b: SchemeJoint) -> bool:
    """(Q_n, A_n, W_1..W_K, Z) identically distributed under both joints, every n."""
    if a.dist.num_atoms != b.dist.num_atoms:
        return False
    base = list(a.message_vars) + list(a.cache_vars)
    for q, ans in zip(a.query_vars, a.answer_vars):
        cols = base + [q, ans]
        ca = [a.dist._codes[c] for c in cols]
        cb = [b.dist._codes[c] for c in cols]
        cards = [int(max(x.max(), y.max())) + 1 for x, y in zip(ca, cb)]
        ka = np.sort(_kernels.combine_keys(ca, cards))
        kb = np.sort(_kernels.combine_keys(cb, cards))
        if not np.array_equal(ka, kb):
            return False
    return True


@dataclass(frozen=True)
class ConverseAudit:
    lhs: float
    rhs: float
    download_bits: int
    expected_download_bits: Fraction
    joint_privacy_ok: bool = True
    terms: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs

    @property
    def passed(self) -> bool:
        return (self.slack >= -TOL and self.download_bits == self.expected_download_bits
                and self.joint_privacy_ok)


def _expected_download(params: SchemeParams) -> Fraction:
    return optimal_download_cost(params.num_databases, params.num_messages, params.storage) * params.length


def lemma2_audit(params: SchemeParams, k: int, mutation: str | None = None,
                 factor_cache: bool = True) -> ConverseAudit:
    """Side-information step of the converse at message k (1-based, 2..K+1).

    lhs = I(W_k..W_K; Q, A under desired k-1 | Z, W_1..W_{k-1})
    rhs = [H(W_k | Z, W_1..W_{k-1}) + I(W_{k+1}..W_K; Q, A under desired k | Z, W_1..W_k)] / N
    """
    k_msg, n_db = params.num_messages, params.num_databases
    if not 2 <= k <= k_msg + 1:
        raise ParameterError(f"k={k} outside [2, {k_msg + 1}]")
    if k_msg == 1 and k == 2:
        return ConverseAudit(0.0, 0.0, 0, Fraction(0))
    joints = _cached_joints(params, mutation, factor_cache)
    prev = joints[k - 2]
    w = list(prev.message_vars)
    z = list(prev.cache_vars)
    lhs = mutual_information(prev.dist, w[k - 1:], prev.transcript, z + w[: k - 1])
    fresh = entropy(prev.dist, w[k - 1:k], z + w[: k - 1])
    side = 0.0
    privacy_ok = True
    if k <= k_msg:
        cur = joints[k - 1]
        side = mutual_information(cur.dist, w[k:], cur.transcript, z + w[:k])
        privacy_ok = _joint_privacy_ok(prev, cur)
    rhs = (fresh + side) / n_db
    terms = {"lhs_information": lhs, "fresh_entropy": fresh, "side_information": side}
    return ConverseAudit(lhs, rhs, prev.download_bits, _expected_download(params), privacy_ok, terms)


def eq2_audit(params: SchemeParams, mutation: str | None = None,
              factor_cache: bool = True) -> ConverseAudit:
    """D >= H(W_1 | Z) + I(W_2..W_K; Q, A under desired 1 | Z, W_1), with D measured."""
    first = _cached_joints(params, mutation, factor_cache)[0]
    w, z = list(first.message_vars), list(first.cache_vars)
    h1 = entropy(first.dist, w[:1], z)
    info = mutual_information(first.dist, w[1:], first.transcript, z + w[:1])
    terms = {"desired_entropy": h1, "undesired_information": info}
    return ConverseAudit(float(first.download_bits), h1 + info, first.download_bits,
                         _expected_download(params), True, terms)
