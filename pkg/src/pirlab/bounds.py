"""Cost formulas and the entropy machinery behind the converse.

Costs are exact fractions. Entropies are floats in bits, compared at
``TOL = 1e-9``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations, permutations
from typing import Iterable, Mapping, Sequence

import numpy as np

from pirlab import _kernels

TOL = 1e-9


class _Unbounded:
    """Capacity at full storage: nothing needs downloading."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNBOUNDED"

    __str__ = __repr__


UNBOUNDED = _Unbounded()


def _check_instance(n: int, k: int, storage) -> Fraction:
    if n < 1 or k < 1:
        raise ValueError(f"need N >= 1 and K >= 1, got N={n}, K={k}")
    storage = Fraction(storage)
    if not 0 <= storage <= k:
        raise ValueError(f"storage S={storage} outside [0, {k}]")
    return storage


def optimal_download_cost(n: int, k: int, storage) -> Fraction:
    """(1 - S/K) * (1 + 1/N + ... + 1/N^(K-1))."""
    storage = _check_instance(n, k, storage)
    series = sum((Fraction(1, n ** j) for j in range(k)), Fraction(0))
    return (1 - storage / k) * series


def capacity(n: int, k: int, storage):
    cost = optimal_download_cost(n, k, storage)
    return UNBOUNDED if cost == 0 else 1 / cost


# --------------------------------------------------------------------------
# Joint distributions
# --------------------------------------------------------------------------


class JointDistribution:
    """Finite joint distribution over named discrete variables.

    Stored column-wise as integer codes per variable plus a probability per
    atom. Atoms may repeat; marginals merge them.
    """

    def __init__(self, names: Sequence[str], atoms: Mapping[tuple, object]):
        names = list(names)
        rows = list(atoms.items())
        values = [[] for _ in names]
        probs = []
        for value, p in rows:
            if len(value) != len(names):
                raise ValueError(f"atom {value!r} does not match variables {names}")
            for col, v in zip(values, value):
                col.append(v)
            probs.append(p)
        codes, labels = [], []
        for col in values:
            uniq = {}
            codes.append(np.array([uniq.setdefault(v, len(uniq)) for v in col], dtype=np.int64))
            labels.append(list(uniq))
        self._init(names, codes, [len(l) for l in labels], probs, labels)

    @classmethod
    def from_codes(cls, names: Sequence[str], codes: Sequence[np.ndarray],
                   cardinalities: Sequence[int] | None = None,
                   probs: Sequence | np.ndarray | None = None) -> "JointDistribution":
        """Build from integer code columns; ``probs=None`` means uniform atoms."""
        self = cls.__new__(cls)
        codes = [np.asarray(c, dtype=np.int64) for c in codes]
        if cardinalities is None:
            cardinalities = [int(c.max()) + 1 if c.size else 1 for c in codes]
        n_atoms = codes[0].shape[0] if codes else 0
        if probs is None:
            self._init(list(names), codes, list(cardinalities), np.full(n_atoms, 1.0 / n_atoms), None)
            self.exact = None
            self._weights = np.ones(n_atoms)
            self._total = n_atoms
            self.uniform = True
            return self
        self._init(list(names), codes, list(cardinalities), probs, None)
        return self

    def _init(self, names, codes, cards, probs, labels) -> None:
        if len(set(names)) != len(names):
            raise ValueError("duplicate variable names")
        self.names = tuple(names)
        self._codes = dict(zip(names, codes))
        self._cards = dict(zip(names, cards))
        self._labels = dict(zip(names, labels)) if labels is not None else None
        if isinstance(probs, np.ndarray):
            self.exact = None
            self.probs = probs.astype(np.float64)
            total = float(self.probs.sum())
        else:
            probs = list(probs)
            self.exact = probs if all(isinstance(p, (int, Fraction)) for p in probs) else None
            self.probs = np.array([float(p) for p in probs], dtype=np.float64)
            total = sum(probs) if self.exact is not None else float(self.probs.sum())
        self._weights = self.probs
        self._total = 1.0
        self.uniform = False
        if (self.probs < 0).any():
            raise ValueError("negative probability")
        if self.exact is not None:
            if total != 1:
                raise ValueError(f"probabilities sum to {total}, not 1")
        elif abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {total!r}, not 1")

    @property
    def num_atoms(self) -> int:
        return int(self.probs.size)

    @property
    def atoms(self) -> dict[tuple, object]:
        """Merged atom map from value tuples to probability."""
        out: dict[tuple, object] = {}
        if self.exact is not None:
            weights = self.exact
        elif self.uniform:
            weights = [Fraction(1, self.num_atoms)] * self.num_atoms
        else:
            weights = self.probs.tolist()
        cols = [self._codes[n].tolist() for n in self.names]
        for i, p in enumerate(weights):
            key = tuple(self._label(n, col[i]) for n, col in zip(self.names, cols))
            out[key] = out.get(key, 0) + p
        return out

    def _label(self, name: str, code: int):
        return self._labels[name][code] if self._labels is not None else code

    def _resolve(self, variables: Iterable[str]) -> list[str]:
        out = []
        for v in variables:
            if v not in self._codes:
                raise KeyError(f"unknown variable {v!r}; have {list(self.names)}")
            if v not in out:
                out.append(v)
        return out

    def joint_entropy(self, variables: Iterable[str]) -> float:
        names = self._resolve(variables)
        if not names or self.num_atoms == 0:
            return 0.0
        keys = _kernels.combine_keys([self._codes[n] for n in names], [self._cards[n] for n in names])
        return max(_kernels.grouped_entropy(keys, self._weights, self._total), 0.0)

    def key(self, variables: Iterable[str]) -> np.ndarray:
        names = self._resolve(variables)
        return _kernels.combine_keys([self._codes[n] for n in names], [self._cards[n] for n in names])


def entropy(dist: JointDistribution, targets: Iterable[str], conditioning: Iterable[str] = ()) -> float:
    """H(targets | conditioning) in bits."""
    targets, conditioning = list(targets), list(conditioning)
    h = dist.joint_entropy(targets + conditioning) - dist.joint_entropy(conditioning)
    return 0.0 if abs(h) < TOL else h


def mutual_information(dist: JointDistribution, a: Iterable[str], b: Iterable[str],
                       given: Iterable[str] = ()) -> float:
    """I(a; b | given) in bits."""
    a, b, given = list(a), list(b), list(given)
    if not a or not b:
        return 0.0
    h = dist.joint_entropy
    value = h(a + given) + h(b + given) - h(a + b + given) - h(given)
    return 0.0 if abs(value) < TOL else value


# --------------------------------------------------------------------------
# Subset entropies and the converse chain
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SubsetEntropyTable:
    """H(W_S | Z) for every subset S of the K messages (0-based ids)."""

    num_messages: int
    values: Mapping[frozenset, float]

    def __post_init__(self) -> None:
        expected = {frozenset(c) for k in range(self.num_messages + 1)
                    for c in combinations(range(self.num_messages), k)}
        given = {frozenset(s) for s in self.values}
        missing = expected - given
        if missing:
            raise ValueError(f"incomplete table: missing {sorted(map(sorted, missing))[:4]}")
        object.__setattr__(self, "values", {frozenset(s): float(v) for s, v in self.values.items()})
        if abs(self.values[frozenset()]) > TOL:
            raise ValueError("H(empty | Z) must be 0")

    def __getitem__(self, subset: Iterable[int]) -> float:
        return self.values[frozenset(subset)]

    def is_monotone(self) -> bool:
        for s, h in self.values.items():
            for j in s:
                if self.values[s - {j}] > h + TOL:
                    return False
        return True

    def is_submodular(self) -> bool:
        items = list(self.values)
        for a in items:
            for b in items:
                if self.values[a] + self.values[b] + TOL < self.values[a | b] + self.values[a & b]:
                    return False
        return True


def subset_entropy_table(dist: JointDistribution, messages: Sequence[str],
                         cache: Sequence[str] = ()) -> SubsetEntropyTable:
    k = len(messages)
    values = {}
    for size in range(k + 1):
        for c in combinations(range(k), size):
            values[frozenset(c)] = entropy(dist, [messages[i] for i in c], cache)
    return SubsetEntropyTable(k, values)


def subset_mu(table: SubsetEntropyTable, k: int) -> float:
    """Average over k-subsets of H(W_S | Z) / k (k is 1-based)."""
    big_k = table.num_messages
    if not 1 <= k <= big_k:
        raise ValueError(f"k={k} outside [1, {big_k}]")
    total = sum(table[c] for c in combinations(range(big_k), k))
    return total / (math.comb(big_k, k) * k)


@dataclass(frozen=True)
class HanCheck:
    ok: bool
    violation: int | None = None  # 1-based k with mu_k > mu_{k-1}

    def __bool__(self) -> bool:
        return self.ok


def han_chain_check(mus: Sequence[float], tol: float = TOL) -> HanCheck:
    for k in range(1, len(mus)):
        if mus[k] > mus[k - 1] + tol:
            return HanCheck(False, k + 1)
    return HanCheck(True)


def permutation_bound(table: SubsetEntropyTable, n: int, order: Sequence[int]) -> float:
    """Download lower bound from peeling messages off in the given order."""
    k = table.num_messages
    if sorted(order) != list(range(k)):
        raise ValueError(f"{list(order)!r} is not a permutation of range({k})")
    bound = 0.0
    for j in range(1, k + 1):
        bound += (table[order[:j]] - table[order[: j - 1]]) / n ** (j - 1)
    return bound


@dataclass(frozen=True)
class AveragedBound:
    averaged: float  # mean of all K! permutation bounds
    relaxed: float   # mu_K * sum_k N^-k, after lower-bounding every mu_k by mu_K
    han: HanCheck
    mus: tuple[float, ...]


def averaged_bound(table: SubsetEntropyTable, n: int) -> AveragedBound:
    k = table.num_messages
    mus = [subset_mu(table, j) for j in range(1, k + 1)]
    averaged = 0.0
    for j in range(1, k + 1):
        prev = (j - 1) * mus[j - 2] if j > 1 else 0.0
        averaged += (j * mus[j - 1] - prev) / n ** (j - 1)
    relaxed = mus[-1] * sum(1.0 / n ** j for j in range(k))
    han = han_chain_check(mus)
    if han and averaged < relaxed - TOL:
        raise AssertionError(f"averaged bound {averaged} below relaxed bound {relaxed}")
    return AveragedBound(averaged, relaxed, han, tuple(mus))


def mean_permutation_bound(table: SubsetEntropyTable, n: int) -> float:
    bounds = [permutation_bound(table, n, p) for p in permutations(range(table.num_messages))]
    return sum(bounds) / len(bounds)


# --------------------------------------------------------------------------
# Random distributions and CSV fixtures
# --------------------------------------------------------------------------


def random_joint_distribution(rng: np.random.Generator, num_messages: int,
                              message_alphabet: int = 4, cache_alphabet: int = 8,
                              sparsity: float = 0.5) -> JointDistribution:
    """Arbitrary joint law of (W_1..W_K, Z); messages need not be independent."""
    alphabets = [int(rng.integers(2, message_alphabet + 1)) for _ in range(num_messages)]
    alphabets.append(int(rng.integers(1, cache_alphabet + 1)))
    weights = rng.exponential(size=alphabets)
    weights *= rng.random(size=alphabets) >= sparsity * rng.random()
    if weights.sum() == 0:
        weights.flat[0] = 1.0
    weights /= weights.sum()
    grids = np.meshgrid(*[np.arange(a) for a in alphabets], indexing="ij")
    names = [f"W{i + 1}" for i in range(num_messages)] + ["Z"]
    probs = weights.ravel()
    probs = probs / probs.sum()
    return JointDistribution.from_codes(names, [g.ravel() for g in grids], alphabets, probs)


def write_distribution_csv(dist: JointDistribution, fh: io.TextIOBase) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow([*dist.names, "probability"])
    for value, p in dist.atoms.items():
        writer.writerow([*value, str(p) if isinstance(p, Fraction) else repr(float(p))])


def read_distribution_csv(fh: io.TextIOBase) -> JointDistribution:
    reader = csv.reader(fh)
    header = next(reader)
    if not header or header[-1] != "probability":
        raise ValueError("last CSV column must be 'probability'")
    atoms: dict[tuple, object] = {}
    for row in reader:
        if not row:
            continue
        raw = row[-1]
        p = Fraction(raw) if "/" in raw or raw.isdigit() else float(raw)
        key = tuple(row[:-1])
        atoms[key] = atoms.get(key, 0) + p
    return JointDistribution(header[:-1], atoms)


def write_table_csv(table: SubsetEntropyTable, fh: io.TextIOBase) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["subset", "entropy_bits"])
    for size in range(table.num_messages + 1):
        for c in combinations(range(table.num_messages), size):
            writer.writerow([";".join(str(i + 1) for i in c), repr(table[c])])


def read_table_csv(fh: io.TextIOBase) -> SubsetEntropyTable:
    reader = csv.DictReader(fh)
    values = {}
    for row in reader:
        subset = frozenset(int(x) - 1 for x in row["subset"].split(";") if x)
        values[subset] = float(row["entropy_bits"])
    k = max((max(s) + 1 for s in values if s), default=0)
    return SubsetEntropyTable(k, values)
