"""Capacity-achieving zero-error PIR without a cache.

Each block of N^K symbols per message is served in K rounds. In round k,
database n receives C(K, k) * (N-1)^(k-1) sums of k distinct messages:
sums holding the desired message pair a fresh desired symbol with an
undesired (k-1)-sum downloaded from another database in round k-1, and
the remaining sums carry fresh undesired symbols only (they become side
information for the other databases in round k+1).

Plans are built in two steps. :func:`plan_template` lays out the scheme
over *permuted* positions in a fixed canonical order; it depends only on
(N, K, theta, blocks). :func:`build_plan` then maps positions through the
user's private per-message permutations and sorts every query into
canonical order, so neither index values nor sum order depend on theta.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from itertools import combinations
from math import comb

import numpy as np

from pirlab.core import (
    Answer,
    MessageStore,
    ParameterError,
    Query,
    SeededRandomness,
    _frozen,
    answer_query,
    canonical_order,
)

__all__ = [
    "MUTATIONS",
    "DecodeEntry",
    "PlanTemplate",
    "RetrievalPlan",
    "SumRole",
    "answer_all",
    "answer_query",
    "build_plan",
    "decode",
    "download_cost",
    "normalized_cost",
    "plan_queries",
    "plan_template",
    "structural_symmetry_ok",
]

# Deliberately broken variants, used only to show the audits catch them.
MUTATIONS = ("shared_counter", "theta_order", "no_permutation")


class SumRole(enum.IntEnum):
    FRESH_DESIRED = 0
    PAIRED = 1
    PURE_UNDESIRED = 2


@dataclass(frozen=True)
class PlanTemplate:
    num_databases: int
    num_messages: int
    desired_index: int
    blocks: int
    mutation: str | None
    msgs: np.ndarray        # (S, w) message ids, emission order, grouped by database
    pos: np.ndarray         # (S, w) permuted positions
    roles: np.ndarray       # (S,) SumRole
    side: np.ndarray        # (S,) emission id of the side-information sum, or -1
    rounds: np.ndarray      # (S,) round k in 1..K
    db_offsets: np.ndarray  # (N + 1,)
    desired_sum: np.ndarray  # (L',) emission id holding each permuted desired position

    @property
    def part_length(self) -> int:
        return self.blocks * self.num_databases ** self.num_messages

    @property
    def total_sums(self) -> int:
        return int(self.msgs.shape[0])


@lru_cache(maxsize=512)
def plan_template(num_databases: int, num_messages: int, desired_index: int,
                  blocks: int = 1, mutation: str | None = None) -> PlanTemplate:
    n_db, k_msg, theta = num_databases, num_messages, desired_index
    if n_db < 1 or k_msg < 1 or blocks < 1:
        raise ParameterError("need N >= 1, K >= 1 and at least one block")
    if not 0 <= theta < k_msg:
        raise ParameterError(f"desired index {theta} outside [0, {k_msg})")
    if mutation is not None and mutation not in MUTATIONS:
        raise ParameterError(f"unknown mutation {mutation!r}")
    block = n_db ** k_msg

    # per database: list of (terms, role, side (db, local) | None, round)
    per_db: list[list[tuple]] = [[] for _ in range(n_db)]
    for b in range(blocks):
        base = b * block
        counters = [0] * k_msg
        shared = [0]

        def fresh(j: int) -> int:
            if mutation == "shared_counter":
                c = shared[0]
                shared[0] += 1
                return base + c % block
            c = counters[j]
            counters[j] += 1
            return base + c

        prev: list[dict] = [{} for _ in range(n_db)]
        for k in range(1, k_msg + 1):
            cur: list[dict] = [defaultdict(list) for _ in range(n_db)]
            reps = (n_db - 1) ** (k - 1)
            for n in range(n_db):
                for subset in combinations(range(k_msg), k):
                    if theta not in subset:
                        continue
                    if k == 1:
                        per_db[n].append((((theta, fresh(theta)),), SumRole.FRESH_DESIRED, None, k))
                        continue
                    rest = tuple(j for j in subset if j != theta)
                    for other in range(n_db):
                        if other == n:
                            continue
                        for local in prev[other].get(rest, ()):
                            side_terms = per_db[other][local][0]
                            terms = tuple(sorted(side_terms + ((theta, fresh(theta)),)))
                            per_db[n].append((terms, SumRole.PAIRED, (other, local), k))
                for subset in combinations(range(k_msg), k):
                    if theta in subset:
                        continue
                    for _ in range(reps):
                        terms = tuple((j, fresh(j)) for j in subset)
                        cur[n][subset].append(len(per_db[n]))
                        per_db[n].append((terms, SumRole.PURE_UNDESIRED, None, k))
            prev = cur

    offsets = np.zeros(n_db + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(rows) for rows in per_db])
    total = int(offsets[-1])
    msgs = np.full((total, k_msg), -1, dtype=np.int64)
    pos = np.full((total, k_msg), -1, dtype=np.int64)
    roles = np.empty(total, dtype=np.int64)
    side = np.full(total, -1, dtype=np.int64)
    rounds = np.empty(total, dtype=np.int64)
    desired_sum = np.full(blocks * block, -1, dtype=np.int64)
    for n, rows in enumerate(per_db):
        for local, (terms, role, ref, k) in enumerate(rows):
            g = offsets[n] + local
            for t, (m, p) in enumerate(terms):
                msgs[g, t] = m
                pos[g, t] = p
                if m == theta:
                    desired_sum[p] = g
            roles[g] = role
            rounds[g] = k
            if ref is not None:
                side[g] = offsets[ref[0]] + ref[1]
    return PlanTemplate(n_db, k_msg, theta, blocks, mutation,
                        _frozen(msgs), _frozen(pos), _frozen(roles), _frozen(side),
                        _frozen(rounds), _frozen(offsets), _frozen(desired_sum))


@dataclass(frozen=True)
class DecodeEntry:
    role: SumRole
    database: int
    position: int
    side: tuple[int, int] | None = None
    desired_position: int | None = None


@dataclass(frozen=True, eq=False)
class RetrievalPlan:
    """Queries for all N databases plus the private decoding map.

    ``permutations[j, u]`` is the real index of permuted position ``u`` of
    message ``j``. Positions in ``desired_loc`` / ``side_loc`` index the
    concatenation of all answers in wire order.
    """

    template: PlanTemplate
    permutations: np.ndarray
    queries: tuple[Query, ...]
    wire_position: np.ndarray  # (S,) emission id -> flat wire position
    desired_loc: np.ndarray
    side_loc: np.ndarray

    @property
    def desired_index(self) -> int:
        return self.template.desired_index

    @property
    def num_databases(self) -> int:
        return self.template.num_databases

    @property
    def part_length(self) -> int:
        return self.template.part_length

    def _split(self, flat: int) -> tuple[int, int]:
        offsets = self.template.db_offsets
        db = int(np.searchsorted(offsets, flat, side="right") - 1)
        return db, int(flat - offsets[db])

    @property
    def decode_schedule(self) -> list[DecodeEntry]:
        t = self.template
        theta = t.desired_index
        entries: list[DecodeEntry | None] = [None] * t.total_sums
        for g in range(t.total_sums):
            flat = int(self.wire_position[g])
            db, position = self._split(flat)
            role = SumRole(int(t.roles[g]))
            side = None
            if t.side[g] >= 0:
                side = self._split(int(self.wire_position[t.side[g]]))
            desired = None
            hit = np.nonzero(t.msgs[g] == theta)[0]
            if hit.size:
                desired = int(t.pos[g, hit[0]])
            entries[flat] = DecodeEntry(role, db, position, side, desired)
        return entries

    @property
    def desired_slot_map(self) -> dict[int, tuple[int, int]]:
        return {u: self._split(int(flat)) for u, flat in enumerate(self.desired_loc) if flat >= 0}


def build_plan(template: PlanTemplate, permutations: np.ndarray) -> RetrievalPlan:
    """Realize a template under explicit per-message permutations (K, L')."""
    t = template
    perms = np.asarray(permutations, dtype=np.int64)
    if t.mutation == "no_permutation":
        perms = np.broadcast_to(np.arange(t.part_length, dtype=np.int64),
                                (t.num_messages, t.part_length))
    live = t.msgs >= 0
    real = np.where(live, perms[np.where(live, t.msgs, 0), np.where(live, t.pos, 0)], -1)

    wire_position = np.empty(t.total_sums, dtype=np.int64)
    queries = []
    for n in range(t.num_databases):
        lo, hi = int(t.db_offsets[n]), int(t.db_offsets[n + 1])
        m_db, i_db = t.msgs[lo:hi], real[lo:hi]
        if t.mutation == "theta_order":
            order = np.arange(hi - lo)
        else:
            order = canonical_order(m_db, i_db)
        wire_position[lo + order] = lo + np.arange(hi - lo)
        queries.append(Query(m_db[order], i_db[order]))

    desired_loc = np.where(t.desired_sum >= 0, wire_position[np.maximum(t.desired_sum, 0)], -1)
    side_ids = np.where(t.desired_sum >= 0, t.side[np.maximum(t.desired_sum, 0)], -1)
    side_loc = np.where(side_ids >= 0, wire_position[np.maximum(side_ids, 0)], -1)
    return RetrievalPlan(t, _frozen(perms), tuple(queries), _frozen(wire_position),
                         _frozen(desired_loc), _frozen(side_loc))


def draw_permutations(template: PlanTemplate, rng: SeededRandomness) -> np.ndarray:
    """Independent uniform permutation of every (message, block) segment."""
    block = template.num_databases ** template.num_messages
    k, b = template.num_messages, template.blocks
    perms = rng.permutations(k * b, block).reshape(k, b, block)
    perms = perms + (np.arange(b, dtype=np.int64) * block)[None, :, None]
    return perms.reshape(k, b * block)


def plan_queries(num_databases: int, num_messages: int, part_length: int,
                 desired_index: int, rng: SeededRandomness,
                 mutation: str | None = None) -> RetrievalPlan:
    block = num_databases ** num_messages
    if part_length < block or part_length % block:
        raise ParameterError(f"part length {part_length} is not a positive multiple of N^K = {block}")
    template = plan_template(num_databases, num_messages, desired_index,
                             part_length // block, mutation)
    return build_plan(template, draw_permutations(template, rng))


def decode(plan: RetrievalPlan, answers: list[Answer] | tuple[Answer, ...]) -> np.ndarray:
    """Recover the desired part (L' symbols) from the N answers."""
    if len(answers) != plan.num_databases:
        raise ValueError(f"expected {plan.num_databases} answers, got {len(answers)}")
    for n, (q, a) in enumerate(zip(plan.queries, answers)):
        if len(a) != len(q):
            raise ValueError(f"answer from database {n} has {len(a)} symbols, query had {len(q)}")
    flat = np.concatenate([a.symbols for a in answers]) if answers else np.zeros(0, np.uint8)
    if plan.template.mutation is None:
        paired = plan.template.roles[np.maximum(plan.template.desired_sum, 0)] == SumRole.PAIRED
        if (plan.desired_loc < 0).any() or (plan.side_loc[paired] < 0).any():
            raise AssertionError("dangling entry in decode schedule")
    values = flat[np.maximum(plan.desired_loc, 0)]
    values = values ^ np.where(plan.side_loc >= 0, flat[np.maximum(plan.side_loc, 0)], 0).astype(values.dtype)
    out = np.zeros(plan.part_length, dtype=flat.dtype)
    out[plan.permutations[plan.desired_index]] = values
    return out


def download_cost(plan: RetrievalPlan) -> int:
    """Downloaded symbols: one per sum across all databases."""
    return sum(len(q) for q in plan.queries)


def normalized_cost(num_databases: int, num_messages: int) -> Fraction:
    """sum_{k<K} N^-k: download per desired symbol of the base scheme."""
    return sum((Fraction(1, num_databases ** k) for k in range(num_messages)), Fraction(0))


def expected_sum_count(num_databases: int, num_messages: int, k: int) -> int:
    """Sums of exactly k messages per database per block."""
    return comb(num_messages, k) * (num_databases - 1) ** (k - 1)


def structural_symmetry_ok(plan: RetrievalPlan) -> bool:
    """Each database's message-subset multiset is invariant under relabelling.

    Equivalently, every k-subset of messages occurs equally often per database.
    """
    k_msg = plan.template.num_messages
    for q in plan.queries:
        counts: dict[frozenset, int] = defaultdict(int)
        for s in q.sums:
            counts[s.message_ids] += 1
        for k in range(1, k_msg + 1):
            seen = {counts.get(frozenset(c), 0) for c in combinations(range(k_msg), k)}
            if len(seen) != 1:
                return False
    return True


def answer_all(queries, store: MessageStore) -> list[Answer]:
    return [answer_query(q, store) for q in queries]
