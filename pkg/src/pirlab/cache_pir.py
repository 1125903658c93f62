"""Memory sharing between the no-cache scheme and full caching.

Every message is split into a cached prefix of s*L symbols and a suffix of
(1-s)*L symbols retrieved privately with the base scheme. The databases
know the split point; they never see the cache itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Protocol, Sequence

import numpy as np

from pirlab import pir_base
from pirlab.core import (
    Answer,
    CacheContent,
    MessageStore,
    ParameterError,
    Query,
    SchemeParams,
    SeededRandomness,
    _frozen,
    answer_query,
    encode_query,
)


class RetrievalError(RuntimeError):
    """A database could not be reached or returned an unusable answer."""

    def __init__(self, database: int | str, reason: str):
        super().__init__(f"database {database}: {reason}")
        self.database = database
        self.reason = reason


class AnswerProvider(Protocol):
    """Access to the N replicated databases."""

    num_databases: int

    def answer_all(self, queries: Sequence[Query]) -> list[Answer]:
        ...


class LocalDatabases:
    """In-process databases sharing one immutable store."""

    def __init__(self, store: MessageStore, num_databases: int):
        self.store = store
        self.num_databases = num_databases

    def answer_all(self, queries: Sequence[Query]) -> list[Answer]:
        answers = []
        for n, q in enumerate(queries):
            try:
                answers.append(answer_query(q, self.store))
            except ValueError as exc:
                raise RetrievalError(n, str(exc)) from exc
        return answers


@dataclass(frozen=True)
class CostReport:
    downloaded_symbols: int
    message_length: int
    query_upload_bytes: int
    queries_sent: int

    @property
    def normalized(self) -> Fraction:
        return Fraction(self.downloaded_symbols, self.message_length)


def encode_cache(store: MessageStore, params: SchemeParams) -> CacheContent:
    store.check(params)
    return CacheContent(_frozen(store.data[:, : params.cached_length].copy()))


def retrieve(theta: int, params: SchemeParams, cache: CacheContent,
             provider: AnswerProvider, rng: SeededRandomness,
             mutation: str | None = None) -> tuple[np.ndarray, CostReport]:
    """Privately fetch message ``theta`` (0-based), using the cache for its prefix."""
    n_db, k_msg = params.num_databases, params.num_messages
    if not 0 <= theta < k_msg:
        raise ParameterError(f"message index {theta} outside [0, {k_msg})")
    if cache.segments.shape != (k_msg, params.cached_length):
        raise ParameterError(f"cache shape {cache.segments.shape} does not match the instance")
    if provider.num_databases != n_db:
        raise ParameterError(f"provider reaches {provider.num_databases} databases, need {n_db}")

    prefix = cache.segment(theta)
    if params.pir_length == 0:
        return prefix.copy(), CostReport(0, params.length, 0, 0)

    plan = pir_base.plan_queries(n_db, k_msg, params.pir_length, theta, rng, mutation)
    wire = [q.shifted(params.cached_length) for q in plan.queries]
    answers = provider.answer_all(wire)
    if len(answers) != n_db:
        raise RetrievalError("*", f"expected {n_db} answers, got {len(answers)}")
    for n, (q, a) in enumerate(zip(wire, answers)):
        if len(a) != len(q):
            raise RetrievalError(n, f"answer has {len(a)} symbols for {len(q)} sums")
    suffix = pir_base.decode(plan, answers)
    report = CostReport(
        downloaded_symbols=sum(len(a) for a in answers),
        message_length=params.length,
        query_upload_bytes=sum(len(encode_query(q)) for q in wire),
        queries_sent=len(wire),
    )
    return np.concatenate([prefix, suffix.astype(prefix.dtype)]), report


def wire_queries(plan: pir_base.RetrievalPlan, params: SchemeParams) -> list[Query]:
    return [q.shifted(params.cached_length) for q in plan.queries]


def memory_share_cost(s1, d1, s2, d2, alpha) -> tuple[Fraction, Fraction]:
    """Storage and download of running scheme 1 on an alpha-fraction of every
    message and scheme 2 on the rest."""
    alpha = Fraction(alpha)
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    s1, d1, s2, d2 = map(Fraction, (s1, d1, s2, d2))
    return alpha * s1 + (1 - alpha) * s2, alpha * d1 + (1 - alpha) * d2
