"""Cache-aided private information retrieval."""

from pirlab.bounds import capacity, optimal_download_cost
from pirlab.cache_pir import LocalDatabases, encode_cache, memory_share_cost, retrieve
from pirlab.core import (
    Answer,
    CacheContent,
    MessageStore,
    Query,
    SchemeParams,
    SeededRandomness,
    SymbolSum,
    answer_query,
    canonical_form,
    derive_length,
)
from pirlab.pir_base import decode, download_cost, plan_queries

__version__ = "0.1.0"

__all__ = [
    "Answer",
    "CacheContent",
    "LocalDatabases",
    "MessageStore",
    "Query",
    "SchemeParams",
    "SeededRandomness",
    "SymbolSum",
    "answer_query",
    "canonical_form",
    "capacity",
    "decode",
    "derive_length",
    "download_cost",
    "encode_cache",
    "memory_share_cost",
    "optimal_download_cost",
    "plan_queries",
    "retrieve",
]
