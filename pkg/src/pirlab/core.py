"""Instance parameters and the message / cache / query / answer data model.

Symbols are bytes combined under XOR. Audit-scale instances reuse the same
types with 0/1 symbols; nothing here depends on the symbol width.
"""

from __future__ import annotations

import struct
import sys
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

import numpy as np

from pirlab import _kernels

Rational = Fraction

MAX_TERMS_PER_SUM = 255
MAX_SUMS_PER_QUERY = 0xFFFF


class ParameterError(ValueError):
    """Instance parameters are invalid or too large."""


class MalformedQueryError(ValueError):
    """A query references symbols outside the store or breaks sum invariants."""


@dataclass(frozen=True)
class SchemeParams:
    num_databases: int
    num_messages: int
    cache_numerator: int = 0
    cache_denominator: int = 1
    block_multiplier: int = 1

    def __post_init__(self) -> None:
        n, k = self.num_databases, self.num_messages
        p, q, m = self.cache_numerator, self.cache_denominator, self.block_multiplier
        for name, value in (("num_databases", n), ("num_messages", k),
                            ("cache_denominator", q), ("block_multiplier", m)):
            if not isinstance(value, int) or value < 1:
                raise ParameterError(f"{name} must be an integer >= 1, got {value!r}")
        if not isinstance(p, int) or p < 0 or p > q:
            raise ParameterError(f"cache_numerator must satisfy 0 <= p <= q, got p={p}, q={q}")
        if k > 0xFFFF:
            raise ParameterError("num_messages exceeds the u16 wire field")
        if derive_length(self) > 0xFFFFFFFF:
            raise ParameterError(f"message length {derive_length(self)} exceeds the u32 wire field")
        assert self.cached_length + self.pir_length == self.length
        assert self.pir_length % self.block_size == 0

    @property
    def block_size(self) -> int:
        """Sub-packetization of one base-scheme block, N^K."""
        return self.num_databases ** self.num_messages

    @property
    def length(self) -> int:
        return derive_length(self)

    @property
    def cache_fraction(self) -> Fraction:
        return Fraction(self.cache_numerator, self.cache_denominator)

    @property
    def storage(self) -> Fraction:
        """Normalized storage S = s*K, in message units."""
        return self.cache_fraction * self.num_messages

    @property
    def cached_length(self) -> int:
        return self.cache_numerator * self.block_multiplier * self.block_size

    @property
    def pir_length(self) -> int:
        return (self.cache_denominator - self.cache_numerator) * self.block_multiplier * self.block_size

    @property
    def pir_blocks(self) -> int:
        return (self.cache_denominator - self.cache_numerator) * self.block_multiplier


def derive_length(params: SchemeParams) -> int:
    """Message length L = q * m * N^K symbols."""
    n, k = params.num_databases, params.num_messages
    # Guard before exponentiation so absurd instances fail fast.
    if k * max(n.bit_length() - 1, 0) > 64:
        raise ParameterError(f"N^K = {n}^{k} overflows the 64-bit range")
    length = params.cache_denominator * params.block_multiplier * n ** k
    if length > sys.maxsize:
        raise ParameterError(f"message length {length} overflows the platform integer range")
    return length


# --------------------------------------------------------------------------
# Messages and cache
# --------------------------------------------------------------------------


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


class MessageStore:
    """K equal-length messages; every database holds an identical copy."""

    def __init__(self, messages: Sequence[Sequence[int]] | np.ndarray):
        try:
            data = np.asarray(messages, dtype=np.uint8)
        except ValueError as exc:
            raise ParameterError(f"messages must form a K x L array: {exc}") from None
        if data.ndim != 2:
            raise ParameterError("messages must form a K x L array")
        self.data = _frozen(data.copy())

    @classmethod
    def random(cls, params: SchemeParams, rng: "SeededRandomness", bits: int = 8) -> "MessageStore":
        return cls(rng.symbols((params.num_messages, params.length), bits=bits))

    @property
    def num_messages(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def messages(self) -> list[bytes]:
        return [row.tobytes() for row in self.data]

    def message(self, k: int) -> np.ndarray:
        return self.data[k]

    def check(self, params: SchemeParams) -> None:
        if self.num_messages != params.num_messages or self.length != params.length:
            raise ParameterError(
                f"store shape {self.data.shape} does not match "
                f"(K={params.num_messages}, L={params.length})")

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MessageStore) and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"MessageStore(K={self.num_messages}, L={self.length})"


@dataclass(frozen=True, eq=False)
class CacheContent:
    """The user's cache Z: segment k holds the stored prefix of message k."""

    segments: np.ndarray  # (K, s*L) uint8

    @property
    def size(self) -> int:
        return int(self.segments.size)

    def segment(self, k: int) -> np.ndarray:
        return self.segments[k]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CacheContent) and np.array_equal(self.segments, other.segments)


# --------------------------------------------------------------------------
# Queries and answers
# --------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class SymbolSum:
    """XOR of stored symbols, one term per distinct message."""

    terms: tuple[tuple[int, int], ...]

    def __init__(self, terms: Iterable[tuple[int, int]]):
        ordered = tuple(sorted((int(m), int(i)) for m, i in terms))
        if not ordered:
            raise MalformedQueryError("a sum needs at least one term")
        ids = [m for m, _ in ordered]
        if len(set(ids)) != len(ids):
            raise MalformedQueryError(f"duplicate message id in sum {ordered}")
        if any(m < 0 or i < 0 for m, i in ordered):
            raise MalformedQueryError(f"negative id in sum {ordered}")
        object.__setattr__(self, "terms", ordered)

    @property
    def message_ids(self) -> frozenset[int]:
        return frozenset(m for m, _ in self.terms)

    def __len__(self) -> int:
        return len(self.terms)


class Query:
    """Ordered list of symbol sums sent to one database.

    Stored column-wise: ``msgs[s, t]`` and ``idx[s, t]`` for term ``t`` of
    sum ``s``, terms sorted by message id and padded with -1.
    """

    __slots__ = ("msgs", "idx")

    def __init__(self, msgs: np.ndarray, idx: np.ndarray):
        msgs = np.asarray(msgs, dtype=np.int64)
        idx = np.asarray(idx, dtype=np.int64)
        if msgs.ndim != 2 or msgs.shape != idx.shape:
            raise MalformedQueryError("term arrays must be 2-D and equally shaped")
        self.msgs = _frozen(msgs)
        self.idx = _frozen(idx)

    @classmethod
    def from_sums(cls, sums: Iterable[SymbolSum | Iterable[tuple[int, int]]]) -> "Query":
        sums = [s if isinstance(s, SymbolSum) else SymbolSum(s) for s in sums]
        width = max((len(s) for s in sums), default=0)
        msgs = np.full((len(sums), width), -1, dtype=np.int64)
        idx = np.full((len(sums), width), -1, dtype=np.int64)
        for row, s in enumerate(sums):
            for col, (m, i) in enumerate(s.terms):
                msgs[row, col] = m
                idx[row, col] = i
        return cls(msgs, idx)

    @property
    def sums(self) -> list[SymbolSum]:
        return [SymbolSum((int(m), int(i)) for m, i in zip(mr, ir) if m >= 0)
                for mr, ir in zip(self.msgs, self.idx)]

    def __len__(self) -> int:
        return self.msgs.shape[0]

    def __iter__(self) -> Iterator[SymbolSum]:
        return iter(self.sums)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Query) and self.sums == other.sums

    def __hash__(self) -> int:
        return hash(encode_query(self))

    def __repr__(self) -> str:
        return f"Query({[s.terms for s in self.sums]})"

    def shifted(self, offset: int) -> "Query":
        """Same sums with every symbol index moved by ``offset``."""
        return Query(self.msgs, np.where(self.msgs >= 0, self.idx + offset, -1))

    def sorted(self) -> "Query":
        return self.take(canonical_order(self.msgs, self.idx))

    def take(self, order: np.ndarray) -> "Query":
        return Query(self.msgs[order], self.idx[order])


def canonical_order(msgs: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Row order sorting sums lexicographically by their (message, index) terms."""
    if msgs.shape[0] == 0 or msgs.shape[1] == 0:
        return np.arange(msgs.shape[0])
    # Padding (-1, -1) sorts before any real term, so shorter prefixes come first.
    keys = []
    for col in reversed(range(msgs.shape[1])):
        keys.append(idx[:, col])
        keys.append(msgs[:, col])
    return np.lexsort(keys)


@dataclass(frozen=True, eq=False)
class Answer:
    symbols: np.ndarray  # uint8, one per sum, query order

    def __len__(self) -> int:
        return int(self.symbols.size)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Answer) and np.array_equal(self.symbols, other.symbols)

    def to_bytes(self) -> bytes:
        return self.symbols.astype(np.uint8).tobytes()


def validate_query(query: Query, store: MessageStore) -> None:
    msgs, idx = query.msgs, query.idx
    if len(query) and msgs.shape[1] == 0:
        raise MalformedQueryError("sum with no terms")
    present = msgs >= 0
    if len(query) and not present[:, 0].all():
        raise MalformedQueryError("sum with no terms")
    if (msgs[present] >= store.num_messages).any():
        raise MalformedQueryError("message id out of range")
    if (idx[present] < 0).any() or (idx[present] >= store.length).any():
        raise MalformedQueryError("symbol index out of range")
    if msgs.shape[1] > 1:
        m = np.where(present, msgs, np.iinfo(np.int64).max)
        if (np.diff(m, axis=1)[present[:, 1:]] <= 0).any():
            raise MalformedQueryError("terms must carry distinct message ids")


def xor_combine(store: MessageStore, symbol_sum: SymbolSum) -> int:
    value = 0
    for m, i in symbol_sum.terms:
        if m >= store.num_messages or i >= store.length:
            raise MalformedQueryError(f"term ({m}, {i}) outside a {store.num_messages}x{store.length} store")
        value ^= int(store.data[m, i])
    return value


def answer_query(query: Query, store: MessageStore) -> Answer:
    """Answer each sum with the XOR of the referenced stored symbols."""
    validate_query(query, store)
    return Answer(_frozen(_kernels.xor_gather(store.data, query.msgs, query.idx)))


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

_U16 = struct.Struct("<H")
_TERM = struct.Struct("<HI")


def encode_query(query: Query) -> bytes:
    """u16 sum count, then per sum a u8 term count and (u16 msg, u32 idx) terms."""
    if len(query) > MAX_SUMS_PER_QUERY:
        raise MalformedQueryError(f"{len(query)} sums exceed the u16 count field")
    out = bytearray(_U16.pack(len(query)))
    for mrow, irow in zip(query.msgs.tolist(), query.idx.tolist()):
        terms = [(m, i) for m, i in zip(mrow, irow) if m >= 0]
        if len(terms) > MAX_TERMS_PER_SUM:
            raise MalformedQueryError(f"{len(terms)} terms exceed the u8 count field")
        out.append(len(terms))
        for m, i in terms:
            if m > 0xFFFF or i > 0xFFFFFFFF:
                raise MalformedQueryError(f"term ({m}, {i}) exceeds wire field widths")
            out += _TERM.pack(m, i)
    return bytes(out)


def decode_query(payload: bytes) -> Query:
    if len(payload) < 2:
        raise MalformedQueryError("query payload shorter than its count field")
    (count,) = _U16.unpack_from(payload, 0)
    pos = 2
    sums = []
    for _ in range(count):
        if pos >= len(payload):
            raise MalformedQueryError("truncated query payload")
        n_terms = payload[pos]
        pos += 1
        end = pos + n_terms * _TERM.size
        if end > len(payload):
            raise MalformedQueryError("truncated query payload")
        sums.append([_TERM.unpack_from(payload, pos + t * _TERM.size) for t in range(n_terms)])
        pos = end
    if pos != len(payload):
        raise MalformedQueryError(f"{len(payload) - pos} trailing bytes in query payload")
    return Query.from_sums(sums)


def canonical_form(query: Query) -> bytes:
    """Order-independent byte encoding; equal iff the sum sets are equal."""
    return encode_query(query.sorted())


# --------------------------------------------------------------------------
# Randomness
# --------------------------------------------------------------------------


class SeededRandomness:
    """The user's private randomness, reproducible from a 64-bit seed.

    Backed by PCG64; permutations use numpy's exact Fisher-Yates shuffle.
    Not safe to share between threads: fan out with :meth:`spawn`.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy)
        else:
            if not 0 <= int(seed) < 2 ** 64:
                raise ValueError("seed must be a 64-bit unsigned integer")
            self.seed = int(seed)
            self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def permutations(self, rows: int, n: int) -> np.ndarray:
        """``rows`` independent uniform permutations of range(n), one per row."""
        base = np.broadcast_to(np.arange(n, dtype=np.int64), (rows, n))
        return self.generator.permuted(base, axis=1)

    def symbols(self, shape: tuple[int, ...], bits: int = 8) -> np.ndarray:
        return self.generator.integers(0, 1 << bits, size=shape, dtype=np.uint8)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def spawn(self, count: int = 1) -> list["SeededRandomness"]:
        return [SeededRandomness(child) for child in self._seq.spawn(count)]

    def clone(self) -> "SeededRandomness":
        """Fresh generator at this one's starting state."""
        seq = np.random.SeedSequence(self._seq.entropy, spawn_key=self._seq.spawn_key)
        return SeededRandomness(seq)
