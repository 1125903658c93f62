"""Hot inner loops: XOR gathering and grouped entropy.

Each kernel has a numba version and a pure-numpy version with identical
results. Set ``PIRLAB_DISABLE_NUMBA=1`` (before import) to force numpy, e.g.
when numba is unavailable or for debugging.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("PIRLAB_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None
BACKEND = "numba" if HAVE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def xor_gather_numpy(store, msgs, idx):
    """out[s] = XOR over terms t of store[msgs[s, t], idx[s, t]] (padding -1)."""
    out = np.zeros(msgs.shape[0], dtype=store.dtype)
    for t in range(msgs.shape[1]):
        m = msgs[:, t]
        live = m >= 0
        vals = store[np.where(live, m, 0), np.where(live, idx[:, t], 0)]
        out ^= np.where(live, vals, 0).astype(store.dtype)
    return out


def xor_gather_batch_numpy(stores, msgs, idx):
    """Same as :func:`xor_gather_numpy` for a batch of stores, shape (B, K, L)."""
    out = np.zeros((stores.shape[0], msgs.shape[0]), dtype=stores.dtype)
    for t in range(msgs.shape[1]):
        m = msgs[:, t]
        live = m >= 0
        vals = stores[:, np.where(live, m, 0), np.where(live, idx[:, t], 0)]
        out ^= np.where(live[None, :], vals, 0).astype(stores.dtype)
    return out


def grouped_mlogm_numpy(keys, weights):
    """sum over distinct keys of m * log2(m), m the merged weight of that key."""
    _, inverse = np.unique(keys, return_inverse=True)
    mass = np.bincount(inverse.ravel(), weights=weights)
    mass = mass[mass > 0]
    return float((mass * np.log2(mass)).sum())


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def xor_gather_numba(store, msgs, idx):
        out = np.zeros(msgs.shape[0], dtype=store.dtype)
        for s in range(msgs.shape[0]):
            acc = 0
            for t in range(msgs.shape[1]):
                m = msgs[s, t]
                if m < 0:
                    break
                acc ^= np.int64(store[m, idx[s, t]])
            out[s] = acc
        return out

    @numba.njit(cache=True)
    def xor_gather_batch_numba(stores, msgs, idx):
        out = np.zeros((stores.shape[0], msgs.shape[0]), dtype=stores.dtype)
        for b in range(stores.shape[0]):
            for s in range(msgs.shape[0]):
                acc = 0
                for t in range(msgs.shape[1]):
                    m = msgs[s, t]
                    if m < 0:
                        break
                    acc ^= np.int64(stores[b, m, idx[s, t]])
                out[b, s] = acc
        return out

    @numba.njit(cache=True)
    def _sorted_mlogm(keys, weights):
        acc = 0.0
        mass = 0.0
        prev = keys[0]
        for i in range(keys.size):
            if keys[i] != prev:
                if mass > 0.0:
                    acc += mass * np.log2(mass)
                mass = 0.0
                prev = keys[i]
            mass += weights[i]
        if mass > 0.0:
            acc += mass * np.log2(mass)
        return acc

    def grouped_mlogm_numba(keys, weights):
        # numpy's sort beats numba's; only the grouping pass is compiled
        order = np.argsort(keys)
        return _sorted_mlogm(keys[order], weights[order])

    def xor_gather(store, msgs, idx):
        return xor_gather_numba(store, msgs, idx)

    def xor_gather_batch(stores, msgs, idx):
        return xor_gather_batch_numba(stores, msgs, idx)

    def grouped_mlogm(keys, weights):
        if keys.size == 0:
            return 0.0
        return float(grouped_mlogm_numba(keys, weights))

else:  # pragma: no cover
    xor_gather = xor_gather_numpy
    xor_gather_batch = xor_gather_batch_numpy

    def grouped_mlogm(keys, weights):
        if keys.size == 0:
            return 0.0
        return grouped_mlogm_numpy(keys, weights)


def grouped_entropy(keys, weights, total=None):
    """Entropy in bits of the law that merges equal keys.

    ``weights`` may be probabilities or unnormalized counts; integer counts
    keep every partial sum exact.
    """
    total = float(weights.sum()) if total is None else float(total)
    if keys.size == 0 or total <= 0:
        return 0.0
    return float(np.log2(total) - grouped_mlogm(keys, weights) / total)


def combine_keys(columns, cardinalities):
    """Mixed-radix merge of integer code columns into one int64 key per row.

    Falls back to row-wise factorization when the radix product would
    overflow int64.
    """
    n_rows = columns[0].shape[0] if columns else 0
    if not columns:
        return np.zeros(n_rows, dtype=np.int64)
    radix = 1
    for c in cardinalities:
        radix *= max(int(c), 1)
    if radix < 2 ** 62:
        key = np.zeros(n_rows, dtype=np.int64)
        for col, card in zip(columns, cardinalities):
            key = key * max(int(card), 1) + col
        return key
    _, inverse = np.unique(np.stack(columns, axis=1), axis=0, return_inverse=True)
    return inverse.ravel().astype(np.int64)
