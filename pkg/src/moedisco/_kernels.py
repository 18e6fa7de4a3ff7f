"""Hot inner loops, each in two flavours: a numba ``@njit`` kernel and a pure
numpy twin with the same signature.

The public names at the bottom of the module are bound to the numba versions
unless numba is missing or ``MOEDISCO_DISABLE_NUMBA`` is set to a truthy value
before import.  Both flavours stay importable (``nb_*`` / ``np_*``) so tests and
``benchmarks/bench_kernels.py`` can compare them directly.
"""
from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("MOEDISCO_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


# ---------------------------------------------------------------------------
# numpy twins
# ---------------------------------------------------------------------------

def np_kmeans_assign(points, centroids):
    """Nearest centroid (squared Euclidean) per point; lower index wins ties."""
    diff = points[:, None, :] - centroids[None, :, :]
    d2 = np.einsum("nkd,nkd->nk", diff, diff)
    labels = np.argmin(d2, axis=1)
    return labels.astype(np.int64), d2[np.arange(len(points)), labels]


def np_topk_route(logits, k):
    """Top-k expert indices per row plus softmax weights renormalized over them."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    sel = np.take_along_axis(logits, order, axis=1)
    z = np.exp(sel - sel[:, :1])
    return order.astype(np.int64), z / z.sum(axis=1, keepdims=True)


def np_embedding_backward(idx, grad_out, n_rows):
    out = np.zeros((n_rows, grad_out.shape[1]), dtype=grad_out.dtype)
    np.add.at(out, idx, grad_out)
    return out


def np_mean_pool(table, tokens, offsets):
    """Mean of ``table`` rows over each segment ``tokens[offsets[i]:offsets[i+1]]``."""
    lengths = np.diff(offsets)
    sums = np.add.reduceat(table[tokens], offsets[:-1], axis=0)
    return sums / lengths[:, None]


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def np_gelu(x):
    """tanh-approximated GELU of a flat array and its derivative."""
    x3 = x * x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x3))
    out = 0.5 * x * (1.0 + t)
    deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * x * x)
    return out, deriv


def np_softmax_xent(logits, targets):
    """Per-row negative log-likelihood and d(nll)/d(logits)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(len(targets))
    nll = np.log(denom[:, 0]) - shifted[rows, targets]
    dlogits = ez / denom
    dlogits[rows, targets] -= 1.0
    return nll, dlogits


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def nb_kmeans_assign(points, centroids):
        n, d = points.shape
        k = centroids.shape[0]
        labels = np.empty(n, dtype=np.int64)
        best = np.empty(n, dtype=points.dtype)
        for i in range(n):
            bi = 0
            bd = np.inf
            for j in range(k):
                acc = 0.0
                for c in range(d):
                    t = points[i, c] - centroids[j, c]
                    acc += t * t
                if acc < bd:
                    bd = acc
                    bi = j
            labels[i] = bi
            best[i] = bd
        return labels, best

    @njit(cache=True)
    def nb_topk_route(logits, k):
        n, e = logits.shape
        idx = np.empty((n, k), dtype=np.int64)
        w = np.empty((n, k), dtype=logits.dtype)
        taken = np.zeros(e, dtype=np.bool_)
        for i in range(n):
            taken[:] = False
            for s in range(k):
                bj = -1
                bv = -np.inf
                for j in range(e):
                    if not taken[j] and (bj < 0 or logits[i, j] > bv):
                        bv = logits[i, j]
                        bj = j
                taken[bj] = True
                idx[i, s] = bj
            top = logits[i, idx[i, 0]]
            tot = 0.0
            for s in range(k):
                w[i, s] = np.exp(logits[i, idx[i, s]] - top)
                tot += w[i, s]
            for s in range(k):
                w[i, s] /= tot
        return idx, w

    @njit(cache=True)
    def nb_embedding_backward(idx, grad_out, n_rows):
        d = grad_out.shape[1]
        out = np.zeros((n_rows, d), dtype=grad_out.dtype)
        for i in range(idx.shape[0]):
            r = idx[i]
            for c in range(d):
                out[r, c] += grad_out[i, c]
        return out

    @njit(cache=True)
    def nb_mean_pool(table, tokens, offsets):
        m = offsets.shape[0] - 1
        d = table.shape[1]
        out = np.zeros((m, d), dtype=table.dtype)
        for s in range(m):
            lo = offsets[s]
            hi = offsets[s + 1]
            for t in range(lo, hi):
                row = tokens[t]
                for c in range(d):
                    out[s, c] += table[row, c]
            for c in range(d):
                out[s, c] /= hi - lo
        return out

    @njit(cache=True)
    def nb_gelu(x):
        out = np.empty_like(x)
        deriv = np.empty_like(x)
        for i in range(x.shape[0]):
            v = x[i]
            # tanh via exp: scalar libm tanh is several times slower here
            t = 1.0 - 2.0 / (np.exp(2.0 * _GELU_C * (v + 0.044715 * v * v * v)) + 1.0)
            out[i] = 0.5 * v * (1.0 + t)
            deriv[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * v * v)
        return out, deriv

    @njit(cache=True)
    def nb_softmax_xent(logits, targets):
        n, v = logits.shape
        nll = np.empty(n, dtype=logits.dtype)
        dlogits = np.empty_like(logits)
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            tot = 0.0
            for j in range(v):
                ez = np.exp(logits[i, j] - mx)
                dlogits[i, j] = ez
                tot += ez
            for j in range(v):
                dlogits[i, j] /= tot
            nll[i] = np.log(tot) - (logits[i, targets[i]] - mx)
            dlogits[i, targets[i]] -= 1.0
        return nll, dlogits


if USE_NUMBA:
    kmeans_assign = nb_kmeans_assign
    topk_route = nb_topk_route
    embedding_backward = nb_embedding_backward
    mean_pool = nb_mean_pool
    softmax_xent = nb_softmax_xent
    gelu = nb_gelu
else:
    kmeans_assign = np_kmeans_assign
    topk_route = np_topk_route
    embedding_backward = np_embedding_backward
    mean_pool = np_mean_pool
    softmax_xent = np_softmax_xent
    gelu = np_gelu

BACKEND = "numba" if USE_NUMBA else "numpy"
