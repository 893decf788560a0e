"""Hot scoring kernels.

Support vectors and inputs are passed in CSR layout (``ptr``, ``idx``,
``val``). Two implementations exist with identical signatures: a numba one
compiled with ``nogil=True`` so worker threads can score concurrently, and
a pure-numpy fallback. Set ``ARGPIPE_DISABLE_NUMBA=1`` to force the
fallback.

Within one backend, ``score_pairs`` on (claim, evidence) rows gives the
same bits as ``score_rows`` on the concatenated row.
"""

import os

import numpy as np

_DISABLE = os.environ.get("ARGPIPE_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("numba disabled by ARGPIPE_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy fallback


def _workspace(sv_idx):
    return np.zeros(int(sv_idx.max()) + 1 if sv_idx.shape[0] else 0)


def _np_row_score(sv_ptr, sv_idx, sv_val, alpha, bias, x_idx, x_val, ws):
    if x_idx.shape[0] == 0 or sv_idx.shape[0] == 0:
        return 0.0 + bias
    keep = x_idx < ws.shape[0]
    ws[x_idx[keep]] = x_val[keep]
    # reduceat needs a valid start for empty trailing rows
    prod = np.append(sv_val * ws[sv_idx], 0.0)
    ws[x_idx[keep]] = 0.0
    starts = sv_ptr[:-1]
    dots = np.add.reduceat(prod, starts)
    dots[sv_ptr[1:] == starts] = 0.0
    return float(np.dot(alpha, dots)) + bias


def numpy_score_rows(sv_ptr, sv_idx, sv_val, alpha, bias, x_ptr, x_idx, x_val, out):
    ws = _workspace(sv_idx)
    for r in range(out.shape[0]):
        s, e = x_ptr[r], x_ptr[r + 1]
        out[r] = _np_row_score(sv_ptr, sv_idx, sv_val, alpha, bias, x_idx[s:e], x_val[s:e], ws)
    return out


def numpy_score_pairs(sv_ptr, sv_idx, sv_val, alpha, bias,
                      c_ptr, c_idx, c_val, e_ptr, e_idx, e_val, ci, ei, shift, out):
    ws = _workspace(sv_idx)
    for r in range(out.shape[0]):
        a, b = ci[r], ei[r]
        xi = np.concatenate((c_idx[c_ptr[a]:c_ptr[a + 1]], e_idx[e_ptr[b]:e_ptr[b + 1]] + shift))
        xv = np.concatenate((c_val[c_ptr[a]:c_ptr[a + 1]], e_val[e_ptr[b]:e_ptr[b + 1]]))
        out[r] = _np_row_score(sv_ptr, sv_idx, sv_val, alpha, bias, xi, xv, ws)
    return out


# --------------------------------------------------------------------------
# numba


if HAVE_NUMBA:
    # Each input row is scattered into a dense workspace so a support vector
    # costs one gather per stored entry. Inputs never store zeros, so skipping
    # zero slots adds exactly the products a sorted merge would.

    @njit(nogil=True, cache=True)
    def _sv_sum(sv_ptr, sv_idx, sv_val, alpha, ws):
        acc = 0.0
        for i in range(alpha.shape[0]):
            d = 0.0
            for p in range(sv_ptr[i], sv_ptr[i + 1]):
                v = ws[sv_idx[p]]
                if v != 0.0:
                    d += sv_val[p] * v
            acc += alpha[i] * d
        return acc

    @njit(nogil=True, cache=True)
    def _scatter(ws, idx, val, start, end, offset, fill):
        n = ws.shape[0]
        for q in range(start, end):
            j = idx[q] + offset
            if j < n:
                ws[j] = val[q] if fill else 0.0

    @njit(nogil=True, cache=True)
    def numba_score_rows(sv_ptr, sv_idx, sv_val, alpha, bias, x_ptr, x_idx, x_val, out):
        dim = sv_idx.max() + 1 if sv_idx.shape[0] else 0
        ws = np.zeros(dim)
        for r in range(out.shape[0]):
            _scatter(ws, x_idx, x_val, x_ptr[r], x_ptr[r + 1], 0, True)
            out[r] = _sv_sum(sv_ptr, sv_idx, sv_val, alpha, ws) + bias
            _scatter(ws, x_idx, x_val, x_ptr[r], x_ptr[r + 1], 0, False)
        return out

    @njit(nogil=True, cache=True)
    def numba_score_pairs(sv_ptr, sv_idx, sv_val, alpha, bias,
                          c_ptr, c_idx, c_val, e_ptr, e_idx, e_val, ci, ei, shift, out):
        dim = sv_idx.max() + 1 if sv_idx.shape[0] else 0
        ws = np.zeros(dim)
        for r in range(out.shape[0]):
            a = ci[r]
            b = ei[r]
            # claim segment, then evidence segment shifted past the vocabulary
            _scatter(ws, c_idx, c_val, c_ptr[a], c_ptr[a + 1], 0, True)
            _scatter(ws, e_idx, e_val, e_ptr[b], e_ptr[b + 1], shift, True)
            out[r] = _sv_sum(sv_ptr, sv_idx, sv_val, alpha, ws) + bias
            _scatter(ws, c_idx, c_val, c_ptr[a], c_ptr[a + 1], 0, False)
            _scatter(ws, e_idx, e_val, e_ptr[b], e_ptr[b + 1], shift, False)
        return out

    BACKEND = "numba"
    score_rows = numba_score_rows
    score_pairs = numba_score_pairs
else:
    numba_score_rows = None
    numba_score_pairs = None
    BACKEND = "numpy"
    score_rows = numpy_score_rows
    score_pairs = numpy_score_pairs


def implementations():
    """Map backend name to ``(score_rows, score_pairs)`` for every available backend."""
    impls = {"numpy": (numpy_score_rows, numpy_score_pairs)}
    if HAVE_NUMBA:
        impls["numba"] = (numba_score_rows, numba_score_pairs)
    return impls
