"""Hot inner loops, each with a numba and a pure-numpy implementation.

The backend is chosen once at import time. Set ``ADLLAB_DISABLE_NUMBA=1``
to force the numpy path (or when numba is not installed). Both paths
perform the same floating-point operations in the same order, so results
are bit-identical; ``tests/test_kernels.py`` checks this.
"""
from __future__ import annotations

import os
from collections import deque

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

_DISABLED = os.environ.get("ADLLAB_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}
BACKEND = "numpy" if (_DISABLED or numba is None) else "numba"


# ---------------------------------------------------------------------------
# numpy implementations


def _im2col_numpy(xp, k, stride, ho, wo):
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, ky, kx, :] = xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :]
    return cols


def _col2im_numpy(dcols, hp, wp, stride):
    n, ho, wo, k, _, c = dcols.shape
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :] += dcols[:, :, :, ky, kx, :]
    return dxp


def _maxpool_numpy(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)  # first max wins ties
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def _maxpool_backward_numpy(g, arg, h, w):
    n, ho, wo, c = g.shape
    dwin = np.zeros((n, ho, wo, c, 4), dtype=g.dtype)
    np.put_along_axis(dwin, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    return dwin.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


_NEIGHBORS8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def _label_numpy(fg):
    h, w = fg.shape
    labels = np.zeros((h, w), dtype=np.int64)
    current = 0
    for y in range(h):
        for x in range(w):
            if not fg[y, x] or labels[y, x]:
                continue
            current += 1
            labels[y, x] = current
            queue = deque([(y, x)])
            while queue:
                cy, cx = queue.popleft()
                for dy, dx in _NEIGHBORS8:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = current
                        queue.append((ny, nx))
    return labels, current


# ---------------------------------------------------------------------------
# numba implementations

if BACKEND == "numba":

    @numba.njit(cache=True)
    def _im2col_numba(xp, k, stride, ho, wo):
        n, _, _, c = xp.shape
        cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ky in range(k):
                        for kx in range(k):
                            y = i * stride + ky
                            x = j * stride + kx
                            for ch in range(c):
                                cols[b, i, j, ky, kx, ch] = xp[b, y, x, ch]
        return cols

    @numba.njit(cache=True)
    def _col2im_numba(dcols, hp, wp, stride):
        n, ho, wo, k, _, c = dcols.shape
        dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
        # ky/kx outermost so accumulation order matches the numpy path
        for ky in range(k):
            for kx in range(k):
                for b in range(n):
                    for i in range(ho):
                        y = i * stride + ky
                        for j in range(wo):
                            x = j * stride + kx
                            for ch in range(c):
                                dxp[b, y, x, ch] += dcols[b, i, j, ky, kx, ch]
        return dxp

    @numba.njit(cache=True)
    def _maxpool_numba(x):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        out = np.empty((n, ho, wo, c), dtype=x.dtype)
        arg = np.empty((n, ho, wo, c), dtype=np.int8)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        best = x[b, 2 * i, 2 * j, ch]
                        besti = 0
                        for q in range(1, 4):
                            v = x[b, 2 * i + q // 2, 2 * j + q % 2, ch]
                            if v > best:
                                best = v
                                besti = q
                        out[b, i, j, ch] = best
                        arg[b, i, j, ch] = besti
        return out, arg

    @numba.njit(cache=True)
    def _maxpool_backward_numba(g, arg, h, w):
        n, ho, wo, c = g.shape
        dx = np.zeros((n, h, w, c), dtype=g.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        q = arg[b, i, j, ch]
                        dx[b, 2 * i + q // 2, 2 * j + q % 2, ch] = g[b, i, j, ch]
        return dx

    @numba.njit(cache=True)
    def _label_numba(fg):
        h, w = fg.shape
        labels = np.zeros((h, w), dtype=np.int64)
        qy = np.empty(h * w, dtype=np.int64)
        qx = np.empty(h * w, dtype=np.int64)
        current = 0
        for y in range(h):
            for x in range(w):
                if not fg[y, x] or labels[y, x] != 0:
                    continue
                current += 1
                labels[y, x] = current
                head = 0
                tail = 1
                qy[0] = y
                qx[0] = x
                while head < tail:
                    cy = qy[head]
                    cx = qx[head]
                    head += 1
                    for dy in range(-1, 2):
                        for dx in range(-1, 2):
                            if dy == 0 and dx == 0:
                                continue
                            ny = cy + dy
                            nx = cx + dx
                            if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] and labels[ny, nx] == 0:
                                labels[ny, nx] = current
                                qy[tail] = ny
                                qx[tail] = nx
                                tail += 1
        return labels, current


# ---------------------------------------------------------------------------
# public dispatch


def im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather k x k patches of a padded NHWC array into shape (N, Ho, Wo, k, k, C)."""
    xp = np.ascontiguousarray(xp)
    if BACKEND == "numba":
        return _im2col_numba(xp, k, stride, ho, wo)
    return _im2col_numpy(xp, k, stride, ho, wo)


def col2im(dcols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Scatter-add patch gradients back onto the padded input grid."""
    dcols = np.ascontiguousarray(dcols)
    if BACKEND == "numba":
        return _col2im_numba(dcols, hp, wp, stride)
    return _col2im_numpy(dcols, hp, wp, stride)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pool; also returns the winning window slot (0..3, first max on ties)."""
    x = np.ascontiguousarray(x)
    if BACKEND == "numba":
        return _maxpool_numba(x)
    return _maxpool_numpy(x)


def maxpool2x2_backward(g: np.ndarray, arg: np.ndarray, h: int, w: int) -> np.ndarray:
    g = np.ascontiguousarray(g)
    if BACKEND == "numba":
        return _maxpool_backward_numba(g, np.ascontiguousarray(arg), h, w)
    return _maxpool_backward_numpy(g, arg, h, w)


def label_components(fg: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labels (1..n, raster order of first pixel) of a boolean mask."""
    fg = np.ascontiguousarray(fg, dtype=np.bool_)
    if BACKEND == "numba":
        labels, n = _label_numba(fg)
        return labels, int(n)
    return _label_numpy(fg)
