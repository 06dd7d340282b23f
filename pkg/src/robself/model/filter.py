"""Content-aware reference filter.

Source pixels are re-estimated as softmax-weighted averages of their own
neighbourhood.  The weights come from dot products between each neighbour
and the aligned guide feature at the centre pixel.  Pixels whose source
gradient is strong (the importance map exceeds a threshold) use the large
``m x m`` window, the rest use the small ``n x n`` window.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from ..diffengine import Node, _edge_pad, _edge_pad_adjoint, _node, make_node
from ..errors import ContractError, DimensionError


def sobel(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel 3x3 Sobel responses with edge replication."""
    p = _edge_pad(x, 1)
    h, w = x.shape[1:]

    def s(dy, dx):
        return p[:, 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2 * s(0, -1) + s(1, -1))
    gy = (s(1, -1) + 2 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1))
    return gx, gy


def importance_map(f_source) -> np.ndarray:
    """Channel-mean gradient magnitude, ``H x W``.  Never differentiated."""
    value = f_source.value if isinstance(f_source, Node) else np.asarray(f_source)
    gx, gy = sobel(value)
    return np.sqrt(gx * gx + gy * gy).mean(axis=0)


def importance_threshold(m_imp: np.ndarray, eta: float) -> float:
    if eta <= 0:
        raise ContractError(f"eta must be positive, got {eta}")
    return float(eta * np.mean(m_imp))


def large_kernel_mask(m_imp: np.ndarray, tau: float | None) -> np.ndarray:
    """Pixels that use the large window.  Ties go to the small window."""
    if tau is None:
        return np.ones(m_imp.shape, dtype=bool)
    return m_imp > tau


def _check_sizes(m: int, n: int):
    if m % 2 == 0 or n % 2 == 0:
        raise ContractError(f"filter kernel sizes must be odd, got m={m}, n={n}")
    if m < n or n < 1:
        raise ContractError(f"need m >= n >= 1, got m={m}, n={n}")


@njit(cache=True)
def _filter_forward(fsp, fa, large, m, n):
    # fsp: padded source, H+2r x W+2r x C; fa: reference, H x W x C
    h, w, c = fa.shape
    r, rn = m // 2, n // 2
    taps = m * m
    out = np.zeros((h, w, c), dtype=fa.dtype)
    wts = np.zeros((h, w, taps), dtype=fa.dtype)
    logit = np.empty(taps)
    for y in range(h):
        for x in range(w):
            big = large[y, x]
            peak = -np.inf
            for t in range(taps):
                dy = t // m - r
                dx = t % m - r
                if not big and (abs(dy) > rn or abs(dx) > rn):
                    logit[t] = -np.inf
                    continue
                acc = 0.0
                for k in range(c):
                    acc += fsp[y + r + dy, x + r + dx, k] * fa[y, x, k]
                logit[t] = acc
                if acc > peak:
                    peak = acc
            z = 0.0
            for t in range(taps):
                if logit[t] == -np.inf:
                    logit[t] = 0.0
                else:
                    logit[t] = np.exp(logit[t] - peak)
                    z += logit[t]
            for t in range(taps):
                wt = logit[t] / z
                wts[y, x, t] = wt
                if wt == 0.0:
                    continue
                yy = y + t // m
                xx = x + t % m
                for k in range(c):
                    out[y, x, k] += wt * fsp[yy, xx, k]
    return out, wts


@njit(cache=True)
def _filter_backward(g, fsp, fa, wts, m):
    h, w, c = fa.shape
    r = m // 2
    taps = m * m
    dpad = np.zeros(fsp.shape, dtype=fsp.dtype)
    dfa = np.zeros(fa.shape, dtype=fa.dtype)
    dw = np.empty(taps)
    for y in range(h):
        for x in range(w):
            total = 0.0
            for t in range(taps):
                wt = wts[y, x, t]
                if wt == 0.0:
                    dw[t] = 0.0
                    continue
                yy = y + t // m
                xx = x + t % m
                acc = 0.0
                for k in range(c):
                    acc += g[y, x, k] * fsp[yy, xx, k]
                dw[t] = acc
                total += wt * acc
            for t in range(taps):
                wt = wts[y, x, t]
                if wt == 0.0:
                    continue
                dlogit = wt * (dw[t] - total)
                yy = y + t // m
                xx = x + t % m
                for k in range(c):
                    dpad[yy, xx, k] += wt * g[y, x, k] + dlogit * fa[y, x, k]
                    dfa[y, x, k] += dlogit * fsp[yy, xx, k]
    return dpad, dfa


def _hwc(x):
    return np.ascontiguousarray(x.transpose(1, 2, 0))


def _chw(x):
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def correlation_weights(f_source, f_aligned, large: np.ndarray, m: int, n: int) -> np.ndarray:
    """Per-pixel window weights, ``m*m x H x W`` in row-major window order."""
    _check_sizes(m, n)
    fs = np.asarray(getattr(f_source, "value", f_source))
    fa = np.asarray(getattr(f_aligned, "value", f_aligned))
    _, wts = _filter_forward(_hwc(_edge_pad(fs, m // 2)), _hwc(fa), large, m, n)
    return _chw(wts)


def reference_filter(f_source, f_aligned, m_imp: np.ndarray, tau: float | None, m: int, n: int) -> Node:
    """Reference-guided self-enhancement of ``f_source``.

    ``tau=None`` applies the ``m x m`` window at every pixel.
    """
    _check_sizes(m, n)
    f_source, f_aligned = _node(f_source), _node(f_aligned)
    fs, fa = f_source.value, f_aligned.value
    if fs.shape != fa.shape:
        raise DimensionError(f"reference_filter: source {fs.shape} vs reference {fa.shape}")
    c, h, w = fs.shape
    if m_imp.shape != (h, w):
        raise DimensionError(f"importance map {m_imp.shape} does not match features {(h, w)}")
    large = large_kernel_mask(m_imp, tau)
    r = m // 2
    fsp = _hwc(_edge_pad(fs, r))
    fa_hwc = _hwc(fa)
    out, wts = _filter_forward(fsp, fa_hwc, large, m, n)

    def backward_fn(g):
        dpad, dfa = _filter_backward(_hwc(g), fsp, fa_hwc, wts, m)
        return [_edge_pad_adjoint(_chw(dpad), r), _chw(dfa)]

    return make_node(_chw(out), [f_source, f_aligned], backward_fn, "reference_filter")
