"""Reverse-mode differentiation over a small, closed set of image operators.

Values are plain numpy arrays laid out as ``C x H x W``.  A :class:`Node`
wraps a value together with the parents it was computed from and a backward
rule that maps the output gradient to one gradient per parent.  Graphs are
built eagerly by calling the operator functions in this module and are
differentiated with :func:`grad` or :func:`backward`.

Boundary handling is clamp-to-edge everywhere: convolution pads by edge
replication and all bilinear sampling clamps coordinates into the image.
With that single convention a deformable convolution with zero offsets is
bitwise identical to the plain convolution.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_DTYPES = {"f64": np.float64, "f32": np.float32}
_dtype = np.float64


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the numeric type used for new tensors."""
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


def as_tensor(data) -> np.ndarray:
    """Convert to a contiguous array of the active dtype, dropping a batch of 1."""
    arr = np.ascontiguousarray(data, dtype=_dtype)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DimensionError(f"only a leading batch of 1 is supported, got {arr.shape}")
        arr = arr[0]
    if arr.ndim > 4:
        raise DimensionError(f"tensor order {arr.ndim} exceeds 4")
    return arr


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "op", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, op="leaf", name=None):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter(Node):
    """A trainable leaf with a dotted name such as ``translator.decoder.2.weight``."""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=_dtype), requires_grad=True, op="parameter", name=name)


def constant(value) -> Node:
    return Node(np.ascontiguousarray(value, dtype=_dtype))


def _node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    return value


def make_node(value, parents: Sequence[Node], backward_fn: Callable, op: str) -> Node:
    """Record an operator result.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    Nothing is recorded when no parent requires a gradient.
    """
    _check_finite(value, op)
    if any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, requires_grad=True, op=op)
    return Node(value, op=op)


# ---------------------------------------------------------------------------
# padding helpers


def _edge_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="edge")


def _edge_pad_adjoint(g: np.ndarray, pad: int) -> np.ndarray:
    """Fold the gradient of an edge-padded array back onto the unpadded one."""
    if pad == 0:
        return g
    g = g.copy()
    g[:, pad, :] += g[:, :pad, :].sum(axis=1)
    g[:, -pad - 1, :] += g[:, -pad:, :].sum(axis=1)
    g = g[:, pad:-pad, :]
    g[:, :, pad] += g[:, :, :pad].sum(axis=2)
    g[:, :, -pad - 1] += g[:, :, -pad:].sum(axis=2)
    return np.ascontiguousarray(g[:, :, pad:-pad])


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    xp = _edge_pad(x, padding)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return cols, ho, wo, xp.shape


def _col2im(dcols: np.ndarray, c: int, k: int, ho: int, wo: int, stride: int, padding: int, padded_shape):
    d = dcols.reshape(c, k, k, ho, wo)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for a in range(k):
        for b in range(k):
            dxp[:, a : a + stride * ho : stride, b : b + stride * wo : stride] += d[:, a, b]
    return _edge_pad_adjoint(dxp, padding)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int | None = None) -> Node:
    """2-D cross-correlation with edge-replicated padding.

    ``padding`` defaults to ``(k - 1) // 2``.
    """
    x, weight = _node(x), _node(weight)
    xv, wv = x.value, weight.value
    if xv.ndim != 3 or wv.ndim != 4:
        raise DimensionError(f"conv2d expects C x H x W input and 4-D weight, got {xv.shape}, {wv.shape}")
    c_out, c_in, k, k2 = wv.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if xv.shape[0] != c_in:
        raise DimensionError(f"conv2d input has {xv.shape[0]} channels, weight expects {c_in}")
    if padding is None:
        padding = (k - 1) // 2
    if min(xv.shape[1:]) + 2 * padding < k:
        raise DimensionError(f"conv2d input {xv.shape} smaller than kernel {k}")

    cols, ho, wo, padded_shape = _im2col(xv, k, stride, padding)
    w2 = wv.reshape(c_out, -1)
    out = w2 @ cols
    parents = [x, weight]
    if bias is not None:
        bias = _node(bias)
        out += bias.value[:, None]
        parents.append(bias)
    out = out.reshape(c_out, ho, wo)

    def backward_fn(g):
        g2 = g.reshape(c_out, -1)
        dx = None
        if x.requires_grad:
            dx = _col2im(w2.T @ g2, c_in, k, ho, wo, stride, padding, padded_shape)
        dw = (g2 @ cols.T).reshape(wv.shape) if weight.requires_grad else None
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=1) if bias.requires_grad else None)
        return grads

    return make_node(out, parents, backward_fn, "conv2d")


# ---------------------------------------------------------------------------
# resampling


def avg_pool2d(x, factor: int) -> Node:
    x = _node(x)
    c, h, w = x.value.shape
    if h % factor or w % factor:
        raise DimensionError(f"avg_pool2d: extents {h}x{w} not divisible by {factor}")
    out = x.value.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))

    def backward_fn(g):
        up = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2)
        return [up / (factor * factor)]

    return make_node(out, [x], backward_fn, "avg_pool2d")


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D linear interpolation matrix with half-pixel centers."""
    if n_in < 1:
        raise DimensionError(f"bilinear resize needs at least 1 sample per axis, got {n_in}")
    if n_in == 1:
        return np.ones((n_out, 1), dtype=_dtype)
    dst = np.arange(n_out, dtype=np.float64)
    src = np.clip((dst + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 2)
    frac = src - i0
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    mat[rows, i0] += 1.0 - frac
    mat[rows, i0 + 1] += frac
    return mat.astype(_dtype)


def bilinear_resize(x, out_h: int, out_w: int):
    """Bilinear resize.  Arrays in give arrays out; nodes give differentiable nodes."""
    is_node = isinstance(x, Node)
    xv = x.value if is_node else as_tensor(x)
    if xv.ndim != 3:
        raise DimensionError(f"bilinear_resize expects C x H x W, got {xv.shape}")
    _, h, w = xv.shape
    ry = resize_matrix(h, out_h)
    rx = resize_matrix(w, out_w)
    out = np.matmul(np.matmul(ry, xv), rx.T)
    if not is_node:
        return out

    def backward_fn(g):
        return [np.matmul(np.matmul(ry.T, g), rx)]

    return make_node(out, [x], backward_fn, "bilinear_resize")


class _BilinearSampler:
    """Clamp-to-edge bilinear sampling of a ``C x H x W`` image at arbitrary points."""

    def __init__(self, img: np.ndarray, x: np.ndarray, y: np.ndarray):
        c, h, w = img.shape
        if h < 2 or w < 2:
            raise DimensionError(f"bilinear sampling needs extents >= 2, got {h}x{w}")
        self.shape = img.shape
        xc = np.clip(x, 0, w - 1)
        yc = np.clip(y, 0, h - 1)
        x0 = np.minimum(np.floor(xc), w - 2)
        y0 = np.minimum(np.floor(yc), h - 2)
        self.wx = xc - x0
        self.wy = yc - y0
        x0 = x0.astype(np.intp)
        y0 = y0.astype(np.intp)
        # clamped coordinates do not move with the offset
        self.mask_x = (x >= 0) & (x <= w - 1)
        self.mask_y = (y >= 0) & (y <= h - 1)
        i00 = y0 * w + x0
        self.idx = (i00, i00 + 1, i00 + w, i00 + w + 1)
        flat = img.reshape(c, h * w)
        self.v = tuple(flat[:, i] for i in self.idx)

    def sample(self) -> np.ndarray:
        v00, v01, v10, v11 = self.v
        wx, wy = self.wx, self.wy
        return (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)

    def grad_image(self, g: np.ndarray) -> np.ndarray:
        c, h, w = self.shape
        wx, wy = self.wx, self.wy
        weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
        chan = (np.arange(c) * (h * w))[:, None]
        index = np.concatenate([np.broadcast_to(chan + i, g.shape).ravel() for i in self.idx])
        vals = np.concatenate([(g * wt).ravel() for wt in weights])
        return np.bincount(index, weights=vals, minlength=c * h * w).reshape(self.shape).astype(g.dtype)

    def grad_coords(self, g: np.ndarray):
        v00, v01, v10, v11 = self.v
        wx, wy = self.wx, self.wy
        dwx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        dwy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        gx = (g * dwx).sum(axis=0) * self.mask_x
        gy = (g * dwy).sum(axis=0) * self.mask_y
        return gx, gy


def grid_sample(x, offsets) -> Node:
    """Warp ``x`` by per-pixel displacements: ``out(c,y,x) = x(c, y+dy, x+dx)``.

    ``offsets`` is ``2 x H x W`` holding (dx, dy) in pixels.
    """
    x, offsets = _node(x), _node(offsets)
    xv, ov = x.value, offsets.value
    if ov.ndim != 3 or ov.shape[0] != 2:
        raise DimensionError(f"grid_sample offsets must be 2 x H x W, got {ov.shape}")
    c, h, w = xv.shape
    if ov.shape[1:] != (h, w):
        raise DimensionError(f"grid_sample offsets {ov.shape[1:]} do not match input {(h, w)}")
    yy, xx = np.meshgrid(np.arange(h, dtype=xv.dtype), np.arange(w, dtype=xv.dtype), indexing="ij")
    sampler = _BilinearSampler(xv, (xx + ov[0]).ravel(), (yy + ov[1]).ravel())
    out = sampler.sample().reshape(c, h, w)

    def backward_fn(g):
        g2 = g.reshape(c, -1)
        dx = sampler.grad_image(g2) if x.requires_grad else None
        doff = None
        if offsets.requires_grad:
            gx, gy = sampler.grad_coords(g2)
            doff = np.stack([gx.reshape(h, w), gy.reshape(h, w)])
        return [dx, doff]

    return make_node(out, [x, offsets], backward_fn, "grid_sample")


def deform_conv2d(x, weight, offsets) -> Node:
    """Deformable convolution without modulation, stride 1, same-size output.

    Tap ``t`` (row-major over the ``k x k`` kernel) samples the input at
    ``p + p_t + (offsets[2t], offsets[2t+1])``.
    """
    x, weight, offsets = _node(x), _node(weight), _node(offsets)
    xv, wv, ov = x.value, weight.value, offsets.value
    c_out, c_in, k, _ = wv.shape
    c, h, w = xv.shape
    if c != c_in:
        raise DimensionError(f"deform_conv2d input has {c} channels, weight expects {c_in}")
    if ov.ndim != 3 or ov.shape[0] != 2 * k * k:
        raise DimensionError(f"deform_conv2d offsets need {2 * k * k} channels, got {ov.shape}")
    if ov.shape[1:] != (h, w):
        raise DimensionError(f"deform_conv2d offsets {ov.shape[1:]} do not match input {(h, w)}")
    half = (k - 1) // 2
    yy, xx = np.meshgrid(np.arange(h, dtype=xv.dtype), np.arange(w, dtype=xv.dtype), indexing="ij")
    samplers = []
    cols = np.empty((c, k * k, h * w), dtype=xv.dtype)
    for t in range(k * k):
        a, b = divmod(t, k)
        px = (xx + (b - half) + ov[2 * t]).ravel()
        py = (yy + (a - half) + ov[2 * t + 1]).ravel()
        s = _BilinearSampler(xv, px, py)
        samplers.append(s)
        cols[:, t] = s.sample()
    cols = cols.reshape(c * k * k, h * w)
    w2 = wv.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, h, w)

    def backward_fn(g):
        g2 = g.reshape(c_out, -1)
        dw = (g2 @ cols.T).reshape(wv.shape) if weight.requires_grad else None
        dx = doff = None
        if x.requires_grad or offsets.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k * k, h * w)
            if x.requires_grad:
                dx = np.zeros_like(xv)
            if offsets.requires_grad:
                doff = np.zeros_like(ov)
            for t, s in enumerate(samplers):
                gt = dcols[:, t]
                if dx is not None:
                    dx += s.grad_image(gt)
                if doff is not None:
                    gx, gy = s.grad_coords(gt)
                    doff[2 * t] = gx.reshape(h, w)
                    doff[2 * t + 1] = gy.reshape(h, w)
        return [dx, dw, doff]

    return make_node(out, [x, weight, offsets], backward_fn, "deform_conv2d")


# ---------------------------------------------------------------------------
# elementwise and structural


def leaky_relu(x, slope: float = 0.1) -> Node:
    x = _node(x)
    xv = x.value
    pos = xv > 0
    out = np.where(pos, xv, slope * xv)

    def backward_fn(g):
        return [np.where(pos, g, slope * g)]

    return make_node(out, [x], backward_fn, "leaky_relu")


def concat_channels(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.value.shape[1:] != b.value.shape[1:]:
        raise DimensionError(f"concat_channels: spatial mismatch {a.value.shape} vs {b.value.shape}")
    ca = a.value.shape[0]
    out = np.concatenate([a.value, b.value], axis=0)

    def backward_fn(g):
        return [g[:ca], g[ca:]]

    return make_node(out, [a, b], backward_fn, "concat_channels")


def split_channels(x, index: int) -> tuple[Node, Node]:
    x = _node(x)
    xv = x.value
    n = xv.shape[0]

    def first_bw(g):
        full = np.zeros_like(xv)
        full[:index] = g
        return [full]

    def second_bw(g):
        full = np.zeros_like(xv)
        full[index:] = g
        return [full]

    head = make_node(xv[:index].copy(), [x], first_bw, "split_channels")
    tail = make_node(xv[index:n].copy(), [x], second_bw, "split_channels")
    return head, tail


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")
    return make_node(a.value + b.value, [a, b], lambda g: [g, g], "add")


def scale(x, factor: float) -> Node:
    x = _node(x)
    return make_node(x.value * factor, [x], lambda g: [g * factor], "scale")


def sum_all(x) -> Node:
    x = _node(x)
    xv = x.value
    return make_node(np.asarray(xv.sum()), [x], lambda g: [np.full_like(xv, g)], "sum")


def weighted_sum(x, weights: np.ndarray) -> Node:
    """``sum(x * weights)`` for a fixed weight array; a smooth scalar probe."""
    x = _node(x)
    weights = np.asarray(weights, dtype=x.value.dtype)
    if weights.shape != x.value.shape:
        raise DimensionError(f"weighted_sum: shape mismatch {x.value.shape} vs {weights.shape}")
    return make_node(np.asarray((x.value * weights).sum()), [x], lambda g: [g * weights], "weighted_sum")


def l1_mean(a, b) -> Node:
    """Mean absolute difference between a node and a fixed target."""
    a = _node(a)
    bv = b.value if isinstance(b, Node) else np.asarray(b, dtype=a.value.dtype)
    if a.value.shape != bv.shape:
        raise DimensionError(f"l1_mean: shape mismatch {a.value.shape} vs {bv.shape}")
    diff = a.value - bv
    n = diff.size

    def backward_fn(g):
        return [np.sign(diff) * (g / n)]

    return make_node(np.asarray(np.abs(diff).mean()), [a], backward_fn, "l1_mean")


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in visited:
                continue
            visited.add(id(node))
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def grad(loss: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each node in ``wrt``.

    Nodes the loss does not depend on get zeros.
    """
    if loss.value.size != 1:
        raise ContractError(f"gradient requires a scalar loss, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(_topological_order(loss)):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    return [grads.get(id(n), np.zeros_like(n.value)) for n in wrt]


def backward(loss: Node, params: Iterable[Parameter]) -> dict[str, np.ndarray]:
    """Map each parameter name to its gradient."""
    params = list(params)
    return {p.name: g for p, g in zip(params, grad(loss, params))}


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            flag = "ok  " if err < self.tolerance else "FAIL"
            out.append(f"{flag} {name:<44s} max_rel_err={err:.3e} ({self.checked[name]} entries)")
        return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    builder: Callable[[], Node],
    params: Sequence[Node],
    tolerance: float = 1e-3,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    refine: int = 2,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``builder`` rebuilds the scalar graph from the current values of
    ``params``.  At most ``max_entries`` randomly chosen entries per
    parameter are perturbed.  Errors are reported, never raised.

    An entry that misses ``tolerance`` is retried up to ``refine`` times
    with the step divided by 10.  A kink of the loss (L1, leaky ReLU,
    bilinear cell boundaries) inside ``[x - h, x + h]`` spoils the central
    difference; it drops out at a smaller step, a wrong gradient does not.
    """
    report = GradCheckReport(tolerance)
    rng = np.random.default_rng(seed)
    try:
        analytic = grad(builder(), params)
    except Exception:  # noqa: BLE001 - the report carries the failure
        for i, p in enumerate(params):
            name = p.name or f"param{i}"
            report.errors[name] = float("inf")
            report.checked[name] = 0
        return report
    for i, (p, ga) in enumerate(zip(params, analytic)):
        name = p.name or f"param{i}"
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for j in idx:
            orig = flat[j]
            err = float("inf")
            step = h
            try:
                for _ in range(refine + 1):
                    flat[j] = orig + step
                    up = float(builder().value)
                    flat[j] = orig - step
                    down = float(builder().value)
                    err = min(err, relative_error(float(gflat[j]), (up - down) / (2 * step), floor))
                    if err < tolerance:
                        break
                    step /= 10
            except Exception:  # noqa: BLE001
                err = float("inf")
            finally:
                flat[j] = orig
            worst = max(worst, err)
            if worst == float("inf"):
                break
        report.errors[name] = worst
        report.checked[name] = len(idx)
    return report
