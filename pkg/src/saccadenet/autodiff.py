"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the detector and its losses need are provided. Every op
has an exact shape contract; there is no implicit broadcasting. Ops that
accept a ``[C, H, W]`` map also accept a batched ``[N, C, H, W]`` map.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


class Tensor:
    """A float64 array that remembers how it was produced.

    Leaves created with ``requires_grad=True`` receive gradients in ``grad``
    when :meth:`backward` is called on a scalar reachable from them.
    Gradients accumulate across calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Optional[BackwardFn] = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def record(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op; the graph is kept only if needed."""
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# kink monitoring (used by the finite-difference checker)

_kink_log: Optional[list[np.ndarray]] = None


class kink_monitor:
    """Context manager collecting the sign pattern of every relu input.

    Finite differences are meaningless across a relu kink, so the gradient
    checker compares patterns between the perturbed evaluations and skips
    elements whose stencil crosses one.
    """

    def __enter__(self) -> list[np.ndarray]:
        global _kink_log
        self._prev = _kink_log
        _kink_log = []
        return _kink_log

    def __exit__(self, *exc) -> None:
        global _kink_log
        _kink_log = self._prev


# --------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return record(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def add_scalars(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Weighted sum of scalar tensors."""
    weights = [float(w) for w in weights]
    for t in terms:
        if t.data.size != 1:
            raise ShapeError(f"add_scalars: expected scalars, got shape {t.shape}")
    total = np.asarray(float(np.sum([w * float(t.data) for t, w in zip(terms, weights)])))
    return record(total, terms, lambda g: [np.full(t.shape, float(g) * w) for t, w in zip(terms, weights)], "add_scalars")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask.copy())
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: np.split(g, splits, axis=ax),
        "concat",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer: ``x [P, D] @ weight[O, D].T + bias[O] -> [P, O]``."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return record(xd @ wd.T + bias.data, (x, weight, bias), backward, "linear")


# --------------------------------------------------------------------------
# convolution family


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a [C,H,W] or [N,C,H,W] map, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` (``[C_out, C_in, k, k]``)."""
    xb, squeeze = _batched(x.data)
    n, c, h, w = xb.shape
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be [C_out, C_in, k, k], got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if c_in != c:
        raise ShapeError(f"conv2d: weight expects {c_in} input channels but input has {c} (input shape {x.shape})")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if k not in (1, 3) or stride not in (1, 2) or pad not in (0, 1):
        raise ValueError(f"conv2d: unsupported k={k}, stride={stride}, pad={pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output would be empty for input {x.shape}")

    # channel-last im2col: cols[n, y, x, i, j, c] = xpad[n, c, s*y + i, s*x + j]
    hp, wp = h + 2 * pad, w + 2 * pad
    xn = np.zeros((n, hp, wp, c))
    xn[:, pad : pad + h, pad : pad + w, :] = xb.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xn[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, k * k * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gb = g[None] if squeeze else g
        gmat = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gw = (gmat.T @ cols).reshape(c_out, k, k, c).transpose(0, 3, 1, 2)
        gbias = gb.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, k, k, c)
            gxn = np.zeros((n, hp, wp, c))
            for i in range(k):
                for j in range(k):
                    gxn[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gxn[:, pad : pad + h, pad : pad + w, :].transpose(0, 3, 1, 2))
            if squeeze:
                gx = gx[0]
        return gx, np.ascontiguousarray(gw), gbias

    return record(out[0] if squeeze else out, (x, weight, bias), backward, "conv2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    xb, squeeze = _batched(x.data)
    out = xb.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        gb = g[None] if squeeze else g
        n, c, h2, w2 = gb.shape
        gx = gb.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        return (gx[0] if squeeze else gx,)

    return record(out[0] if squeeze else out, (x,), backward, "upsample_nearest2x")


def maxpool3x3_same(x) -> Tensor:
    """3x3 stride-1 max filter with -inf borders. Inference only (no gradient)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    xb, squeeze = _batched(data)
    xp = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    out = sliding_window_view(xp, (3, 3), axis=(2, 3)).max(axis=(4, 5))
    return Tensor(out[0] if squeeze else out)


# --------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample(features: Tensor, points, batch_index=None) -> Tensor:
    """Sample ``features`` at continuous ``(x, y)`` points.

    ``features`` is ``[C, H, W]``, or ``[N, C, H, W]`` together with one
    ``batch_index`` per point. Coordinates are clamped into the map. The
    result is ``[P, C]``; gradient flows to ``features`` only.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    fb, squeeze = _batched(features.data)
    n, c, h, w = fb.shape
    if squeeze:
        bidx = np.zeros(len(pts), dtype=np.int64)
    else:
        if batch_index is None:
            raise ShapeError("bilinear_sample: batched features need a batch_index per point")
        bidx = np.asarray(batch_index, dtype=np.int64).reshape(-1)
        if len(bidx) != len(pts):
            raise ShapeError(f"bilinear_sample: {len(pts)} points but {len(bidx)} batch indices")
    if len(pts) == 0:
        return record(np.zeros((0, c)), (features,), lambda g: (np.zeros_like(features.data),), "bilinear_sample")

    px = np.clip(pts[:, 0], 0.0, w - 1.0)
    py = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = px - x0
    ay = py - y0
    corners = (
        (y0, x0, (1 - ax) * (1 - ay)),
        (y0, x1, ax * (1 - ay)),
        (y1, x0, (1 - ax) * ay),
        (y1, x1, ax * ay),
    )
    out = np.zeros((len(pts), c))
    for yy, xx, wt in corners:
        out += fb[bidx, :, yy, xx] * wt[:, None]

    def backward(g):
        gf = np.zeros_like(fb)
        for yy, xx, wt in corners:
            # fancy index [bidx, :, yy, xx] puts the channel axis last
            np.add.at(gf.transpose(0, 2, 3, 1), (bidx, yy, xx), g * wt[:, None])
        return (gf[0] if squeeze else gf,)

    return record(out, (features,), backward, "bilinear_sample")
