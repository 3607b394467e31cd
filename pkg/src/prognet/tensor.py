"""Dense float64 arrays with a tape-based reverse-mode differentiator.

Every op accepts :class:`Tensor` arguments. An op whose inputs are all
constants (``graph is None``) is evaluated eagerly and nothing is recorded,
which is how rollouts and frozen columns run. As soon as one input belongs
to a :class:`Graph` the op is appended to that graph's tape together with a
closure computing the vector-Jacobian product.
"""
from __future__ import annotations

import functools
from typing import Callable, Hashable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GradientError(RuntimeError):
    """Misuse of the differentiator (non-scalar loss, mixed graphs)."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Immutable n-dimensional float64 array, optionally tracked by a Graph."""

    __slots__ = ("data", "graph", "index")

    def __init__(self, data, graph: "Graph | None" = None, index: int = -1):
        arr = np.asarray(data, dtype=np.float64)
        if graph is None:
            _check_finite(arr, "Tensor")
        self.data = arr
        self.graph = graph
        self.index = index

    @classmethod
    def _wrap(cls, value: np.ndarray) -> "Tensor":
        # op outputs are already checked; skip the constructor's validation
        t = cls.__new__(cls)
        t.data, t.graph, t.index = value, None, -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tracked = "" if self.graph is None else f", node={self.index}"
        return f"Tensor(shape={self.shape}{tracked})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "value", "backward")

    def __init__(self, op, inputs, value, backward):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.backward = backward


class Graph:
    """Append-only tape of differentiable op records.

    Only values that depend on a parameter (or a watched activation) are
    recorded, so every node on the tape requires a gradient. Nodes are
    appended in evaluation order, which is a topological order by
    construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.reported: dict[Hashable, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf(self, key, value: np.ndarray) -> Tensor:
        if key in self.reported:
            raise GradientError(f"duplicate key {key!r} in graph")
        self.nodes.append(_Node("leaf", (), value, None))
        idx = len(self.nodes) - 1
        self.reported[key] = idx
        return Tensor(value, self, idx)

    def param(self, key: Hashable, value) -> Tensor:
        """Register a parameter; its gradient appears in :meth:`backward`."""
        arr = np.asarray(value, dtype=np.float64)
        _check_finite(arr, f"param {key!r}")
        return self._leaf(key, arr)

    def watch(self, key: Hashable, t: Tensor) -> Tensor:
        """Identity op whose output gradient is reported under ``key``."""
        if t.graph is None:
            return self._leaf(key, t.data)
        if key in self.reported:
            raise GradientError(f"duplicate key {key!r} in graph")
        out = self.record("watch", (t,), t.data, lambda g, needs: (g,))
        self.reported[key] = out.index
        return out

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray,
               backward: Callable) -> Tensor:
        idx = tuple(t.index if t.graph is self else -1 for t in inputs)
        self.nodes.append(_Node(op, idx, value, backward))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, loss: Tensor) -> dict[Hashable, Tensor]:
        """Gradient of a scalar ``loss`` for every parameter and watched key.

        Keys not connected to the loss get exactly-zero tensors.
        """
        if loss.data.size != 1:
            raise GradientError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        if loss.graph is self:
            grads[loss.index] = np.ones_like(loss.data)
            start = loss.index
        elif loss.graph is None:
            start = -1
        else:
            raise GradientError("loss belongs to a different graph")
        nodes = self.nodes
        for i in range(start, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if node.backward is None:
                continue
            needs = tuple(j >= 0 for j in node.inputs)
            for j, gj in zip(node.inputs, node.backward(g, needs)):
                if j < 0 or gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for key, i in self.reported.items():
            g = grads[i]
            if g is None:
                g = np.zeros_like(nodes[i].value)
            else:
                _check_finite(g, f"gradient of {key!r}")
            out[key] = Tensor(g)
        return out


def _graph_of(*ts: Tensor) -> Graph | None:
    g = None
    for t in ts:
        if t.graph is not None:
            if g is None:
                g = t.graph
            elif t.graph is not g:
                raise GradientError("operands belong to different graphs")
    return g


def _emit(op: str, inputs: Sequence[Tensor], value: np.ndarray,
          backward: Callable) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    _check_finite(value, op)
    value.flags.writeable = False
    g = _graph_of(*inputs)
    if g is None:
        return Tensor._wrap(value)
    return g.record(op, inputs, value, backward)


# ---------------------------------------------------------------- layers

def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``out[b, o] = sum_i weight[o, i] * x[b, i] + bias[o]``."""
    xs, ws, bs = x.shape, weight.shape, bias.shape
    if len(xs) != 2 or len(ws) != 2 or bs != (ws[0],) or xs[1] != ws[1]:
        raise ShapeError(f"dense: input {xs}, weight {ws}, bias {bs} do not conform")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def back(g, needs):
        return (g @ wd if needs[0] else None,
                g.T @ xd if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return _emit("dense", (x, weight, bias), out, back)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _conv_values(xd: np.ndarray, kd: np.ndarray, stride: tuple[int, int],
                 bias: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Unchecked conv forward on raw arrays; also returns the im2col matrix."""
    B, C, H, W = xd.shape
    O, _, kh, kw = kd.shape
    sh, sw = stride
    Ho, Wo = conv_output_size(H, kh, sh), conv_output_size(W, kw, sw)
    k2 = kd.reshape(O, C * kh * kw)
    if kh == 1 and kw == 1:
        sub = xd[:, :, ::sh, ::sw] if (sh, sw) != (1, 1) else xd
        cols = sub.reshape(B, C, Ho * Wo)
    else:
        idx = _im2col_index(H, W, kh, kw, sh, sw)
        cols = xd.reshape(B, C, H * W)[:, :, idx].reshape(B, C * kh * kw, Ho * Wo)
    out = np.matmul(k2, cols)
    if bias is not None:
        out += bias[None, :, None]
    return out.reshape(B, O, Ho, Wo), cols


@functools.lru_cache(maxsize=64)
def _im2col_index(H: int, W: int, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Flat input offsets ``[kh*kw, Ho*Wo]`` of every kernel tap at every output pixel."""
    Ho, Wo = conv_output_size(H, kh, sh), conv_output_size(W, kw, sw)
    rows = (np.arange(kh)[:, None] + sh * np.arange(Ho)[None, :])  # [kh, Ho]
    cols = (np.arange(kw)[:, None] + sw * np.arange(Wo)[None, :])  # [kw, Wo]
    flat = rows[:, None, :, None] * W + cols[None, :, None, :]      # [kh, kw, Ho, Wo]
    return flat.reshape(kh * kw, Ho * Wo)


def conv2d(x: Tensor, kernel: Tensor, stride=(1, 1), bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation of ``x[B, C, H, W]`` with ``kernel[O, C, kh, kw]``."""
    if len(x.shape) != 4 or len(kernel.shape) != 4:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {kernel.shape} must be 4-d")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if Ck != C:
        raise ShapeError(f"conv2d: input {x.shape} has {C} channels, kernel {kernel.shape} expects {Ck}")
    if kh > H or kw > W:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {O} output channels")
    Ho, Wo = conv_output_size(H, kh, sh), conv_output_size(W, kw, sw)
    xd, kd = x.data, kernel.data
    k2 = kd.reshape(O, C * kh * kw)
    out, cols = _conv_values(xd, kd, (sh, sw), None if bias is None else bias.data)

    def back(g, needs):
        gx = gk = gb = None
        g2 = g.reshape(B, O, Ho * Wo)
        if needs[1]:
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kd.shape)
        if needs[0] and (sh, sw) == (1, 1) and kh * kw > 1:
            # full correlation of the padded output gradient with the flipped kernel
            gp = np.zeros((B, O, Ho + 2 * (kh - 1), Wo + 2 * (kw - 1)))
            gp[:, :, kh - 1:kh - 1 + Ho, kw - 1:kw - 1 + Wo] = g
            Hp, Wp = gp.shape[2:]
            gidx = _im2col_index(Hp, Wp, kh, kw, 1, 1)
            gcols = gp.reshape(B, O, Hp * Wp)[:, :, gidx].reshape(B, O * kh * kw, H * W)
            kflip = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, O * kh * kw)
            gx = np.matmul(kflip, gcols).reshape(B, C, H, W)
        elif needs[0]:
            gcols = np.matmul(k2.T, g2).reshape(B, C, kh, kw, Ho, Wo)
            gx = np.zeros_like(xd)
            hi, wi = sh * (Ho - 1) + 1, sw * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + hi:sh, j:j + wi:sw] += gcols[:, :, i, j]
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, back)


# ------------------------------------------------------- elementwise ops

def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    out = np.where(mask, xd, 0.0)
    return _emit("relu", (x,), out, lambda g, needs: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g, needs: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g, needs: (g, -g if needs[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g, needs: (g * bd if needs[0] else None,
                                   g * ad if needs[1] else None))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", (x,), xd * xd, lambda g, needs: (2.0 * g * xd,))


def mul_const(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("mul_const", (x,), x.data * c, lambda g, needs: (g * c,))


def scale(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the single entry of ``alpha``."""
    if alpha.data.size != 1:
        raise ShapeError(f"scale: gate must hold one value, got {alpha.shape}")
    xd, ad = x.data, alpha.data
    a = ad.reshape(-1)[0]

    def back(g, needs):
        ga = np.reshape(np.sum(g * xd), ad.shape) if needs[1] else None
        return (g * a if needs[0] else None, ga)

    return _emit("scale", (x, alpha), xd * a, back)


# --------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {old} -> {tuple(shape)}") from e
    return _emit("reshape", (x,), out, lambda g, needs: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    if x.data.ndim == 2:
        return x
    return reshape(x, (x.shape[0], -1))


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if len(ts) == 1:
        return ts[0]
    shapes = [t.shape for t in ts]
    for s in shapes[1:]:
        if len(s) != len(shapes[0]) or any(
                a != b for d, (a, b) in enumerate(zip(s, shapes[0])) if d != axis):
            raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([s[axis] for s in shapes])[:-1]

    def back(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(ts), out, back)


# ---------------------------------------------------- reductions, heads

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()),
                 lambda g, needs: (np.full(shape, float(g)),))


def sum_rows(x: Tensor) -> Tensor:
    """Sum a ``[batch, n]`` tensor over its second axis."""
    n = x.shape[1]
    return _emit("sum_rows", (x,), x.data.sum(axis=1),
                 lambda g, needs: (np.repeat(g[:, None], n, axis=1),))


def softmax_logits(logits: Tensor) -> Tensor:
    """Row-wise softmax, computed after subtracting each row's maximum."""
    if len(logits.shape) != 2:
        raise ShapeError(f"softmax_logits: expected [batch, n], got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g, needs):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit("softmax", (logits,), p, back)


def log_softmax(logits: Tensor) -> Tensor:
    if len(logits.shape) != 2:
        raise ShapeError(f"log_softmax: expected [batch, n], got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g, needs):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax", (logits,), out, back)


def pick(x: Tensor, idx) -> Tensor:
    """``out[b] = x[b, idx[b]]`` for a ``[batch, n]`` tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(x.shape) != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: {x.shape} with indices {idx.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def back(g, needs):
        gx = np.zeros(shape)
        gx[rows, idx] = g
        return (gx,)

    return _emit("pick", (x,), x.data[rows, idx], back)
