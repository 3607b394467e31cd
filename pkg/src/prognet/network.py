"""Columns, lateral adapters and the forward pass of a progressive network.

Column ``k`` computes, for every hidden layer ``i``::

    h_i^k = relu(W_i^k h_{i-1}^k + b_i^k + U_i^k relu(V_i^k [a_1 h_{i-1}^1, ..., a_{k-1} h_{i-1}^{k-1}] + c_i^k))

where the bracket concatenates the gated activations of all earlier columns
(along channels for convolutional layers, along features for dense ones).
``V`` is a 1x1 convolution or a dense projection back to one column's width
and ``U`` has the same shape as ``W``. Layer 1 reads the shared observation
and has no lateral path; both output heads get one from the last hidden layer.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable

import numpy as np

from . import tensor as tc
from .tensor import Graph, Tensor

ALPHA_CHOICES = (1.0, 1e-1, 1e-2)
OBS_SHAPE = (2, 16, 16)
HEADS = ("policy", "value")


class ConfigError(ValueError):
    """Invalid network description."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "dense"
    width: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.width <= 0:
            raise ConfigError(f"layer width must be positive, got {self.width}")
        object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
        object.__setattr__(self, "stride", tuple(int(v) for v in self.stride))
        if min(self.kernel + self.stride) <= 0:
            raise ConfigError(f"kernel and stride must be positive: {self}")

    @classmethod
    def conv(cls, width, kernel, stride):
        k = (kernel, kernel) if isinstance(kernel, int) else kernel
        s = (stride, stride) if isinstance(stride, int) else stride
        return cls("conv", width, k, s)

    @classmethod
    def dense(cls, width):
        return cls("dense", width)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "width": self.width,
                "kernel": list(self.kernel), "stride": list(self.stride)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], int(d["width"]), tuple(d["kernel"]), tuple(d["stride"]))


def atari_layers(third_kernel=(3, 3)) -> list[LayerSpec]:
    """Atari-sized stack: three 12-map conv layers and 256 dense units."""
    return [LayerSpec.conv(12, 8, 4), LayerSpec.conv(12, 4, 2),
            LayerSpec.conv(12, third_kernel, 1), LayerSpec.dense(256)]


def desk_layers(maps: int = 8, hidden: int = 32) -> list[LayerSpec]:
    """Same shape as :func:`atari_layers`, shrunk for 16x16 frames."""
    return [LayerSpec.conv(maps, 4, 2), LayerSpec.conv(maps, 3, 1),
            LayerSpec.conv(maps, 3, 1), LayerSpec.dense(hidden)]


@dataclass
class Column:
    index: int
    seed: int
    alpha_init: float
    params: dict[str, np.ndarray]
    frozen: bool = False
    task: str = ""


@dataclass
class AdapterBank:
    """Lateral adapter parameters, grouped by the column that owns them."""

    by_column: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    def of(self, k: int) -> dict[str, np.ndarray]:
        return self.by_column.get(k, {})

    def param_count(self, k: int) -> int:
        return sum(a.size for a in self.of(k).values())


@dataclass
class PolicyOutput:
    policy: Tensor                 # [batch, n_actions]
    value: Tensor                  # [batch]
    logits: Tensor                 # [batch, n_actions]
    activations: dict[tuple[int, int], Tensor]  # (layer, column) -> post-ReLU h


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class ProgressiveNetwork:
    def __init__(self, layer_specs, n_actions: int, obs_shape=OBS_SHAPE):
        self.layer_specs: tuple[LayerSpec, ...] = tuple(layer_specs)
        self.n_actions = int(n_actions)
        self.obs_shape = tuple(int(v) for v in obs_shape)
        self.columns: list[Column] = []
        self.adapters = AdapterBank()
        self.hidden_shapes = self._infer_shapes()

    # -- shapes -------------------------------------------------------------

    def _infer_shapes(self) -> list[tuple[int, ...]]:
        if not self.layer_specs:
            raise ConfigError("network needs at least one layer")
        if self.n_actions < 2:
            raise ConfigError(f"n_actions must be >= 2, got {self.n_actions}")
        if len(self.obs_shape) != 3:
            raise ConfigError(f"observation must be (channels, height, width), got {self.obs_shape}")
        shapes = []
        cur = self.obs_shape
        for i, spec in enumerate(self.layer_specs, 1):
            if spec.kind == "conv":
                if len(cur) != 3:
                    raise ConfigError(f"layer {i}: conv cannot follow a dense layer")
                (kh, kw), (sh, sw) = spec.kernel, spec.stride
                if kh > cur[1] or kw > cur[2]:
                    raise ConfigError(f"layer {i}: kernel {spec.kernel} larger than input {cur}")
                cur = (spec.width, tc.conv_output_size(cur[1], kh, sh),
                       tc.conv_output_size(cur[2], kw, sw))
            else:
                cur = (spec.width,)
            shapes.append(cur)
        return shapes

    @property
    def n_layers(self) -> int:
        return len(self.layer_specs)

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    def input_shape(self, i: int) -> tuple[int, ...]:
        """Shape of ``h_{i-1}`` for one sample (``i`` is 1-based; heads use L+1)."""
        return self.obs_shape if i == 1 else self.hidden_shapes[i - 2]

    def column_shapes(self, k: int) -> tuple[list, list]:
        """Ordered ``(name, shape, fan_in, fan_out)`` for the column's own
        parameters and for its incoming adapters."""
        own, lat = [], []
        for i, spec in enumerate(self.layer_specs, 1):
            src = self.input_shape(i)
            p = f"l{i}"
            if spec.kind == "conv":
                c_in = src[0]
                (kh, kw) = spec.kernel
                own += [(f"{p}.W", (spec.width, c_in, kh, kw), c_in * kh * kw, spec.width * kh * kw),
                        (f"{p}.b", (spec.width,), 0, 0)]
                if k > 1 and i > 1:
                    lat += [(f"{p}.alpha.{j}", (1,), 0, 0) for j in range(1, k)]
                    lat += [(f"{p}.V", (c_in, (k - 1) * c_in, 1, 1), (k - 1) * c_in, c_in),
                            (f"{p}.c", (c_in,), 0, 0),
                            (f"{p}.U", (spec.width, c_in, kh, kw), c_in * kh * kw, spec.width * kh * kw)]
            else:
                n_in = int(np.prod(src))
                own += [(f"{p}.W", (spec.width, n_in), n_in, spec.width),
                        (f"{p}.b", (spec.width,), 0, 0)]
                if k > 1 and i > 1:
                    lat += self._dense_adapter_shapes(p, k, n_in, spec.width)
        n_last = int(np.prod(self.hidden_shapes[-1]))
        for head, n_out in zip(HEADS, (self.n_actions, 1)):
            own += [(f"{head}.W", (n_out, n_last), n_last, n_out), (f"{head}.b", (n_out,), 0, 0)]
            if k > 1:
                lat += self._dense_adapter_shapes(head, k, n_last, n_out)
        return own, lat

    @staticmethod
    def _dense_adapter_shapes(p, k, n_in, n_out):
        return ([(f"{p}.alpha.{j}", (1,), 0, 0) for j in range(1, k)]
                + [(f"{p}.V", (n_in, (k - 1) * n_in), (k - 1) * n_in, n_in),
                   (f"{p}.c", (n_in,), 0, 0),
                   (f"{p}.U", (n_out, n_in), n_in, n_out)])

    # -- parameters ---------------------------------------------------------

    def column(self, k: int) -> Column:
        if not 1 <= k <= len(self.columns):
            raise KeyError(f"unknown column {k}; network has {len(self.columns)}")
        return self.columns[k - 1]

    def column_params(self, k: int) -> dict[str, np.ndarray]:
        """Column ``k``'s own parameters and its incoming adapters, by global id."""
        col = self.column(k)
        out = {f"c{k}/{n}": a for n, a in col.params.items()}
        out.update({f"c{k}/{n}": a for n, a in self.adapters.of(k).items()})
        return out

    def all_params(self) -> dict[str, np.ndarray]:
        out = {}
        for k in range(1, self.n_columns + 1):
            out.update(self.column_params(k))
        return out

    def get(self, pid: str) -> np.ndarray:
        k, name = _split_pid(pid)
        col = self.column(k)
        if name in col.params:
            return col.params[name]
        return self.adapters.of(k)[name]

    def param_count(self) -> int:
        return sum(a.size for a in self.all_params().values())

    def trainable_params(self) -> list[str]:
        return trainable_params(self)


def _split_pid(pid: str) -> tuple[int, str]:
    col, name = pid.split("/", 1)
    return int(col[1:]), name


def _init_column(net: ProgressiveNetwork, k: int, seed: int, alpha_init: float) -> None:
    rng = np.random.default_rng(seed)
    own, lat = net.column_shapes(k)
    params, adapters = {}, {}
    for dest, entries in ((params, own), (adapters, lat)):
        for name, shape, fan_in, fan_out in entries:
            if ".alpha." in name:
                dest[name] = np.full(shape, float(alpha_init))
            elif fan_in == 0:
                dest[name] = np.zeros(shape)
            else:
                dest[name] = _glorot(rng, shape, fan_in, fan_out)
    net.columns.append(Column(k, int(seed), float(alpha_init), params))
    if adapters:
        net.adapters.by_column[k] = adapters


def new_network(spec: Iterable[LayerSpec], n_actions: int, seed: int,
                obs_shape=OBS_SHAPE) -> ProgressiveNetwork:
    """A one-column network with freshly initialised, trainable parameters."""
    net = ProgressiveNetwork(list(spec), n_actions, obs_shape)
    _init_column(net, 1, seed, ALPHA_CHOICES[0])
    return net


def _freeze(arrays: Iterable[np.ndarray]) -> None:
    for a in arrays:
        a.flags.writeable = False


def add_column(net: ProgressiveNetwork, seed: int, alpha_init: float | None = None) -> int:
    """Freeze every existing column and append a new one with adapters.

    ``alpha_init`` defaults to a draw from ``ALPHA_CHOICES`` seeded by ``seed``.
    """
    if alpha_init is None:
        alpha_init = ALPHA_CHOICES[int(np.random.default_rng([seed, 7]).integers(len(ALPHA_CHOICES)))]
    for col in net.columns:
        col.frozen = True
        _freeze(col.params.values())
        _freeze(net.adapters.of(col.index).values())
    k = net.n_columns + 1
    _init_column(net, k, seed, alpha_init)
    return k


def trainable_params(net: ProgressiveNetwork) -> list[str]:
    """Ids of the last column's parameters plus its incoming adapters."""
    return list(net.column_params(net.n_columns))


def clone(net: ProgressiveNetwork) -> ProgressiveNetwork:
    """Deep copy whose arrays keep the original's freeze flags."""
    out = copy.deepcopy(net)
    for col in out.columns:
        if col.frozen:
            _freeze(col.params.values())
            _freeze(out.adapters.of(col.index).values())
    return out


def reinit_heads(net: ProgressiveNetwork, seed: int) -> None:
    """Replace the last column's output heads with a fresh random draw."""
    k = net.n_columns
    col = net.column(k)
    rng = np.random.default_rng(seed)
    own, _ = net.column_shapes(k)
    for name, shape, fan_in, fan_out in own:
        if name.split(".")[0] in HEADS:
            col.params[name] = np.zeros(shape) if fan_in == 0 else _glorot(rng, shape, fan_in, fan_out)


# ------------------------------------------------------------ forward pass

_ZERO_BIAS: dict[int, Tensor] = {}


def _zero_bias(n: int) -> Tensor:
    if n not in _ZERO_BIAS:
        _ZERO_BIAS[n] = Tensor(np.zeros(n))
    return _ZERO_BIAS[n]


def _layer(spec: LayerSpec, x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if spec.kind == "conv":
        return tc.conv2d(x, W, spec.stride, bias=b)
    return tc.dense(tc.flatten(x), W, b)


def _gate_concat(sources: list[Tensor], alphas: list[Tensor], flat: bool) -> Tensor:
    gated = [tc.scale(tc.flatten(h) if flat else h, a) for h, a in zip(sources, alphas)]
    return tc.concat(gated, axis=1)


def _adapter(kind: str, spec: LayerSpec | None, sources, P: Callable, prefix: str) -> Tensor:
    alphas = [P(f"{prefix}.alpha.{j}") for j in range(1, len(sources) + 1)]
    if kind == "conv":
        x = _gate_concat(sources, alphas, flat=False)
        hidden = tc.relu(tc.conv2d(x, P(f"{prefix}.V"), (1, 1), bias=P(f"{prefix}.c")))
        return tc.conv2d(hidden, P(f"{prefix}.U"), spec.stride)
    x = _gate_concat(sources, alphas, flat=True)
    hidden = tc.relu(tc.dense(x, P(f"{prefix}.V"), P(f"{prefix}.c")))
    U = P(f"{prefix}.U")
    return tc.dense(hidden, U, _zero_bias(U.shape[0]))


class _ParamSource:
    """Hands out parameter tensors: graph leaves if trainable, constants otherwise."""

    def __init__(self, net, graph, trainable):
        self.net = net
        self.graph = graph
        self.trainable = trainable
        self.cache: dict[str, Tensor] = {}

    def for_column(self, k: int) -> Callable[[str], Tensor]:
        col = self.net.column(k)
        adapters = self.net.adapters.of(k)

        def get(name: str) -> Tensor:
            pid = f"c{k}/{name}"
            t = self.cache.get(pid)
            if t is None:
                arr = col.params[name] if name in col.params else adapters[name]
                if self.graph is not None and pid in self.trainable:
                    t = self.graph.param(pid, arr)
                else:
                    t = Tensor._wrap(arr)
                self.cache[pid] = t
            return t

        return get


def forward(net: ProgressiveNetwork, k: int, obs, *, graph: Graph | None = None,
            params: Iterable[str] | None = None, watch: bool = False,
            perturb: dict[tuple[int, int], Callable[[np.ndarray], np.ndarray]] | None = None,
            ) -> PolicyOutput:
    """Evaluate column ``k`` (1-based) on a batch of observations.

    With ``graph`` set, the parameter ids in ``params`` (default: the
    trainable set) become graph parameters; everything else is a constant.
    ``watch`` registers every post-ReLU activation under key ``(layer, column)``
    so the graph reports its gradient. ``perturb`` maps ``(layer, column)`` to
    a function applied to that activation's values (used for noise probes).
    """
    if not 1 <= k <= net.n_columns:
        raise KeyError(f"unknown column {k}; network has {net.n_columns}")
    x = obs if isinstance(obs, Tensor) else Tensor(obs)
    if x.shape[1:] != net.obs_shape:
        raise tc.ShapeError(f"observation batch {x.shape} does not match {net.obs_shape}")
    if watch and graph is None:
        raise ValueError("watch requires a graph")
    trainable = set(trainable_params(net) if params is None else params)
    src = _ParamSource(net, graph, trainable)
    getters = [src.for_column(j) for j in range(1, k + 1)]

    activations: dict[tuple[int, int], Tensor] = {}
    prev = [x] * k
    for i, spec in enumerate(net.layer_specs, 1):
        cur = []
        for j in range(1, k + 1):
            P = getters[j - 1]
            z = _layer(spec, prev[j - 1], P(f"l{i}.W"), P(f"l{i}.b"))
            if i > 1 and j > 1:
                z = tc.add(z, _adapter(spec.kind, spec, prev[:j - 1], P, f"l{i}"))
            h = tc.relu(z)
            if perturb is not None and (i, j) in perturb:
                noisy = perturb[(i, j)](h.data)
                h = Tensor(noisy) if h.graph is None else tc.add(h, Tensor(noisy - h.data))
            if watch:
                h = graph.watch((i, j), h)
            activations[(i, j)] = h
            cur.append(h)
        prev = cur

    P = getters[k - 1]
    last = tc.flatten(prev[k - 1])
    heads = []
    for head in HEADS:
        out = tc.dense(last, P(f"{head}.W"), P(f"{head}.b"))
        if k > 1:
            out = tc.add(out, _adapter("dense", None, prev[:k - 1], P, head))
        heads.append(out)
    logits, value = heads
    return PolicyOutput(policy=tc.softmax_logits(logits),
                        value=tc.reshape(value, (value.shape[0],)),
                        logits=logits, activations=activations)


def _relu_values(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, 0.0)


def _layer_values(spec: LayerSpec | None, x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if spec is not None and spec.kind == "conv":
        return tc._conv_values(x, W, spec.stride, b)[0]
    return x.reshape(x.shape[0], -1) @ W.T + b


def _adapter_values(spec: LayerSpec | None, sources, params: dict, prefix: str) -> np.ndarray:
    conv = spec is not None and spec.kind == "conv"
    gated = [(h if conv else h.reshape(h.shape[0], -1)) * params[f"{prefix}.alpha.{j}"].reshape(-1)[0]
             for j, h in enumerate(sources, 1)]
    x = gated[0] if len(gated) == 1 else np.concatenate(gated, axis=1)
    V, c, U = params[f"{prefix}.V"], params[f"{prefix}.c"], params[f"{prefix}.U"]
    if conv:
        hidden = _relu_values(tc._conv_values(x, V, (1, 1), c)[0])
        return tc._conv_values(hidden, U, spec.stride, None)[0]
    hidden = _relu_values(x @ V.T + c)
    return hidden @ U.T + np.zeros(U.shape[0])


def policy_value(net: ProgressiveNetwork, k: int, obs) -> tuple[np.ndarray, np.ndarray]:
    """Action probabilities and values of column ``k`` without building tensors.

    Same arithmetic as :func:`forward`, minus the per-op bookkeeping; used on
    the hot rollout path. Raises ``NonFiniteError`` on a non-finite output.
    """
    if not 1 <= k <= net.n_columns:
        raise KeyError(f"unknown column {k}; network has {net.n_columns}")
    x = np.asarray(obs, dtype=np.float64)
    if x.shape[1:] != net.obs_shape:
        raise tc.ShapeError(f"observation batch {x.shape} does not match {net.obs_shape}")
    params = [{**net.column(j).params, **net.adapters.of(j)} for j in range(1, k + 1)]
    prev = [x] * k
    for i, spec in enumerate(net.layer_specs, 1):
        cur = []
        for j in range(1, k + 1):
            P = params[j - 1]
            z = _layer_values(spec, prev[j - 1], P[f"l{i}.W"], P[f"l{i}.b"])
            if i > 1 and j > 1:
                z = z + _adapter_values(spec, prev[:j - 1], P, f"l{i}")
            cur.append(_relu_values(z))
        prev = cur
    P = params[k - 1]
    last = prev[k - 1].reshape(x.shape[0], -1)
    heads = []
    for head in HEADS:
        out = last @ P[f"{head}.W"].T + P[f"{head}.b"]
        if k > 1:
            out = out + _adapter_values(None, prev[:k - 1], P, head)
        heads.append(out)
    logits, value = heads
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    value = value.reshape(x.shape[0])
    if not (np.isfinite(probs).all() and np.isfinite(value).all()):
        raise tc.NonFiniteError("policy_value produced non-finite values")
    return probs, value
