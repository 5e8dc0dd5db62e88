"""Dense float64 tensors with a static compute graph and reverse-mode autodiff.

A `ComputeGraph` is built once per input shape: leaves are named inputs and
parameters, every other node is one primitive op. `evaluate` runs the nodes in
construction order (which is a topological order by construction) and caches
the intermediates; `backward` walks them in reverse. There is no implicit
broadcasting apart from scalar constants: `broadcast` and `add_bias` are the
explicit ways to tile a tensor across leading dimensions.

Checkpoints use the TEEG1 container:

    b"TEEG1" then, per tensor: u16 name length, UTF-8 name, u8 rank,
    u32 dims, little-endian f64 payload.
"""
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import CheckpointError, GraphError, ShapeError

logger = logging.getLogger("numkernel")

DTYPE = np.float64
LOG_FLOOR = 1e-8
CHECKPOINT_MAGIC = b"TEEG1"


def as_tensor(values: Any, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Coerce to a float64 array, optionally checking product(shape) == len(data)."""
    data = np.array(values, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if int(np.prod(shape)) != data.size:
            raise ShapeError("tensor", f"{data.size} values do not fill shape {shape}", shape)
        data = data.reshape(shape)
    return data


class Var(NamedTuple):
    """Handle to a graph node."""
    index: int
    shape: Tuple[int, ...]


@dataclass
class Node:
    index: int
    op: str
    inputs: Tuple[int, ...]
    shape: Tuple[int, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)
    name: Optional[str] = None


# --- Primitive ops: forward(xs, attrs) -> value, backward(g, xs, out, attrs, needs) -> grads ---

def _fwd_add(xs, attrs):
    return xs[0] + xs[1]


def _bwd_add(g, xs, out, attrs, needs):
    return [g, g]


def _fwd_sub(xs, attrs):
    return xs[0] - xs[1]


def _bwd_sub(g, xs, out, attrs, needs):
    return [g, -g]


def _fwd_mul(xs, attrs):
    return xs[0] * xs[1]


def _bwd_mul(g, xs, out, attrs, needs):
    return [g * xs[1] if needs[0] else None, g * xs[0] if needs[1] else None]


def _fwd_scale(xs, attrs):
    return xs[0] * attrs["factor"]


def _bwd_scale(g, xs, out, attrs, needs):
    return [g * attrs["factor"]]


def _fwd_add_scalar(xs, attrs):
    return xs[0] + attrs["value"]


def _bwd_add_scalar(g, xs, out, attrs, needs):
    return [g]


def _fwd_square(xs, attrs):
    return xs[0] * xs[0]


def _bwd_square(g, xs, out, attrs, needs):
    return [2.0 * xs[0] * g]


def _fwd_log(xs, attrs):
    floor = attrs.get("floor")
    if floor is None:
        if np.any(xs[0] <= 0):
            raise GraphError("log: non-positive input (clamp with a floor before taking the log)")
        return np.log(xs[0])
    return np.log(np.maximum(xs[0], floor))


def _bwd_log(g, xs, out, attrs, needs):
    floor = attrs.get("floor")
    if floor is None:
        return [g / xs[0]]
    inside = xs[0] > floor
    return [np.where(inside, g / np.maximum(xs[0], floor), 0.0)]


def _fwd_sigmoid(xs, attrs):
    return expit(xs[0])


def _bwd_sigmoid(g, xs, out, attrs, needs):
    return [g * out * (1.0 - out)]


def _fwd_tanh(xs, attrs):
    return np.tanh(xs[0])


def _bwd_tanh(g, xs, out, attrs, needs):
    return [g * (1.0 - out * out)]


def _fwd_clip(xs, attrs):
    return np.clip(xs[0], attrs["low"], attrs["high"])


def _bwd_clip(g, xs, out, attrs, needs):
    inside = (xs[0] >= attrs["low"]) & (xs[0] <= attrs["high"])
    return [np.where(inside, g, 0.0)]


def _fwd_matmul(xs, attrs):
    return np.matmul(xs[0], xs[1])


def _bwd_matmul(g, xs, out, attrs, needs):
    a, b = xs
    ga = np.matmul(g, np.swapaxes(b, -1, -2)) if needs[0] else None
    gb = None
    if needs[1]:
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return [ga, gb]


def _fwd_conv1d(xs, attrs):
    x, w = xs[0], xs[1]
    n, _, t = x.shape
    f, _, k = w.shape
    t_out = t - k + 1
    out = np.zeros((n, f, t_out), dtype=DTYPE)
    for j in range(k):
        out += np.matmul(w[:, :, j], x[:, :, j:j + t_out])
    if len(xs) == 3:
        out += xs[2][None, :, None]
    return out


def _bwd_conv1d(g, xs, out, attrs, needs):
    x, w = xs[0], xs[1]
    k = w.shape[2]
    t_out = g.shape[2]
    gx = np.zeros_like(x) if needs[0] else None
    gw = np.zeros_like(w) if needs[1] else None
    for j in range(k):
        if gx is not None:
            gx[:, :, j:j + t_out] += np.matmul(w[:, :, j].T, g)
        if gw is not None:
            gw[:, :, j] = np.tensordot(g, x[:, :, j:j + t_out], axes=([0, 2], [0, 2]))
    grads = [gx, gw]
    if len(xs) == 3:
        grads.append(g.sum(axis=(0, 2)) if needs[2] else None)
    return grads


def _fwd_avgpool(xs, attrs):
    window, stride = attrs["window"], attrs["stride"]
    return sliding_window_view(xs[0], window, axis=-1)[..., ::stride, :].mean(axis=-1)


def _bwd_avgpool(g, xs, out, attrs, needs):
    window, stride = attrs["window"], attrs["stride"]
    n_out = g.shape[-1]
    grad = np.zeros_like(xs[0])
    share = g / window
    span = stride * (n_out - 1) + 1
    for w in range(window):
        grad[..., w:w + span:stride] += share
    return [grad]


def _softmax_backward(g, p):
    return p * (g - np.sum(g * p, axis=-1, keepdims=True))


def _fwd_softmax(xs, attrs):
    a = xs[0]
    e = np.exp(a - np.max(a, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _bwd_softmax(g, xs, out, attrs, needs):
    return [_softmax_backward(g, out)]


def _fwd_masked_softmax(xs, attrs):
    a, mask = xs[0], attrs["mask"]
    masked = np.where(mask, a, -np.inf)
    top = np.max(masked, axis=-1, keepdims=True)
    e = np.where(mask, np.exp(masked - top), 0.0)
    return e / np.sum(e, axis=-1, keepdims=True)


def _fwd_concat(xs, attrs):
    return np.concatenate(xs, axis=attrs["axis"])


def _bwd_concat(g, xs, out, attrs, needs):
    bounds = np.cumsum([x.shape[attrs["axis"]] for x in xs])[:-1]
    return list(np.split(g, bounds, axis=attrs["axis"]))


def _fwd_stack(xs, attrs):
    return np.stack(xs, axis=attrs["axis"])


def _bwd_stack(g, xs, out, attrs, needs):
    return [np.take(g, i, axis=attrs["axis"]) if needs[i] else None for i in range(len(xs))]


def _fwd_slice(xs, attrs):
    index = [slice(None)] * xs[0].ndim
    index[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
    return xs[0][tuple(index)]


def _bwd_slice(g, xs, out, attrs, needs):
    grad = np.zeros_like(xs[0])
    index = [slice(None)] * xs[0].ndim
    index[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
    grad[tuple(index)] = g
    return [grad]


def _fwd_select(xs, attrs):
    return np.take(xs[0], attrs["index"], axis=attrs["axis"])


def _bwd_select(g, xs, out, attrs, needs):
    grad = np.zeros_like(xs[0])
    index = [slice(None)] * xs[0].ndim
    index[attrs["axis"]] = attrs["index"]
    grad[tuple(index)] = g
    return [grad]


def _fwd_reshape(xs, attrs):
    return xs[0].reshape(attrs["shape"])


def _bwd_reshape(g, xs, out, attrs, needs):
    return [g.reshape(xs[0].shape)]


def _fwd_transpose(xs, attrs):
    return np.ascontiguousarray(np.transpose(xs[0], attrs["axes"]))


def _bwd_transpose(g, xs, out, attrs, needs):
    return [np.transpose(g, np.argsort(attrs["axes"]))]


def _fwd_broadcast(xs, attrs):
    return np.broadcast_to(xs[0], tuple(attrs["lead"]) + xs[0].shape).copy()


def _bwd_broadcast(g, xs, out, attrs, needs):
    return [g.sum(axis=tuple(range(len(attrs["lead"]))))]


def _fwd_add_bias(xs, attrs):
    return xs[0] + xs[1]


def _bwd_add_bias(g, xs, out, attrs, needs):
    lead = g.ndim - xs[1].ndim
    return [g, g.sum(axis=tuple(range(lead))) if needs[1] else None]


def _fwd_sum(xs, attrs):
    return np.asarray(np.sum(xs[0], axis=attrs["axis"]), dtype=DTYPE)


def _bwd_sum(g, xs, out, attrs, needs):
    axis = attrs["axis"]
    if axis is None:
        return [np.full(xs[0].shape, float(g), dtype=DTYPE)]
    return [np.broadcast_to(np.expand_dims(g, axis), xs[0].shape).copy()]


def _fwd_mean(xs, attrs):
    return np.asarray(np.mean(xs[0], axis=attrs["axis"]), dtype=DTYPE)


def _bwd_mean(g, xs, out, attrs, needs):
    axis = attrs["axis"]
    count = xs[0].size if axis is None else xs[0].shape[axis]
    return [_bwd_sum(g, xs, out, attrs, needs)[0] / count]


def _gather_index(xs, attrs):
    if len(xs) == 1:
        return attrs["indices"]
    indices = xs[1].astype(np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= xs[0].shape[0]):
        raise GraphError(f"gather: index outside [0, {xs[0].shape[0]})")
    return indices


def _fwd_gather(xs, attrs):
    return np.take(xs[0], _gather_index(xs, attrs), axis=0)


def _bwd_gather(g, xs, out, attrs, needs):
    grad = np.zeros_like(xs[0])
    np.add.at(grad, _gather_index(xs, attrs), g)
    return [grad] + [None] * (len(xs) - 1)


OPS: Dict[str, Tuple[Callable, Callable]] = {
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "mul": (_fwd_mul, _bwd_mul),
    "scale": (_fwd_scale, _bwd_scale),
    "add_scalar": (_fwd_add_scalar, _bwd_add_scalar),
    "square": (_fwd_square, _bwd_square),
    "log": (_fwd_log, _bwd_log),
    "sigmoid": (_fwd_sigmoid, _bwd_sigmoid),
    "tanh": (_fwd_tanh, _bwd_tanh),
    "clip": (_fwd_clip, _bwd_clip),
    "matmul": (_fwd_matmul, _bwd_matmul),
    "conv1d": (_fwd_conv1d, _bwd_conv1d),
    "avgpool": (_fwd_avgpool, _bwd_avgpool),
    "softmax": (_fwd_softmax, _bwd_softmax),
    "masked_softmax": (_fwd_masked_softmax, _bwd_softmax),
    "concat": (_fwd_concat, _bwd_concat),
    "stack": (_fwd_stack, _bwd_stack),
    "slice": (_fwd_slice, _bwd_slice),
    "select": (_fwd_select, _bwd_select),
    "reshape": (_fwd_reshape, _bwd_reshape),
    "transpose": (_fwd_transpose, _bwd_transpose),
    "broadcast": (_fwd_broadcast, _bwd_broadcast),
    "add_bias": (_fwd_add_bias, _bwd_add_bias),
    "sum": (_fwd_sum, _bwd_sum),
    "mean": (_fwd_mean, _bwd_mean),
    "gather": (_fwd_gather, _bwd_gather),
}

LEAVES = ("input", "param", "const")


def _axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(op, f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


class ComputeGraph:
    """Static graph of primitive ops over named inputs and parameters."""

    def __init__(self, name: str = "graph"):
        self.name = name
        self.nodes: List[Node] = []
        self.inputs: Dict[str, int] = {}
        self.params: Dict[str, int] = {}
        self.outputs: Dict[str, int] = {}
        self._values: Optional[List[Optional[np.ndarray]]] = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _add(self, op: str, inputs: Sequence[Var], shape: Sequence[int], /, name: Optional[str] = None, **attrs) -> Var:
        node = Node(len(self.nodes), op, tuple(v.index for v in inputs), tuple(int(d) for d in shape), attrs, name)
        self.nodes.append(node)
        self._values = None
        return Var(node.index, node.shape)

    # --- leaves ---
    def input(self, name: str, shape: Sequence[int]) -> Var:
        if name in self.inputs or name in self.params:
            raise GraphError(f"{self.name}: duplicate leaf name {name!r}")
        var = self._add("input", [], shape, name=name)
        self.inputs[name] = var.index
        return var

    def param(self, name: str, shape: Sequence[int]) -> Var:
        if name in self.params:
            return Var(self.params[name], self.nodes[self.params[name]].shape)
        if name in self.inputs:
            raise GraphError(f"{self.name}: duplicate leaf name {name!r}")
        var = self._add("param", [], shape, name=name)
        self.params[name] = var.index
        return var

    def const(self, value: Any) -> Var:
        data = as_tensor(value)
        return self._add("const", [], data.shape, value=data)

    def output(self, name: str, var: Var) -> Var:
        self.outputs[name] = var.index
        return var

    # --- elementwise ---
    def _same(self, op: str, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ShapeError(op, "operands must have identical shapes", [a.shape, b.shape])
        return self._add(op, [a, b], a.shape)

    def add(self, a: Var, b: Var) -> Var:
        return self._same("add", a, b)

    def sub(self, a: Var, b: Var) -> Var:
        return self._same("sub", a, b)

    def mul(self, a: Var, b: Var) -> Var:
        return self._same("mul", a, b)

    def scale(self, a: Var, factor: float) -> Var:
        return self._add("scale", [a], a.shape, factor=float(factor))

    def add_scalar(self, a: Var, value: float) -> Var:
        return self._add("add_scalar", [a], a.shape, value=float(value))

    def one_minus(self, a: Var) -> Var:
        return self.add_scalar(self.scale(a, -1.0), 1.0)

    def square(self, a: Var) -> Var:
        return self._add("square", [a], a.shape)

    def log(self, a: Var, floor: Optional[float] = None) -> Var:
        return self._add("log", [a], a.shape, floor=floor)

    def sigmoid(self, a: Var) -> Var:
        return self._add("sigmoid", [a], a.shape)

    def tanh(self, a: Var) -> Var:
        return self._add("tanh", [a], a.shape)

    def clip(self, a: Var, low: float, high: float) -> Var:
        return self._add("clip", [a], a.shape, low=float(low), high=float(high))

    # --- linear algebra ---
    def matmul(self, a: Var, b: Var) -> Var:
        if len(a.shape) < 2 or len(b.shape) < 2:
            raise ShapeError("matmul", "operands must be at least 2-D", [a.shape, b.shape])
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", "inner dimensions differ", [a.shape, b.shape])
        if len(b.shape) > 2 and b.shape[:-2] != a.shape[:-2]:
            raise ShapeError("matmul", "batched operands need identical leading dims", [a.shape, b.shape])
        return self._add("matmul", [a, b], a.shape[:-1] + (b.shape[-1],))

    def conv1d(self, x: Var, w: Var, bias: Optional[Var] = None) -> Var:
        """Valid multichannel cross-correlation: (N,C,T) * (F,C,K) -> (N,F,T-K+1)."""
        if len(x.shape) != 3 or len(w.shape) != 3:
            raise ShapeError("conv1d", "expects x (N,C,T) and w (F,C,K)", [x.shape, w.shape])
        n, c, t = x.shape
        f, wc, k = w.shape
        if wc != c:
            raise ShapeError("conv1d", "channel count mismatch", [x.shape, w.shape])
        if t < k:
            raise ShapeError("conv1d", "input shorter than kernel", [x.shape, w.shape])
        inputs = [x, w]
        if bias is not None:
            if bias.shape != (f,):
                raise ShapeError("conv1d", "bias must have one entry per filter", [bias.shape, (f,)])
            inputs.append(bias)
        return self._add("conv1d", inputs, (n, f, t - k + 1))

    def avgpool(self, a: Var, window: int, stride: int) -> Var:
        t = a.shape[-1]
        if window < 1 or stride < 1 or t < window:
            raise ShapeError("avgpool", f"window {window}/stride {stride} invalid for length {t}", a.shape)
        return self._add("avgpool", [a], a.shape[:-1] + ((t - window) // stride + 1,), window=int(window), stride=int(stride))

    def softmax(self, a: Var) -> Var:
        return self._add("softmax", [a], a.shape)

    def masked_softmax(self, a: Var, mask: np.ndarray) -> Var:
        """Softmax over the last axis where mask==False entries get probability exactly 0."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[-mask.ndim:]:
            raise ShapeError("masked_softmax", "mask must match the trailing dims", [mask.shape, a.shape])
        if not np.all(mask.any(axis=-1)):
            raise ShapeError("masked_softmax", "every row needs at least one unmasked entry", mask.shape)
        return self._add("masked_softmax", [a], a.shape, mask=mask)

    # --- structure ---
    def concat(self, parts: Sequence[Var], axis: int = -1) -> Var:
        ndim = len(parts[0].shape)
        axis = _axis(axis, ndim, "concat")
        for p in parts:
            if len(p.shape) != ndim or any(p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != axis):
                raise ShapeError("concat", "parts differ outside the concat axis", [q.shape for q in parts])
        shape = list(parts[0].shape)
        shape[axis] = sum(p.shape[axis] for p in parts)
        return self._add("concat", parts, shape, axis=axis)

    def stack(self, parts: Sequence[Var], axis: int = 0) -> Var:
        if any(p.shape != parts[0].shape for p in parts):
            raise ShapeError("stack", "parts must share one shape", [p.shape for p in parts])
        axis = _axis(axis, len(parts[0].shape) + 1, "stack")
        shape = list(parts[0].shape)
        shape.insert(axis, len(parts))
        return self._add("stack", parts, shape, axis=axis)

    def slice(self, a: Var, axis: int, start: int, stop: int) -> Var:
        axis = _axis(axis, len(a.shape), "slice")
        if not 0 <= start < stop <= a.shape[axis]:
            raise ShapeError("slice", f"range [{start}, {stop}) outside axis of length {a.shape[axis]}", a.shape)
        shape = list(a.shape)
        shape[axis] = stop - start
        return self._add("slice", [a], shape, axis=axis, start=int(start), stop=int(stop))

    def select(self, a: Var, axis: int, index: int) -> Var:
        axis = _axis(axis, len(a.shape), "select")
        if not -a.shape[axis] <= index < a.shape[axis]:
            raise ShapeError("select", f"index {index} outside axis of length {a.shape[axis]}", a.shape)
        shape = list(a.shape)
        del shape[axis]
        return self._add("select", [a], shape, axis=axis, index=int(index) % a.shape[axis])

    def reshape(self, a: Var, shape: Sequence[int]) -> Var:
        shape = tuple(int(d) for d in shape)
        if int(np.prod(shape)) != int(np.prod(a.shape)):
            raise ShapeError("reshape", "element count changes", [a.shape, shape])
        return self._add("reshape", [a], shape, shape=shape)

    def transpose(self, a: Var, axes: Sequence[int]) -> Var:
        axes = tuple(int(x) for x in axes)
        if sorted(axes) != list(range(len(a.shape))):
            raise ShapeError("transpose", f"axes {axes} are not a permutation", a.shape)
        return self._add("transpose", [a], tuple(a.shape[i] for i in axes), axes=axes)

    def broadcast(self, a: Var, lead: Sequence[int]) -> Var:
        lead = tuple(int(d) for d in lead)
        return self._add("broadcast", [a], lead + a.shape, lead=lead)

    def add_bias(self, a: Var, b: Var) -> Var:
        if len(b.shape) > len(a.shape) or a.shape[len(a.shape) - len(b.shape):] != b.shape:
            raise ShapeError("add_bias", "bias must match the trailing dims", [a.shape, b.shape])
        return self._add("add_bias", [a, b], a.shape)

    def sum(self, a: Var, axis: Optional[int] = None) -> Var:
        if axis is None:
            return self._add("sum", [a], (), axis=None)
        axis = _axis(axis, len(a.shape), "sum")
        return self._add("sum", [a], a.shape[:axis] + a.shape[axis + 1:], axis=axis)

    def mean(self, a: Var, axis: Optional[int] = None) -> Var:
        if axis is None:
            return self._add("mean", [a], (), axis=None)
        axis = _axis(axis, len(a.shape), "mean")
        return self._add("mean", [a], a.shape[:axis] + a.shape[axis + 1:], axis=axis)

    def gather(self, a: Var, indices: Union[np.ndarray, Var]) -> Var:
        """Rows of `a` picked along axis 0 by an integer index array or an index-valued input."""
        if isinstance(indices, Var):
            return self._add("gather", [a, indices], indices.shape + a.shape[1:])
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
            raise ShapeError("gather", "index outside axis 0", [a.shape, indices.shape])
        return self._add("gather", [a], indices.shape + a.shape[1:], indices=indices)

    # --- execution ---
    def evaluate(self, bindings: Mapping[str, Any], outputs: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
        """Run the graph on named inputs/parameters and return the requested outputs."""
        values: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        for node in self.nodes:
            if node.op in ("input", "param"):
                if node.name not in bindings:
                    raise GraphError(f"{self.name}: {node.op} {node.name!r} is not bound")
                value = np.asarray(bindings[node.name], dtype=DTYPE)
                if value.shape != node.shape:
                    raise ShapeError(f"bind {node.name}", "bound tensor has the wrong shape", [value.shape, node.shape])
            elif node.op == "const":
                value = node.attrs["value"]
            else:
                forward = OPS[node.op][0]
                try:
                    value = forward([values[i] for i in node.inputs], node.attrs)
                except GraphError as exc:
                    raise GraphError(f"{self.name}: node {node.index} ({node.op}): {exc}")
            values[node.index] = value
        self._values = values
        names = list(outputs) if outputs is not None else list(self.outputs)
        missing = [n for n in names if n not in self.outputs]
        if missing:
            raise GraphError(f"{self.name}: unknown outputs {missing}")
        return {name: values[self.outputs[name]] for name in names}

    def release(self):
        """Drop cached intermediates; backward needs a fresh evaluate afterwards."""
        self._values = None

    def value(self, var: Var) -> np.ndarray:
        if self._values is None:
            raise GraphError(f"{self.name}: evaluate must run before reading values")
        return self._values[var.index]

    def backward(self, output: str, seed: Optional[Any] = None,
                 wrt_inputs: Sequence[str] = ()) -> Dict[str, np.ndarray]:
        """Gradients of `seed . output` for every parameter (zeros when unused) and requested inputs."""
        if self._values is None:
            raise GraphError(f"{self.name}: backward called before evaluate")
        if output not in self.outputs:
            raise GraphError(f"{self.name}: unknown output {output!r}")
        out_index = self.outputs[output]
        out_shape = self.nodes[out_index].shape
        seed = np.ones(out_shape, dtype=DTYPE) if seed is None else np.asarray(seed, dtype=DTYPE)
        if seed.shape != out_shape:
            raise ShapeError("backward", "seed shape differs from output shape", [seed.shape, out_shape])

        wanted = set(self.params.values()) | {self.inputs[n] for n in wrt_inputs}
        needs = [False] * len(self.nodes)
        for node in self.nodes:
            needs[node.index] = node.index in wanted or any(needs[i] for i in node.inputs)

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[out_index] = seed
        values = self._values
        for node in reversed(self.nodes[:out_index + 1]):
            g = grads[node.index]
            if g is None or node.op in LEAVES:
                continue
            xs = [values[i] for i in node.inputs]
            in_needs = [needs[i] for i in node.inputs]
            if not any(in_needs):
                continue
            backward_fn = OPS[node.op][1]
            for i, gi in zip(node.inputs, backward_fn(g, xs, values[node.index], node.attrs, in_needs)):
                if gi is None or not needs[i]:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi

        result = {}
        for name, index in self.params.items():
            g = grads[index]
            result[name] = np.zeros(self.nodes[index].shape, dtype=DTYPE) if g is None else np.asarray(g, dtype=DTYPE)
        for name in wrt_inputs:
            index = self.inputs[name]
            g = grads[index]
            result[name] = np.zeros(self.nodes[index].shape, dtype=DTYPE) if g is None else np.asarray(g, dtype=DTYPE)
        return result


def evaluate(graph: ComputeGraph, bindings: Mapping[str, Any], outputs: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    return graph.evaluate(bindings, outputs)


def backward(graph: ComputeGraph, output: str, seed: Optional[Any] = None, wrt_inputs: Sequence[str] = ()) -> Dict[str, np.ndarray]:
    return graph.backward(output, seed, wrt_inputs)


def gradcheck(graph: ComputeGraph, point: Mapping[str, Any], output: str, epsilon: float = 1e-5,
              params: Optional[Sequence[str]] = None, wrt_inputs: Sequence[str] = (),
              max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Max over checked entries of |analytic - numeric| / max(1, |numeric|).

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. `max_entries` caps the entries checked per
    tensor (chosen with a seeded generator).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    rng = np.random.default_rng(seed)
    bindings = {name: np.array(value, dtype=DTYPE) for name, value in point.items()}
    out = graph.evaluate(bindings, [output])[output]
    projection = np.ones(out.shape) if out.ndim == 0 else rng.standard_normal(out.shape)
    analytic = graph.backward(output, projection, wrt_inputs)

    def objective() -> float:
        return float(np.sum(projection * graph.evaluate(bindings, [output])[output]))

    names = list(params) if params is not None else list(graph.params)
    names += list(wrt_inputs)
    worst = 0.0
    for name in names:
        tensor = bindings[name]
        flat = tensor.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        grad = analytic[name].reshape(-1)
        for idx in entries:
            original = flat[idx]
            flat[idx] = original + epsilon
            upper = objective()
            flat[idx] = original - epsilon
            lower = objective()
            flat[idx] = original
            numeric = (upper - lower) / (2.0 * epsilon)
            worst = max(worst, abs(grad[idx] - numeric) / max(1.0, abs(numeric)))
    graph.evaluate(bindings)
    return worst


# --- Parameters, checkpoints and optimisation ---

class ParameterSet:
    """Ordered name -> float64 tensor mapping; the unit of checkpointing."""

    def __init__(self, tensors: Optional[Mapping[str, Any]] = None):
        self._tensors: Dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Any):
        self._tensors[name] = np.array(value, dtype=DTYPE)

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(self._tensors)

    def copy(self) -> "ParameterSet":
        return ParameterSet({name: value.copy() for name, value in self._tensors.items()})

    def subset(self, prefix: str) -> "ParameterSet":
        return ParameterSet({n: v for n, v in self._tensors.items() if n.startswith(prefix)})

    def update(self, other: Mapping[str, Any]):
        for name, value in other.items():
            self[name] = value

    def size(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def equals(self, other: "ParameterSet") -> bool:
        """Bitwise equality of names, shapes and payloads."""
        if self.names() != other.names():
            return False
        return all(self[n].shape == other[n].shape and self[n].tobytes() == other[n].tobytes() for n in self)

    def to_bytes(self) -> bytes:
        chunks = [CHECKPOINT_MAGIC]
        for name, value in self._tensors.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF or value.ndim > 0xFF:
                raise CheckpointError(f"tensor {name!r} cannot be stored in a TEEG1 container")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", value.ndim))
            chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
            chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterSet":
        if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"unknown checkpoint magic {blob[:len(CHECKPOINT_MAGIC)]!r}")
        params = cls()
        offset = len(CHECKPOINT_MAGIC)
        try:
            while offset < len(blob):
                (name_len,) = struct.unpack_from("<H", blob, offset)
                offset += 2
                name = blob[offset:offset + name_len].decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<B", blob, offset)
                offset += 1
                dims = struct.unpack_from(f"<{rank}I", blob, offset)
                offset += 4 * rank
                count = int(np.prod(dims)) if rank else 1
                if offset + 8 * count > len(blob):
                    raise CheckpointError(f"tensor {name!r} payload truncated at byte {offset}")
                params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims)
                offset += 8 * count
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint at byte {offset}: {exc}")
        return params

    def save(self, path: str):
        with open(path, "wb") as f:
            f.write(self.to_bytes())
        logger.info(f"Saved {len(self)} tensors ({self.size()} values) to {path}")

    @classmethod
    def load(cls, path: str) -> "ParameterSet":
        try:
            with open(path, "rb") as f:
                blob = f.read()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        return cls.from_bytes(blob)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


class AdamOptimizer:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet, grads: Mapping[str, np.ndarray]):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name in params:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            params[name] = params[name] - self.lr * update
