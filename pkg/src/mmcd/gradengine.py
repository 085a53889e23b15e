"""Small reverse-mode differentiation engine for fully convolutional nets.

Tensors are numpy-backed and image tensors use the NHWC layout
(batch, height, width, channels). The set of operations is exactly what the
coupled autoencoders and their losses need: 3x3 same-padding convolution,
leaky-ReLU, tanh, dropout, a handful of elementwise/reduction ops and a
batched matrix product. Gradients are propagated over the recorded graph by
:func:`backward`; only leaf tensors created with ``requires_grad=True``
accumulate into ``.grad``.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True
_KINK_PROBE: Optional[list] = None


class GraphError(RuntimeError):
    """Raised when backward is requested on something that was never computed."""


class NonFiniteGradientError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@contextlib.contextmanager
def activation_pattern():
    """Collect the sign masks of every leaky-ReLU evaluated inside the block.

    Finite-difference checks use it to skip steps that straddle a kink.
    """
    global _KINK_PROBE
    previous = _KINK_PROBE
    _KINK_PROBE = []
    try:
        yield _KINK_PROBE
    finally:
        _KINK_PROBE = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[Callable] = None,
        name: Optional[str] = None,
    ):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _bw)


def square(a: Tensor) -> Tensor:
    def _bw(g):
        return (2.0 * a.data * g,)

    return _make(a.data * a.data, (a,), _bw)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(out), (a,), _bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    s = sum(a, axis=axis, keepdims=keepdims)
    return mul(s, np.asarray(1.0 / count, dtype=a.dtype))


def reshape(a: Tensor, shape) -> Tensor:
    def _bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), _bw)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing."""
    def _bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), _bw)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), _bw)


def transpose_last(a: Tensor) -> Tensor:
    def _bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(a.data, -1, -2), (a,), _bw)


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------

_NARROW = 16  # channel count below which a full 9-shift im2col is cheap


def _cols9(x: np.ndarray) -> np.ndarray:
    """Full im2col: (B, H, W, 3, 3, C) with zero borders; entry [.., dy, dx, :] = x[i+dy-1, j+dx-1]."""
    b, h, w, c = x.shape
    cols = np.zeros((b, h, w, 3, 3, c), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            ys, xs = slice(max(0, 1 - dy), min(h, h + 1 - dy)), slice(max(0, 1 - dx), min(w, w + 1 - dx))
            yt, xt = slice(max(0, dy - 1), min(h, h + dy - 1)), slice(max(0, dx - 1), min(w, w + dx - 1))
            cols[:, ys, xs, dy, dx, :] = x[:, yt, xt, :]
    return cols


def _row_shifts(x: np.ndarray) -> np.ndarray:
    """Three horizontal shifts of x with a one-pixel zero frame: (B, H+2, W, 3*C).

    Rows dy..dy+H of the result are the im2col rows for kernel row dy.
    """
    b, h, w, c = x.shape
    r = np.zeros((b, h + 2, w, 3, c), dtype=x.dtype)
    r[:, 1:h + 1, 1:, 0, :] = x[:, :, :w - 1, :]
    r[:, 1:h + 1, :, 1, :] = x
    r[:, 1:h + 1, :w - 1, 2, :] = x[:, :, 1:, :]
    return r.reshape(b, h + 2, w, 3 * c)


def _correlate3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    cout = kernel.shape[3]
    if c <= _NARROW:
        return (_cols9(x).reshape(b * h * w, 9 * c) @ kernel.reshape(9 * c, cout)).reshape(b, h, w, cout)
    if cout <= _NARROW:
        # project first, then shift-add the nine narrow outputs
        y = (x.reshape(-1, c) @ kernel.transpose(2, 0, 1, 3).reshape(c, 9 * cout)).reshape(b, h, w, 3, 3, cout)
        out = np.zeros((b, h, w, cout), dtype=y.dtype)
        for dy in range(3):
            for dx in range(3):
                ys, xs = slice(max(0, 1 - dy), min(h, h + 1 - dy)), slice(max(0, 1 - dx), min(w, w + 1 - dx))
                yt, xt = slice(max(0, dy - 1), min(h, h + dy - 1)), slice(max(0, dx - 1), min(w, w + dx - 1))
                out[:, ys, xs, :] += y[:, yt, xt, dy, dx, :]
        return out
    r = _row_shifts(x)
    kr = kernel.reshape(3, 3 * c, cout)
    out = np.matmul(r[:, 0:h].reshape(b, h * w, 3 * c), kr[0])
    for dy in (1, 2):
        out += np.matmul(r[:, dy:dy + h].reshape(b, h * w, 3 * c), kr[dy])
    return out.reshape(b, h, w, cout)


def _kernel_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    b, h, w, cin = x.shape
    cout = g.shape[3]
    if cin <= _NARROW:
        cols = _cols9(x).reshape(b * h * w, 9 * cin)
        return (cols.T @ g.reshape(-1, cout)).reshape(3, 3, cin, cout)
    if cout <= _NARROW:
        # dK[dy,dx] = sum_q x[q] g[q - (dy-1, dx-1)], i.e. x against the flipped im2col of g
        gcols = _cols9(g).reshape(b * h * w, 9 * cout)
        dk = (x.reshape(-1, cin).T @ gcols).reshape(cin, 3, 3, cout)
        return np.ascontiguousarray(dk[:, ::-1, ::-1, :].transpose(1, 2, 0, 3))
    r = _row_shifts(x)
    g3 = g.reshape(b, h * w, cout)
    dk = np.empty((3, 3 * cin, cout), dtype=g.dtype)
    for dy in range(3):
        rv = r[:, dy:dy + h].reshape(b, h * w, 3 * cin)
        dk[dy] = np.matmul(rv.transpose(0, 2, 1), g3).sum(axis=0)
    return dk.reshape(3, 3, cin, cout)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 stride-1 cross-correlation with one pixel of zero padding.

    ``x`` is (B, H, W, Cin), ``kernel`` is (3, 3, Cin, Cout), ``bias`` is (Cout,).
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D NHWC tensor, got shape {x.shape}")
    if kernel.shape[:2] != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {kernel.shape[:2]}")
    cin = x.shape[3]
    if cin != kernel.shape[2]:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {kernel.shape[2]}")
    cout = kernel.shape[3]
    out = _correlate3(x.data, kernel.data)
    if bias is not None:
        out += bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bw(g):
        grads = [None, None]
        if x.requires_grad:
            # same-padding transpose conv == correlation with the flipped, transposed kernel
            flipped = np.ascontiguousarray(kernel.data[::-1, ::-1].transpose(0, 1, 3, 2))
            grads[0] = _correlate3(g, flipped)
        if kernel.requires_grad:
            grads[1] = _kernel_grad(x.data, g)
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return _make(out, parents, _bw)


def leaky_relu(x: Tensor, slope: float = 0.3) -> Tensor:
    # per-element derivative (1 or slope), reused as the forward multiplier
    positive = x.data >= 0
    if _KINK_PROBE is not None:
        _KINK_PROBE.append(positive)
    factor = positive.astype(x.dtype)
    factor *= x.dtype.type(1.0 - slope)
    factor += x.dtype.type(slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def tanh_act(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def _bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), _bw)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = rng.random(x.shape, dtype=np.float64 if x.dtype == np.float64 else np.float32) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.dtype) * scale
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(output: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Propagate ``grad`` (default 1 for scalars) from ``output`` to leaves.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if not output.requires_grad:
        raise GraphError("backward() called on a tensor with no recorded forward pass")
    if grad is None:
        if output.data.size != 1:
            raise GraphError("a gradient seed is required for non-scalar outputs")
        grad = np.ones_like(output.data)
    grad = np.asarray(grad, dtype=output.dtype)
    if grad.shape != output.shape:
        raise ValueError(f"seed shape {grad.shape} does not match output {output.shape}")

    pending: dict[int, np.ndarray] = {id(output): grad}
    for node in reversed(_topo_order(output)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

ACTIVATIONS = ("leaky-relu", "tanh", "none")


class ConvLayer:
    """3x3 same-padding convolution followed by an activation."""

    def __init__(self, cin: int, cout: int, activation: str = "leaky-relu", *,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE, slope: float = 0.3,
                 name: str = "conv"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        limit = math.sqrt(6.0 / (9 * cin + 9 * cout))  # Glorot uniform
        self.kernel = Tensor(rng.uniform(-limit, limit, size=(3, 3, cin, cout)).astype(dtype),
                             requires_grad=True, name=f"{name}.kernel")
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias")
        self.activation = activation
        self.slope = slope

    @property
    def cin(self) -> int:
        return self.kernel.shape[2]

    @property
    def cout(self) -> int:
        return self.kernel.shape[3]

    def parameters(self) -> list[Tensor]:
        return [self.kernel, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.kernel, self.bias)
        if self.activation == "leaky-relu":
            return leaky_relu(y, self.slope)
        if self.activation == "tanh":
            return tanh_act(y)
        return y


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    amsgrad: bool = False
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    v_max: list = field(default_factory=list)

    def ensure(self, params: Sequence[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
            if self.amsgrad:
                self.v_max = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient for {p.name or 'parameter'}; step aborted at t={state.t}")
    state.ensure(params)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.amsgrad:
            np.maximum(state.v_max[i], v, out=state.v_max[i])
            v_use = state.v_max[i]
        else:
            v_use = v
        step = (lr * (m / c1) / (np.sqrt(v_use / c2) + state.epsilon)).astype(p.dtype)
        p.data -= step


@dataclass(frozen=True)
class LrSchedule:
    """Staircase exponential decay: base * decay ** floor(epoch / every)."""

    base_rate: float = 1e-4
    decay_rate: float = 0.96
    decay_every: int = 1

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ValueError("base_rate must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")


def schedule_rate(s: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return s.base_rate * s.decay_rate ** (epoch // s.decay_every)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MMCDCKPT1\n"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, manifest: dict, arrays: Sequence[tuple[str, np.ndarray]]) -> None:
    """Write ``manifest`` plus named float32 arrays (little-endian) to ``path``."""
    manifest = dict(manifest)
    manifest["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    head = json.dumps(manifest, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(head)
        fh.write(b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing manifest terminator")
    try:
        manifest = json.loads(rest[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed manifest: {exc}") from exc
    payload = rest[nl + 1:]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest.get("arrays", []):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at array {entry['name']!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes after arrays")
    return manifest, arrays
