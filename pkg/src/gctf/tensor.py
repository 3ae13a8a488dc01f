"""Dense numpy arrays with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` holding references to its inputs and a
closure that maps the output gradient to input gradients. :func:`backward`
walks the graph in reverse topological order. Leaf tensors that require
gradients accumulate into ``.grad``; intermediates only do so when
``retain_grad()`` was called on them.
"""

from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"float64": np.float64, "float32": np.float32}
_state = {"dtype": np.float64, "grad_enabled": True, "check_finite": True}


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference, finite differences)."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def grad_enabled() -> bool:
    return _state["grad_enabled"]


def _check(arr: np.ndarray, what: str) -> None:
    # a single reduction is NaN/Inf iff some element is (or the sum overflows)
    if _state["check_finite"] and not np.isfinite(np.add.reduce(arr, axis=None)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_retain")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        if isinstance(data, np.ndarray) and data.dtype == get_dtype():
            arr = data
        else:
            arr = np.asarray(data, dtype=get_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, dtype=get_dtype()), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result and register its gradient rule.

    ``backward_fn(g)`` returns one gradient (or None) per parent.
    """
    _check(data, op)
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return make(out, (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-sided form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_ACTIVATIONS = {"sigmoid": sigmoid, "silu": silu, "softplus": softplus, "exp": exp, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.outer(ad, g) if bd.ndim == 2 else ad[:, None] * g[..., None, :]
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make(a.data @ b.data, (a, b), bw, "matmul")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    return make(out, (a,), lambda g: (np.expand_dims(g, axis) * e / s,), "logsumexp")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make(s, (a,), bw, "softmax")


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale-only normalisation over the last axis."""
    r = (mean(x * x, axis=-1, keepdims=True) + eps) ** -0.5
    return x * r * scale


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return make(np.array(a.data[idx]), (a,), bw, "getitem")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; with a permutation this is a reorder."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (out,)

    return make(np.take(a.data, indices, axis=axis), (a,), bw, "take")


def flip(a: Tensor, axis: int) -> Tensor:
    return make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    n = len(tensors)
    return make(np.stack([t.data for t in tensors], axis=axis), tensors,
                lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(sl)))
        start += n
    return out


# ---------------------------------------------------------------------------
# convolutions


def conv(x: Tensor, kernel: Tensor, mode: str, bias: Tensor | None = None) -> Tensor:
    """Two convolution flavours the architecture needs.

    ``depthwise-1d-causal``: x [..., L, C], kernel [C, K];
    out[i] = sum_k kernel[:, k] * x[i - k], zero left padding, so a kernel of
    [1, 0, ..., 0] is the identity and the output keeps length L.

    ``patchify-3d``: x [..., 3, T, H, W], kernel [C, 3, pt, ph, pw]; stride equals
    the patch so patches don't overlap. Output [..., L, C] with tokens in
    (frame, row, col) raster order.
    """
    if mode == "depthwise-1d-causal":
        out = _depthwise_causal(x, kernel)
    elif mode == "patchify-3d":
        out = _patchify(x, kernel)
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    return out if bias is None else out + bias


def _depthwise_causal(x: Tensor, kernel: Tensor) -> Tensor:
    C, K = kernel.shape
    if x.shape[-1] != C:
        raise ValueError(f"depthwise conv: {x.shape[-1]} channels vs kernel {kernel.shape}")
    L = x.shape[-2]
    xp = np.zeros(x.shape[:-2] + (L + K - 1, C), dtype=x.data.dtype)
    xp[..., K - 1:, :] = x.data
    w = kernel.data
    out = np.zeros_like(x.data)
    for k in range(K):
        s = K - 1 - k
        out += xp[..., s:s + L, :] * w[:, k]

    def bw(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for k in range(K):
            s = K - 1 - k
            gx[..., s:s + L, :] += g * w[:, k]
            gw[:, k] = (g * xp[..., s:s + L, :]).reshape(-1, C).sum(axis=0)
        return gx[..., K - 1:, :], gw

    return make(out, (x, kernel), bw, "conv1d")


def _patchify(x: Tensor, kernel: Tensor) -> Tensor:
    C, cin, pt, ph, pw = kernel.shape
    *lead, c, T, H, W = x.shape
    if c != cin:
        raise ValueError(f"patchify: input has {c} channels, kernel expects {cin}")
    if T % pt or H % ph or W % pw:
        raise ValueError(f"video {T}x{H}x{W} not divisible by patch {pt}x{ph}x{pw}")
    t, h, w = T // pt, H // ph, W // pw
    lead = tuple(lead)
    nl = len(lead)
    # [..., c, t, pt, h, ph, w, pw] -> [..., t, h, w, c, pt, ph, pw]
    xr = x.data.reshape(lead + (c, t, pt, h, ph, w, pw))
    perm = tuple(range(nl)) + tuple(nl + i for i in (1, 3, 5, 0, 2, 4, 6))
    patches = np.transpose(xr, perm).reshape(lead + (t * h * w, c * pt * ph * pw))
    wm = kernel.data.reshape(C, -1)
    out = patches @ wm.T

    def bw(g):
        gw = (g.reshape(-1, C).T @ patches.reshape(-1, patches.shape[-1])).reshape(kernel.shape)
        gp = (g @ wm).reshape(lead + (t, h, w, c, pt, ph, pw))
        gx = np.transpose(gp, tuple(np.argsort(perm))).reshape(x.shape)
        return gx, gw

    return make(out, (x, kernel), bw, "patchify")


# ---------------------------------------------------------------------------
# differentiation


def _topo(root: Tensor) -> list[Tensor]:
    order, seen, stack_ = [], set(), [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            _check(g, f"gradient of {node!r}")
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Parameter], eps: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None,
                      richardson: bool = False) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` re-evaluates the scalar loss from the current parameter values. The
    error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    ``max_coords`` limits the check to a random subset of coordinates per
    parameter (all coordinates when None). ``richardson`` combines the central
    differences at eps and eps/2 as (4 D(eps/2) - D(eps)) / 3, cancelling the
    eps^2 truncation term so a larger eps (less roundoff) stays accurate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    if any(p.data.dtype != np.float64 for p in params):
        raise ValueError("gradient checks need 64-bit parameters")
    for p in params:
        p.zero_grad()
    loss = f()
    _check(loss.data, "finite_diff_check objective")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            for i in coords:
                num = _central(f, flat, i, eps)
                if richardson:
                    num = (4.0 * _central(f, flat, i, eps / 2) - num) / 3.0
                ana = ga.reshape(-1)[i]
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


def _central(f, flat: np.ndarray, i: int, eps: float) -> float:
    orig = flat[i]
    flat[i] = orig + eps
    fp = f().item()
    flat[i] = orig - eps
    fm = f().item()
    flat[i] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NonFiniteError("finite_diff_check objective went non-finite")
    return (fp - fm) / (2 * eps)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"GCTFCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: Iterable[Parameter]) -> None:
    """Write a version header, a JSON manifest and little-endian value blocks."""
    params = list(params)
    manifest = [{"name": p.name, "shape": list(p.shape), "precision": str(p.data.dtype)} for p in params]
    header = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for p in params:
            fh.write(p.data.astype(p.data.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    manifest = json.loads(blob[off:off + hlen])
    off += hlen
    out = {}
    for entry in manifest:
        dt = np.dtype(entry["precision"]).newbyteorder("<")
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(entry["shape"])
        out[entry["name"]] = arr.astype(dt.newbyteorder("="))
        off += n * dt.itemsize
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after last block")
    return out
