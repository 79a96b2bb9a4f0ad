"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of ops the track selector needs are provided. Every op
checks its output for NaN/Inf and raises :class:`NumericalError` instead of
letting non-finite values propagate.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, parents=(), backward=None, op="leaf", name=None, requires_grad=False):
        self.data = np.asarray(data)
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out, parents, backward, op):
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite values produced by {op}")
    return Tensor(out, parents, backward, op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# --- reductions and shape ----------------------------------------------------

def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    return mean(a, axis=axis)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        n = x.shape[-1]
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), backward, "layer_norm")


def cosine_sim(x: Tensor, y: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis (broadcasting over the rest).

    Norms are floored at ``eps``; an all-zero vector raises instead of
    silently producing 0.
    """
    x, y = _pair(x, y)
    nx = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    ny = np.sqrt((y.data * y.data).sum(axis=-1, keepdims=True))
    if np.any(nx == 0) or np.any(ny == 0):
        raise NumericalError("cosine similarity with a zero vector")
    nxc = np.maximum(nx, eps)
    nyc = np.maximum(ny, eps)
    dot = (x.data * y.data).sum(axis=-1, keepdims=True)
    out = dot / (nxc * nyc)

    def backward(g):
        g = g[..., None]
        # norm floor is inactive for the accepted inputs except at ||v|| < eps
        gx = g * (y.data / (nxc * nyc) - out * x.data / (nxc * nxc) * (nx >= eps))
        gy = g * (x.data / (nxc * nyc) - out * y.data / (nyc * nyc) * (ny >= eps))
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _make(out[..., 0], (x, y), backward, "cosine_sim")


def pointwise_and_reduce(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch by name to the elementwise / reduction ops."""
    table = {
        "sigmoid": sigmoid,
        "mean_axis": mean_axis,
        "add": add,
        "mul": mul,
        "cosine_sim": cosine_sim,
        "layer_norm": layer_norm,
    }
    if kind not in table:
        raise ValueError(f"unknown op kind {kind!r}")
    return table[kind](*args, **kwargs)


# --- temporal convolution ----------------------------------------------------

def conv_out_len(t: int, stride: int) -> int:
    return -(-t // stride)


def temporal_conv1d(x: Tensor, kernel: Tensor, stride: int, bias: Tensor) -> Tensor:
    """1D convolution along axis -2 with "same" zero padding.

    ``x`` is ``(..., T, Din)``, ``kernel`` is ``(k, Din, Dout)``; the output
    length is ``ceil(T / stride)``.
    """
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    t = x.shape[-2]
    if t == 0:
        raise ShapeError("temporal_conv1d on an empty sequence")
    k, din, dout = kernel.shape
    if x.shape[-1] != din or bias.shape != (dout,):
        raise ShapeError(f"conv: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    t_out = conv_out_len(t, stride)
    pad = max((t_out - 1) * stride + k - t, 0)
    left = pad // 2
    lead = x.shape[:-2]
    xp = np.zeros(lead + (t + pad, din), dtype=x.dtype)
    xp[..., left:left + t, :] = x.data
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[..., idx, :].reshape(lead + (t_out, k * din))
    w2 = kernel.data.reshape(k * din, dout)
    out = cols @ w2 + bias.data

    def backward(g):
        gw = (cols.reshape(-1, k * din).T @ g.reshape(-1, dout)).reshape(k, din, dout)
        gb = g.reshape(-1, dout).sum(axis=0)
        gcols = (g @ w2.T).reshape(lead + (t_out, k, din))
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[..., idx[:, j], :] += gcols[..., j, :]
        return gxp[..., left:left + t, :], gw, gb

    return _make(out, (x, kernel, bias), backward, "conv1d")


# --- attention ---------------------------------------------------------------

def multihead_attention(q: Tensor, k: Tensor, v: Tensor, params: Mapping[str, Tensor], heads: int) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads over axis -2.

    ``params`` holds ``wq, wk, wv, wo`` (D x D) and biases ``bq, bv, bo``.
    Keys carry no bias: softmax is invariant to it, so it could never learn.
    Leading axes of q/k/v are treated as batch axes.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    qp = matmul(q, params["wq"]) + params["bq"]
    kp = matmul(k, params["wk"])
    vp = matmul(v, params["wv"]) + params["bv"]

    def split(t):
        shape = t.shape[:-1] + (heads, dh)
        return swapaxes(reshape(t, shape), -2, -3)

    qh, kh, vh = split(qp), split(kp), split(vp)
    scores = matmul(qh, swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = softmax_axis(scores, axis=-1)
    ctx = swapaxes(matmul(attn, vh), -2, -3)
    ctx = reshape(ctx, ctx.shape[:-2] + (d,))
    return matmul(ctx, params["wo"]) + params["bo"]


# --- parameters and differentiation ------------------------------------------

class ParamStore:
    """Named learnable tensors plus their gradients."""

    def __init__(self, dtype: str = "float32", rng_seed: int = 0):
        if dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        self.dtype = dtype
        self.rng_seed = rng_seed
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPES[self.dtype]), name=name, requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {n[len(p):]: t for n, t in self.params.items() if n.startswith(p)}

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=DTYPES[self.dtype])
        if value.shape != self.params[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self.params[name].shape}")
        self.params[name].data = value

    def zero_grad(self) -> None:
        self.grads = {n: np.zeros_like(t.data) for n, t in self.params.items()}

    def astype(self, dtype: str) -> "ParamStore":
        out = ParamStore(dtype, self.rng_seed)
        for n, t in self.params.items():
            out.add(n, t.data)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def n_values(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, store: ParamStore | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    With a ``store``, its ``grads`` are overwritten: reached parameters get
    their gradient, unreached ones get zeros. Returns grads keyed by node id.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if store is not None:
        store.grads = {
            n: np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=t.dtype).reshape(t.shape)
            for n, t in store.items()
        }
    return grads


def grad_check(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    n_samples: int | None = 200,
    seed: int = 0,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between backward() and central finite differences.

    ``n_samples=None`` sweeps every coordinate; otherwise coordinates are
    drawn uniformly (without replacement) with a fixed seed.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    if store.dtype != "float64":
        raise ValueError("grad_check requires a float64 ParamStore")
    loss = f(store)
    if not np.isfinite(loss.data):
        raise NumericalError("objective is not finite")
    backward(loss, store)
    names = list(names) if names is not None else list(store)
    coords = [(n, i) for n in names for i in range(store[n].data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for name, i in coords:
        flat = store[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(store).data)
        flat[i] = orig - eps
        fm = float(f(store).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"objective not finite near {name}[{i}]")
        numeric = (fp - fm) / (2 * eps)
        analytic = float(store.grads[name].reshape(-1)[i])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
