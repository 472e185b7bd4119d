"""Minimal reverse-mode array engine.

Every op takes :class:`Tensor` inputs and returns a new :class:`Tensor` that
remembers its parents and a closure computing parent gradients.  Gradients
accumulate into ``Tensor.grad`` and must be cleared explicitly with
:func:`zero_grad`.

Data is float32.  Float64 is accepted as well so that finite-difference
checks (:func:`grad_check`) can run at a precision where ``h = 1e-3`` is
meaningful; no op silently changes dtype on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def backward(self) -> None:
        backward(self)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: ops inside record no graph (inference)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- autodiff


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor requiring grad.

    Calling twice without :func:`zero_grad` adds the gradients together.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    sig = sig.astype(x.data.dtype, copy=False)
    out = x.data * sig

    def fn(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out, (x,), fn)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Explicit broadcast: ``x[n, c, h, w] + b[n, c]`` (or ``b[c]``)."""
    if x.data.ndim != 4:
        raise ShapeError(f"add_channel_bias: expected NCHW input, got {x.shape}")
    n, c = x.shape[:2]
    if b.shape == (c,):
        out = x.data + b.data[None, :, None, None]
        return _make(out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))))
    if b.shape == (n, c):
        out = x.data + b.data[:, :, None, None]
        return _make(out, (x, b), lambda g: (g, g.sum(axis=(2, 3))))
    raise ShapeError(f"add_channel_bias: bias {b.shape} does not fit {x.shape}")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate NCHW tensors along channels."""
    first = xs[0].shape
    for x in xs[1:]:
        if x.data.ndim != len(first) or any(
            x.shape[i] != first[i] for i in range(len(first)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {first} and {x.shape}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def fn(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _make(out, tuple(xs), fn)


def total(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                 lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                 lambda g: (np.full_like(x.data, g / n),))


# ---------------------------------------------------------------- layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[n, i] @ w[o, i].T + b[o]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        return _make(out, (x, w, b),
                     lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)))
    return _make(out, (x, w), lambda g: (g @ w.data, g.T @ x.data))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N, C, H, W]`` with ``w[O, C, K, K]``."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIKK kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd extent, got {kh}x{kw}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")
    k = kh
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape} and kernel {w.shape}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # im2col rows ordered (n, ho, wo), columns (c, ki, kj); reused by backward
    if k == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].transpose(0, 2, 3, 1)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5)
    cols = np.ascontiguousarray(cols).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, c, k, k)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            if k == 1 and stride == 1:
                gxp = np.ascontiguousarray(gcols[..., 0, 0].transpose(0, 3, 1, 2))
            else:
                gxp = np.zeros_like(xp)
                hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
                gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # n, c, ki, kj, ho, wo
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, fn)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), fn)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 4,
               eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine params must have shape ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    inv = inv.astype(x.data.dtype, copy=False)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    m = xg.shape[2]

    def fn(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv / m * (m * gxhat - gxhat.sum(axis=2, keepdims=True)
                        - xh * (gxhat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(n, c, h, w), ggamma, gbeta

    return _make(out, (x, gamma, beta), fn)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def fn(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _make(out, (pred, target), fn)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay}


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
               state: OptimState) -> None:
    """One AdamW update in place.

    Weight decay is decoupled: parameters shrink by ``lr * weight_decay``
    independently of the gradient.  A non-finite gradient aborts the step and
    leaves both parameters and state untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"adamw_step: gradient for unknown parameter {name!r}")
        if g is not None:
            if g.shape != params[name].shape:
                raise ShapeError(f"adamw_step: grad {name} has shape {g.shape}, "
                                 f"parameter {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"adamw_step: non-finite gradient in {name!r}")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        dt = p.data.dtype.type
        m = dt(b1) * m + dt(1.0 - b1) * g
        v = dt(b2) * v + dt(1.0 - b2) * (g * g)
        mhat = m / dt(bc1)
        vhat = v / dt(bc2)
        upd = mhat / (np.sqrt(vhat) + dt(state.eps))
        if state.weight_decay:
            p.data = p.data * dt(1.0 - state.lr * state.weight_decay)
        p.data = (p.data - dt(state.lr) * upd).astype(p.data.dtype, copy=False)
        state.m[name] = m
        state.v[name] = v
    state.step = t


# ---------------------------------------------------------------- checking


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if denom == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / denom)


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
               h: float = 1e-3, max_entries: int | None = 24, seed: int = 0,
               float64: bool = True) -> dict[str, float]:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must rebuild the graph from the current ``params`` each call.
    With ``float64`` the parameters are promoted for the duration of the
    check (and restored afterwards).  At most ``max_entries`` randomly chosen
    entries per parameter are probed.  Returns the per-parameter error of
    :func:`rel_error`.
    """
    saved = {k: p.data for k, p in params.items()}
    saved_flags = {k: p.requires_grad for k, p in params.items()}
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    try:
        for p in params.values():
            if float64:
                p.data = p.data.astype(np.float64)
            p.requires_grad = True
            p.grad = None
        backward(loss_fn())
        analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                    for k, p in params.items()}
        for k, p in params.items():
            flat = p.data.reshape(-1)
            if max_entries is None or flat.size <= max_entries:
                idx = np.arange(flat.size)
            else:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            num = np.empty(idx.size)
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                lp = float(loss_fn().data)
                flat[i] = old - h
                lm = float(loss_fn().data)
                flat[i] = old
                num[j] = (lp - lm) / (2.0 * h)
            report[k] = rel_error(analytic[k].reshape(-1)[idx], num)
    finally:
        for k, p in params.items():
            p.data = saved[k]
            p.requires_grad = saved_flags[k]
            p.grad = None
    return report


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(1.0 / fan_in)).astype(DTYPE)
