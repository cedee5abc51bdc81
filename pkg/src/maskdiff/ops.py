"""Differentiable primitives over :class:`~maskdiff.autograd.Tensor`.

Every function takes tensors (or array-likes, treated as constants), returns a
new tensor, and registers a backward closure when gradients are needed.
Broadcasting follows numpy rules for the elementwise ops only.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import kernels
from .autograd import SliceGrad, Tensor, as_tensor, grad_enabled, make_result
from .errors import DimensionError, TokenIndexError

__all__ = [
    "add", "sub", "mul", "matmul", "affine_map", "exp", "silu", "softplus", "sigmoid",
    "elementwise", "sum", "mean", "reshape", "transpose", "flip", "narrow", "softmax",
    "log_softmax", "cross_entropy", "layer_normalize", "embedding", "linear_recurrence_scan",
    "selective_scan", "causal_conv1d", "rotary", "attention",
]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain (optionally batched) matrix product ``a @ b``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def affine_map(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for ``x: [..., m]``, ``W: [m, n]``, ``b: [n]``."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"affine_map: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"affine_map: bias {b.shape} does not match W {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y += b.data
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, (g2.sum(axis=0) if b.requires_grad else None)

    return make_result(y.reshape(*lead, W.shape[1]), parents, backward, "affine_map")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows, unlike 1 / (1 + exp(-x))
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return make_result(y, (x,), backward, "exp")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_result(y, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return make_result(x.data * s, (x,), backward, "silu")


def softplus(x: Tensor) -> Tensor:
    """``log(1 + e^x)``; exact identity ``x`` above 30 avoids overflow."""
    xd = x.data
    y = np.where(xd > 30.0, xd, np.log1p(np.exp(np.minimum(xd, 30.0))))

    def backward(g):
        return (g * _sigmoid(xd),)

    return make_result(y.astype(xd.dtype, copy=False), (x,), backward, "softplus")


def elementwise(kind: str, *args) -> Tensor:
    unary = {"silu": silu, "softplus": softplus, "exp": exp, "sigmoid": sigmoid}
    binary = {"mul": mul, "add": add, "sub": sub}
    if kind in unary:
        (x,) = args
        return unary[kind](as_tensor(x))
    if kind in binary:
        a, b = args
        return binary[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(y, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    y = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(y, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


def flip(x: Tensor, axis: int) -> Tensor:
    def backward(g):
        return (np.ascontiguousarray(np.flip(g, axis)),)

    return make_result(np.ascontiguousarray(np.flip(x.data, axis)), (x,), backward, "flip")


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` of the last axis."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(f"narrow: [{start}, {stop}) outside last axis of {x.shape}")

    def backward(g):
        return (SliceGrad(start, stop, g),)

    return make_result(np.ascontiguousarray(x.data[..., start:stop]), (x,), backward, "narrow")


def _check_last_dim(x: Tensor, op: str) -> None:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"{op}: last dimension must be nonempty, got shape {x.shape}")


def softmax(x: Tensor) -> Tensor:
    _check_last_dim(x, "softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    _check_last_dim(x, "log_softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return make_result(y, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-position ``-log softmax(logits)[target]`` via log-sum-exp.

    ``logits: [..., V]`` and integer ``targets: [...]``; returns ``[...]``.
    """
    _check_last_dim(logits, "cross_entropy")
    V = logits.shape[-1]
    tgt = np.asarray(targets)
    if tgt.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {tgt.shape} vs logits {logits.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise TokenIndexError(f"cross_entropy: target ids must lie in [0, {V})")
    z = logits.data.reshape(-1, V)
    t = tgt.reshape(-1)
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = lse - shifted[rows, t]

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        p *= g.reshape(-1, 1)
        return (p.reshape(logits.shape),)

    return make_result(loss.reshape(tgt.shape), (logits,), backward, "cross_entropy")


def layer_normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis (no learned affine)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    _check_last_dim(x, "layer_normalize")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return make_result(y.astype(x.dtype, copy=False), (x,), backward, "layer_normalize")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TokenIndexError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_result(table.data[ids], (table,), backward, "embedding")


def _as_batched(t: Tensor, ndim: int) -> np.ndarray:
    return np.ascontiguousarray(t.data if t.ndim == ndim + 1 else t.data[None])


def linear_recurrence_scan(a: Tensor, b: Tensor, h0: Tensor) -> Tensor:
    """Elementwise first-order recurrence ``h_i = a_i * h_{i-1} + b_i``.

    ``a, b: [L, d]`` (or ``[B, L, d]``) and ``h0: [d]`` (or ``[B, d]``).
    Returns all states ``h_1..h_L``. The backward pass runs the adjoint
    recurrence in reverse rather than unrolling the loop into the graph.
    """
    a, b, h0 = as_tensor(a), as_tensor(b), as_tensor(h0)
    if a.shape != b.shape or a.ndim not in (2, 3) or h0.shape != a.shape[:-2] + a.shape[-1:]:
        raise DimensionError(f"linear_recurrence_scan: a {a.shape}, b {b.shape}, h0 {h0.shape}")
    if not (a.dtype == b.dtype == h0.dtype):
        raise TypeError("linear_recurrence_scan: inputs must share a precision")
    A = _as_batched(a, 2)
    Bv = _as_batched(b, 2)
    H0 = np.ascontiguousarray(h0.data if h0.ndim == 2 else h0.data[None])
    h = kernels.linear_scan_fwd(A, Bv, H0)

    def backward(g):
        G = np.ascontiguousarray(g if g.ndim == 3 else g[None])
        ga, gb, gh0 = kernels.linear_scan_bwd(A, h, H0, G)
        if a.ndim == 2:
            ga, gb, gh0 = ga[0], gb[0], gh0[0]
        return ga, gb, gh0

    return make_result(h if a.ndim == 3 else h[0], (a, b, h0), backward, "linear_recurrence_scan")


def selective_scan(decay: Tensor, drive: Tensor, Bm: Tensor, C: Tensor) -> Tensor:
    """Fused diagonal selective scan with a rank-one input map and readout.

    With per-channel decay ``decay: [B, L, D]``, drive ``drive: [B, L, D]``
    and input/readout vectors ``Bm, C: [B, L, N]``, the state ``h: [D, N]``
    evolves as ``h_i = decay_i[:, None] * h_{i-1} + drive_i[:, None] * Bm_i[None, :]``
    from ``h_0 = 0`` and the output is ``y_i = h_i @ C_i``. Equivalent to
    :func:`linear_recurrence_scan` over ``D * N`` channels followed by a
    contraction, without materialising the expanded inputs.
    """
    if decay.shape != drive.shape or decay.ndim != 3 or Bm.shape != C.shape or Bm.shape[:2] != decay.shape[:2]:
        raise DimensionError(
            f"selective_scan: decay {decay.shape}, drive {drive.shape}, B {Bm.shape}, C {C.shape}"
        )
    arrs = [np.ascontiguousarray(t.data) for t in (decay, drive, Bm, C)]
    record = grad_enabled() and any(t.requires_grad for t in (decay, drive, Bm, C))
    y, hs = kernels.selective_scan_fwd(*arrs, store_states=record)

    def backward(g):
        return kernels.selective_scan_bwd(*arrs, hs, np.ascontiguousarray(g))

    return make_result(y, (decay, drive, Bm, C), backward, "selective_scan")


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, reverse: bool = False) -> Tensor:
    """Depthwise 1-D convolution along the sequence axis of ``x: [B, L, d]``.

    ``w: [k, d]``. Causal: ``y_i = sum_j w_j * x_{i-k+1+j}`` with zero padding;
    ``reverse=True`` gives the anti-causal mirror.
    """
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[2]:
        raise DimensionError(f"causal_conv1d: x {x.shape}, w {w.shape}")
    k = w.shape[0]
    L = x.shape[1]
    xd = np.flip(x.data, 1) if reverse else x.data
    pad = np.concatenate([np.zeros((x.shape[0], k - 1, x.shape[2]), x.dtype), xd], axis=1)
    y = np.zeros_like(xd)
    for j in range(k):
        y += w.data[j] * pad[:, j:j + L]
    if b is not None:
        y += b.data
    out = np.ascontiguousarray(np.flip(y, 1)) if reverse else y
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gd = np.flip(g, 1) if reverse else g
        gpad = np.zeros_like(pad)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gpad[:, j:j + L] += w.data[j] * gd
            gw[j] = (gd * pad[:, j:j + L]).sum(axis=(0, 1))
        gx = gpad[:, k - 1:]
        gx = np.ascontiguousarray(np.flip(gx, 1)) if reverse else gx
        if b is None:
            return gx, gw
        return gx, gw, gd.sum(axis=(0, 1))

    return make_result(out, parents, backward, "causal_conv1d")


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs ``(j, j + dh/2)`` of ``x: [..., L, dh]`` by per-position angles."""
    half = x.shape[-1] // 2
    if x.shape[-1] % 2 or cos.shape != (x.shape[-2], half):
        raise DimensionError(f"rotary: x {x.shape} with tables {cos.shape}")
    x1, x2 = x.data[..., :half], x.data[..., half:]
    y = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return make_result(y, (x,), backward, "rotary")


_ATTN_CHUNK_ELEMS = 1 << 23


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Unmasked scaled dot-product attention over ``[..., L, dh]`` operands.

    Without a graph to record, queries are processed in blocks so the score
    matrix never exceeds a fixed element budget.
    """
    if q.shape != k.shape or q.shape != v.shape or q.ndim < 2:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    kT = np.swapaxes(kd, -1, -2)
    record = grad_enabled() and any(t.requires_grad for t in (q, k, v))
    L = q.shape[-2]
    lead = int(np.prod(q.shape[:-2], dtype=np.int64))
    if record:
        chunk = L
    else:
        chunk = max(1, min(L, _ATTN_CHUNK_ELEMS // max(1, lead * L)))
    out = np.empty_like(qd)
    probs = None
    for s in range(0, L, chunk):
        sc = (qd[..., s:s + chunk, :] @ kT) * scale
        sc -= sc.max(axis=-1, keepdims=True)
        np.exp(sc, out=sc)
        sc /= sc.sum(axis=-1, keepdims=True)
        out[..., s:s + chunk, :] = sc @ vd
        if record:
            probs = sc

    def backward(g):
        gv = np.swapaxes(probs, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True)) * scale
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    return make_result(out, (q, k, v), backward, "attention")
