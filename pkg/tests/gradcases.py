"""Randomized gradient-check cases shared by the unit and acceptance suites.

Each case maps an rng to ``(f, params)`` where ``f()`` returns a scalar and
``params`` are double-precision leaves. Non-scalar outputs are reduced with
a fixed random weighting so every output element contributes.
"""

import numpy as np

from maskdiff import ops
from maskdiff.autograd import Tensor
from maskdiff.diffusion import NoiseSchedule, mdm_loss
from maskdiff.model import DenoiserModel, ModelConfig, rope_tables


def P(rng, *shape, scale=1.0, low=None, high=None):
    if low is not None:
        data = rng.uniform(low, high, shape)
    else:
        data = rng.standard_normal(shape) * scale
    return Tensor(data, requires_grad=True)


def weighted(out_fn, rng):
    """Scalar ``sum(out * R)`` for a fixed random ``R`` shaped like the output."""
    cache = {}

    def f():
        out = out_fn()
        if "R" not in cache:
            cache["R"] = rng.standard_normal(out.shape)
        return ops.sum(ops.mul(out, cache["R"]))

    return f


def _case(build):
    def make(rng):
        params, out_fn = build(rng)
        return weighted(out_fn, rng), params
    return make


def _add(rng):
    a, b = P(rng, 3, 4), P(rng, 4)
    return [a, b], lambda: ops.add(a, b)


def _sub(rng):
    a, b = P(rng, 2, 3, 4), P(rng, 3, 1)
    return [a, b], lambda: ops.sub(a, b)


def _mul(rng):
    a, b = P(rng, 3, 4), P(rng, 3, 4)
    return [a, b], lambda: ops.mul(a, b)


def _matmul(rng):
    a, b = P(rng, 3, 4), P(rng, 4, 5)
    return [a, b], lambda: ops.matmul(a, b)


def _affine(rng):
    x, W, b = P(rng, 2, 3, 4), P(rng, 4, 5), P(rng, 5)
    return [x, W, b], lambda: ops.affine_map(x, W, b)


def _unary(name, low=-3.0, high=3.0):
    def build(rng):
        x = P(rng, 3, 5, low=low, high=high)
        return [x], lambda: ops.elementwise(name, x)
    return build


def _softplus_wide(rng):
    # both sides of the linear cutoff; far-negative inputs are left out
    # because their gradients fall below difference-quotient noise
    x = Tensor(np.concatenate([rng.uniform(-5, 5, (2, 6)), rng.uniform(25, 40, (2, 6))]), requires_grad=True)
    return [x], lambda: ops.softplus(x)


def _sum(rng):
    x = P(rng, 3, 4, 5)
    return [x], lambda: ops.sum(x, axis=1, keepdims=True)


def _mean(rng):
    x = P(rng, 3, 4, 5)
    return [x], lambda: ops.mean(x, axis=(0, 2))


def _reshape(rng):
    x = P(rng, 3, 4)
    return [x], lambda: ops.reshape(x, (2, 6))


def _transpose(rng):
    x = P(rng, 2, 3, 4)
    return [x], lambda: ops.transpose(x, (2, 0, 1))


def _flip(rng):
    x = P(rng, 2, 5, 3)
    return [x], lambda: ops.flip(x, 1)


def _narrow(rng):
    x = P(rng, 2, 3, 7)
    return [x], lambda: ops.narrow(x, 2, 5)


def _softmax(rng):
    x = P(rng, 3, 6, scale=2.0)
    return [x], lambda: ops.softmax(x)


def _log_softmax(rng):
    x = P(rng, 3, 6, scale=2.0)
    return [x], lambda: ops.log_softmax(x)


def _cross_entropy(rng):
    x = P(rng, 2, 4, 7, scale=2.0)
    tgt = rng.integers(0, 7, (2, 4))
    return [x], lambda: ops.cross_entropy(x, tgt)


def _layer_norm(rng):
    x = P(rng, 3, 8, scale=2.0)
    return [x], lambda: ops.layer_normalize(x, 1e-5)


def _embedding(rng):
    table = P(rng, 6, 4)
    ids = rng.integers(0, 6, (2, 5))
    return [table], lambda: ops.embedding(table, ids)


def _linear_scan(rng):
    a, b, h0 = P(rng, 2, 6, 3, low=-1.0, high=1.0), P(rng, 2, 6, 3), P(rng, 2, 3)
    return [a, b, h0], lambda: ops.linear_recurrence_scan(a, b, h0)


def _selective_scan(rng):
    dec = P(rng, 2, 6, 3, low=0.1, high=1.0)
    drv, Bm, C = P(rng, 2, 6, 3), P(rng, 2, 6, 4), P(rng, 2, 6, 4)
    return [dec, drv, Bm, C], lambda: ops.selective_scan(dec, drv, Bm, C)


def _conv(rng):
    rev = bool(rng.integers(0, 2))
    x, w, b = P(rng, 2, 6, 3), P(rng, 3, 3), P(rng, 3)
    return [x, w, b], lambda: ops.causal_conv1d(x, w, b, reverse=rev)


def _rotary(rng):
    x = P(rng, 2, 5, 6)
    cos, sin = rope_tables(5, 6, 10000.0, np.float64)
    return [x], lambda: ops.rotary(x, cos, sin)


def _attention(rng):
    q, k, v = P(rng, 2, 5, 4), P(rng, 2, 5, 4), P(rng, 2, 5, 4)
    return [q, k, v], lambda: ops.attention(q, k, v)


PRIMITIVES = {
    "add": _case(_add),
    "sub": _case(_sub),
    "mul": _case(_mul),
    "matmul": _case(_matmul),
    "affine_map": _case(_affine),
    "exp": _case(_unary("exp")),
    "sigmoid": _case(_unary("sigmoid", -8.0, 8.0)),
    "silu": _case(_unary("silu")),
    "softplus": _case(_unary("softplus")),
    "softplus_wide": _case(_softplus_wide),
    "sum": _case(_sum),
    "mean": _case(_mean),
    "reshape": _case(_reshape),
    "transpose": _case(_transpose),
    "flip": _case(_flip),
    "narrow": _case(_narrow),
    "softmax": _case(_softmax),
    "log_softmax": _case(_log_softmax),
    "cross_entropy": _case(_cross_entropy),
    "layer_normalize": _case(_layer_norm),
    "embedding": _case(_embedding),
    "linear_recurrence_scan": _case(_linear_scan),
    "selective_scan": _case(_selective_scan),
    "causal_conv1d": _case(_conv),
    "rotary": _case(_rotary),
    "attention": _case(_attention),
}


def tiny_hybrid(seed: int) -> DenoiserModel:
    """Two-layer hybrid (one SSM, one attention layer) in double precision.

    Zero-initialised projections would make many gradients vanish, so every
    parameter is redrawn from a random normal.
    """
    cfg = ModelConfig.for_backbone("hybrid", n_layers=2, K=1, d_model=8, d_head=4, d_state=3,
                                   vocab=7, context_len=6)
    model = DenoiserModel(cfg, seed=seed, precision="double")
    rng = np.random.default_rng(seed + 1000)
    for name, p in model.params.items():
        if name.endswith("a_log"):
            p.data[...] = np.log(rng.uniform(1.0, 4.0, p.shape))
        else:
            p.data[...] = rng.standard_normal(p.shape) * 0.4
    return model


def hybrid_loss_case(rng):
    model = tiny_hybrid(int(rng.integers(0, 2 ** 31)))
    x0 = rng.integers(0, model.n_classes, (2, 6))
    t = float(rng.uniform(0.3, 0.9))
    mask_seed = int(rng.integers(0, 2 ** 31))
    sched = NoiseSchedule()

    def f():
        return mdm_loss(model, x0, sched, np.random.default_rng(mask_seed), t=t).value

    return f, list(model.params.values())
