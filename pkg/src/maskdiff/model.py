"""Denoiser backbones: bidirectional selective-scan, attention and hybrids.

A model is a flat ``dict[str, Tensor]`` of parameters plus a
:class:`ModelConfig`; the functions below are written against plain
parameter dicts so each sublayer can be exercised on its own.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np

from . import ops
from .autograd import PRECISIONS, Tensor
from .errors import ConfigError, DomainError

SSM = "SSM"
ATTN = "ATTN"
PATTERN_KINDS = ("attention_only", "ssm_only", "hybrid")
TIME_FEATURES = 128
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    n_layers: int = 6
    d_model: int = 128
    d_head: int = 32
    d_state: int = 16
    mlp_ratio: int = 2
    use_mlp: bool = True
    vocab: int = 258  # total ids including the mask id (the last one)
    context_len: int = 256
    pattern_kind: str = "ssm_only"
    K: int = 5
    d_cond: int = 0  # 0 means d_model
    rope_base: float = 10000.0

    def __post_init__(self):
        if not self.d_cond:
            self.d_cond = self.d_model
        self.validate()

    @classmethod
    def for_backbone(cls, pattern_kind: str, **kw) -> "ModelConfig":
        """Config with the halved MLP ratio convention: 4 for attention-only, 2 otherwise."""
        kw.setdefault("mlp_ratio", 4 if pattern_kind == "attention_only" else 2)
        return cls(pattern_kind=pattern_kind, **kw)

    def validate(self) -> None:
        if self.pattern_kind not in PATTERN_KINDS:
            raise ConfigError(f"pattern_kind must be one of {PATTERN_KINDS}, got {self.pattern_kind!r}")
        for name in ("n_layers", "d_model", "d_head", "d_state", "context_len", "d_cond"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.vocab < 2:
            raise ConfigError("vocab must count at least one data id plus the mask id")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be positive")
        if self.pattern_kind != "ssm_only":
            if self.d_model % self.d_head:
                raise ConfigError(f"d_model {self.d_model} not divisible by d_head {self.d_head}")
            if self.d_head % 2:
                raise ConfigError("d_head must be even for rotary encoding")
        if self.pattern_kind == "hybrid":
            if self.K < 1:
                raise ConfigError("hybrid needs K >= 1")
            if self.n_layers < self.K + 1:
                raise ConfigError(f"hybrid with K={self.K} needs at least {self.K + 1} layers, got {self.n_layers}")

    @property
    def n_classes(self) -> int:
        return self.vocab - 1

    @property
    def mask_id(self) -> int:
        return self.vocab - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerPattern:
    kinds: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.kinds)

    def attention_indices(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == ATTN]


def build_layer_pattern(config: ModelConfig) -> LayerPattern:
    """One attention layer after every ``K`` SSM layers for hybrids."""
    config.validate()
    n = config.n_layers
    if config.pattern_kind == "attention_only":
        return LayerPattern((ATTN,) * n)
    if config.pattern_kind == "ssm_only":
        return LayerPattern((SSM,) * n)
    period = config.K + 1
    return LayerPattern(tuple(ATTN if (i + 1) % period == 0 else SSM for i in range(n)))


# ---------------------------------------------------------------- sublayers


def timestep_features(t: np.ndarray, dtype=np.float64) -> np.ndarray:
    """128 sinusoidal features of ``t`` (scaled to [0, 1000])."""
    half = TIME_FEATURES // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[..., None] * 1000.0 * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1).astype(dtype)


def embed_timestep(t, params: dict[str, Tensor]) -> Tensor:
    """``tau_t = W2 silu(W1 feats(t) + b1) + b2``; ``t`` scalar or ``[B]``."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1) or not np.all(np.isfinite(t_arr)):
        raise DomainError(f"timestep must lie in [0, 1], got {t}")
    feats = Tensor(timestep_features(t_arr, params["w1"].dtype))
    h = ops.silu(ops.affine_map(feats, params["w1"], params["b1"]))
    return ops.affine_map(h, params["w2"], params["b2"])


def adaln(x: Tensor, tau: Tensor, w_cond: Tensor, eps: float = LN_EPS) -> Tensor:
    """Layer norm modulated channel-wise by ``1 + gamma_t`` and ``beta_t``.

    ``x: [B, L, d]`` and ``tau: [B, d_cond]`` (or unbatched ``[L, d]`` / ``[d_cond]``);
    ``(gamma_t, beta_t) = tau @ w_cond`` split in halves.
    """
    d = x.shape[-1]
    if w_cond.shape != (tau.shape[-1], 2 * d):
        raise ConfigError(f"w_cond {w_cond.shape} does not map {tau.shape[-1]} -> {2 * d}")
    mod = ops.affine_map(tau, w_cond)
    lead = mod.shape[:-1] + (1,) * (x.ndim - mod.ndim)
    gamma = ops.reshape(ops.narrow(mod, 0, d), lead + (d,))
    beta = ops.reshape(ops.narrow(mod, d, 2 * d), lead + (d,))
    return ops.add(ops.mul(ops.layer_normalize(x, eps), ops.add(gamma, 1.0)), beta)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


def ssm_mix_directional(x: Tensor, params: dict[str, Tensor], direction: str = "forward", fused: bool = True) -> Tensor:
    """Selective diagonal state-space mixer over ``x: [B, L, d]``.

    One input projection yields ``x~, z, dt, B, C``. With ``delta =
    softplus(dt)`` the per-channel decay is ``exp(-delta * exp(a_log))`` and the
    drive ``delta * x~``; the state ``[d, d_state]`` is scanned along the
    sequence (reversed for ``direction="backward"``), read out with ``C``,
    gated by ``silu(z)`` and projected back.

    ``fused=False`` runs the same computation through
    :func:`ops.linear_recurrence_scan` on the expanded ``d * d_state`` channels.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    x, squeeze = _batched(x)
    B, L, d = x.shape
    N = (params["w_in"].shape[1] - 3 * d) // 2
    if direction == "backward":
        x = ops.flip(x, 1)
    proj = ops.affine_map(x, params["w_in"], params["b_in"])
    xs = ops.narrow(proj, 0, d)
    z = ops.narrow(proj, d, 2 * d)
    delta = ops.softplus(ops.narrow(proj, 2 * d, 3 * d))
    Bm = ops.narrow(proj, 3 * d, 3 * d + N)
    C = ops.narrow(proj, 3 * d + N, 3 * d + 2 * N)
    rate = ops.exp(params["a_log"])
    decay = ops.exp(ops.mul(ops.mul(delta, rate), -1.0))
    drive = ops.mul(delta, xs)
    if fused:
        y = ops.selective_scan(decay, drive, Bm, C)
    else:
        ones = Tensor(np.ones((1, 1, 1, N), dtype=x.dtype))
        a = ops.reshape(ops.mul(ops.reshape(decay, (B, L, d, 1)), ones), (B, L, d * N))
        b = ops.reshape(ops.mul(ops.reshape(drive, (B, L, d, 1)), ops.reshape(Bm, (B, L, 1, N))), (B, L, d * N))
        h = ops.linear_recurrence_scan(a, b, Tensor(np.zeros((B, d * N), dtype=x.dtype)))
        h = ops.reshape(h, (B, L, d, N))
        y = ops.sum(ops.mul(h, ops.reshape(C, (B, L, 1, N))), axis=-1)
    y = ops.mul(y, ops.silu(z))
    out = ops.affine_map(y, params["w_out"])
    if direction == "backward":
        out = ops.flip(out, 1)
    if squeeze:
        out = ops.reshape(out, out.shape[1:])
    return out


def bidirectional_ssm_mix(x: Tensor, params_fwd: dict[str, Tensor], params_bwd: dict[str, Tensor], fused: bool = True) -> Tensor:
    """Sum of an independent forward scan and an independent backward scan."""
    return ops.add(
        ssm_mix_directional(x, params_fwd, "forward", fused),
        ssm_mix_directional(x, params_bwd, "backward", fused),
    )


_ROPE_CACHE: dict = {}


def rope_tables(L: int, d_head: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (L, d_head, base, np.dtype(dtype).str)
    if key not in _ROPE_CACHE:
        half = d_head // 2
        inv = base ** (-np.arange(half) / half)
        ang = np.arange(L)[:, None] * inv[None, :]
        if len(_ROPE_CACHE) > 32:
            _ROPE_CACHE.clear()
        _ROPE_CACHE[key] = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
    return _ROPE_CACHE[key]


def attention_mix(x: Tensor, params: dict[str, Tensor], d_head: int, rope_base: float = 10000.0, use_rotary: bool = True) -> Tensor:
    """Bidirectional multi-head attention with rotary positions on Q and K."""
    x, squeeze = _batched(x)
    B, L, d = x.shape
    if d % d_head:
        raise ConfigError(f"d_model {d} not divisible by d_head {d_head}")
    H = d // d_head
    qkv = ops.affine_map(x, params["w_qkv"])

    def heads(t: Tensor) -> Tensor:
        return ops.transpose(ops.reshape(t, (B, L, H, d_head)), (0, 2, 1, 3))

    q, k, v = (heads(ops.narrow(qkv, i * d, (i + 1) * d)) for i in range(3))
    if use_rotary:
        cos, sin = rope_tables(L, d_head, rope_base, x.dtype)
        q, k = ops.rotary(q, cos, sin), ops.rotary(k, cos, sin)
    o = ops.attention(q, k, v)
    o = ops.reshape(ops.transpose(o, (0, 2, 1, 3)), (B, L, d))
    out = ops.affine_map(o, params["w_out"])
    if squeeze:
        out = ops.reshape(out, out.shape[1:])
    return out


def mlp(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = ops.silu(ops.affine_map(x, params["w1"], params["b1"]))
    return ops.affine_map(h, params["w2"], params["b2"])


def diffusion_block(x: Tensor, tau: Tensor, params: dict[str, Tensor], kind: str, use_mlp: bool,
                    d_head: int = 32, rope_base: float = 10000.0) -> Tensor:
    """``y = Mixer(AdaLN(x)) + x`` then optionally ``y = MLP(AdaLN(y)) + y``.

    ``params`` holds sublayer dicts under ``norm1``, ``mixer`` (with ``fwd`` /
    ``bwd`` for SSM), and, with an MLP, ``norm2`` and ``mlp``.
    """
    h = adaln(x, tau, params["norm1"]["w_cond"])
    if kind == SSM:
        m = bidirectional_ssm_mix(h, params["mixer"]["fwd"], params["mixer"]["bwd"])
    elif kind == ATTN:
        m = attention_mix(h, params["mixer"], d_head, rope_base)
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    y = ops.add(m, x)
    if use_mlp:
        y = ops.add(mlp(adaln(y, tau, params["norm2"]["w_cond"]), params["mlp"]), y)
    return y


# ---------------------------------------------------------------- model


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_parameters(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh float64 parameter arrays keyed by dotted names.

    Projections are truncated-normal (std 0.02); every ``w_cond`` and every
    residual-branch output projection starts at zero.
    """
    rng = np.random.default_rng(seed)
    d, N, dc = config.d_model, config.d_state, config.d_cond
    p: dict[str, np.ndarray] = {
        "embed.weight": _trunc_normal(rng, (config.vocab, d)),
        "time.w1": _trunc_normal(rng, (TIME_FEATURES, dc)),
        "time.b1": np.zeros(dc),
        "time.w2": _trunc_normal(rng, (dc, dc)),
        "time.b2": np.zeros(dc),
    }
    for i, kind in enumerate(build_layer_pattern(config).kinds):
        pre = f"blocks.{i}"
        p[f"{pre}.norm1.w_cond"] = np.zeros((dc, 2 * d))
        if kind == SSM:
            for direction in ("fwd", "bwd"):
                q = f"{pre}.mixer.{direction}"
                p[f"{q}.w_in"] = _trunc_normal(rng, (d, 3 * d + 2 * N))
                b_in = np.zeros(3 * d + 2 * N)
                # step sizes log-uniform in [1e-3, 1e-1], stored through inverse softplus
                dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), d))
                b_in[2 * d:3 * d] = dt + np.log(-np.expm1(-dt))
                p[f"{q}.b_in"] = b_in
                p[f"{q}.a_log"] = np.log(rng.uniform(1.0, 16.0, d))
                p[f"{q}.w_out"] = np.zeros((d, d))
        else:
            p[f"{pre}.mixer.w_qkv"] = _trunc_normal(rng, (d, 3 * d))
            p[f"{pre}.mixer.w_out"] = np.zeros((d, d))
        if config.use_mlp:
            hidden = config.mlp_ratio * d
            p[f"{pre}.norm2.w_cond"] = np.zeros((dc, 2 * d))
            p[f"{pre}.mlp.w1"] = _trunc_normal(rng, (d, hidden))
            p[f"{pre}.mlp.b1"] = np.zeros(hidden)
            p[f"{pre}.mlp.w2"] = np.zeros((hidden, d))
            p[f"{pre}.mlp.b2"] = np.zeros(d)
    p["head.weight"] = _trunc_normal(rng, (d, config.n_classes))
    p["head.bias"] = np.zeros(config.n_classes)
    return p


def _nest(flat: dict[str, Tensor], prefix: str) -> dict:
    out: dict = {}
    for name, t in flat.items():
        if not name.startswith(prefix):
            continue
        node = out
        parts = name[len(prefix):].split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = t
    return out


class DenoiserModel:
    """``f_theta(x_t, t)``: embeddings, ``n_layers`` conditioned blocks, output head."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0, precision: str = "single"):
        self.config = config
        self.pattern = build_layer_pattern(config)
        arrays = init_parameters(config, seed) if params is None else params
        expected = init_parameters_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ConfigError(f"parameter set mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
        dtype = PRECISIONS[precision]
        self.params: dict[str, Tensor] = {}
        for name in expected:
            arr = np.asarray(arrays[name])
            if arr.shape != expected[name]:
                raise ConfigError(f"parameter {name} has shape {arr.shape}, expected {expected[name]}")
            self.params[name] = Tensor(np.array(arr, dtype=dtype), requires_grad=True, name=name)
        self._refresh_views()

    def _refresh_views(self) -> None:
        self._time = _nest(self.params, "time.")
        self._blocks = [_nest(self.params, f"blocks.{i}.") for i in range(self.config.n_layers)]

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def mask_id(self) -> int:
        return self.config.mask_id

    @property
    def precision(self) -> str:
        return next(iter(self.params.values())).precision

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def astype(self, precision: str) -> "DenoiserModel":
        return DenoiserModel(self.config, {k: v.data for k, v in self.params.items()}, precision=precision)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def forward_logits(self, ids, t) -> Tensor:
        """Logits ``[B, L, n_classes]`` (or ``[L, n_classes]`` for 1-D ``ids``)."""
        return forward_logits(self, ids, t)


def init_parameters_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, N, dc = config.d_model, config.d_state, config.d_cond
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (config.vocab, d),
        "time.w1": (TIME_FEATURES, dc), "time.b1": (dc,), "time.w2": (dc, dc), "time.b2": (dc,),
    }
    for i, kind in enumerate(build_layer_pattern(config).kinds):
        pre = f"blocks.{i}"
        shapes[f"{pre}.norm1.w_cond"] = (dc, 2 * d)
        if kind == SSM:
            for direction in ("fwd", "bwd"):
                q = f"{pre}.mixer.{direction}"
                shapes[f"{q}.w_in"] = (d, 3 * d + 2 * N)
                shapes[f"{q}.b_in"] = (3 * d + 2 * N,)
                shapes[f"{q}.a_log"] = (d,)
                shapes[f"{q}.w_out"] = (d, d)
        else:
            shapes[f"{pre}.mixer.w_qkv"] = (d, 3 * d)
            shapes[f"{pre}.mixer.w_out"] = (d, d)
        if config.use_mlp:
            hidden = config.mlp_ratio * d
            shapes[f"{pre}.norm2.w_cond"] = (dc, 2 * d)
            shapes[f"{pre}.mlp.w1"] = (d, hidden)
            shapes[f"{pre}.mlp.b1"] = (hidden,)
            shapes[f"{pre}.mlp.w2"] = (hidden, d)
            shapes[f"{pre}.mlp.b2"] = (d,)
    shapes["head.weight"] = (d, config.n_classes)
    shapes["head.bias"] = (config.n_classes,)
    return shapes


def forward_logits(model: DenoiserModel, ids, t) -> Tensor:
    cfg = model.config
    ids = np.asarray(ids)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None]
    B, L = ids.shape
    if L > cfg.context_len:
        raise ConfigError(f"sequence length {L} exceeds context_len {cfg.context_len}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    x = ops.embedding(model.params["embed.weight"], ids)
    tau = embed_timestep(t_arr, model._time)
    for kind, bp in zip(model.pattern.kinds, model._blocks):
        x = diffusion_block(x, tau, bp, kind, cfg.use_mlp, cfg.d_head, cfg.rope_base)
    logits = ops.affine_map(ops.layer_normalize(x, LN_EPS), model.params["head.weight"], model.params["head.bias"])
    if squeeze:
        logits = ops.reshape(logits, logits.shape[1:])
    return logits


def param_groups(names: Iterable[str], params: dict[str, Tensor]) -> tuple[list[str], list[str]]:
    """Split names into (weight-decayed matrices, everything else)."""
    decay, rest = [], []
    for n in names:
        (decay if params[n].ndim >= 2 and not n.startswith("embed.") else rest).append(n)
    return decay, rest
