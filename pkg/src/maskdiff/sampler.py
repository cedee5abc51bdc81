"""Reverse-process sampling: iterative multi-token unmasking from all-MASK.

Randomness is counter based. Step ``k`` of a run with seed ``s`` draws two
uniform arrays indexed by position from ``SeedSequence([s, k])``, so the
outcome at a position does not depend on the order positions are visited.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autograd import no_grad
from .diffusion import NoiseSchedule, TokenSequence
from .errors import ConfigError, DomainError, TokenIndexError


@dataclass
class SamplerConfig:
    S: int = 128
    L: int = 256
    temperature: float = 1.0
    seed: int = 0
    prompt: TokenSequence | None = None  # prefix ids, or length-L ids with prompt_mask

    def __post_init__(self):
        if self.S < 1:
            raise ConfigError("S must be at least 1")
        if self.L < 1:
            raise ConfigError("L must be at least 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.prompt is not None:
            self.prompt_arrays()

    def prompt_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Length-L (ids, mask) for the prompt; positions outside the mask are free."""
        ids = np.zeros(self.L, dtype=np.int64)
        mask = np.zeros(self.L, dtype=bool)
        p = self.prompt
        if p is None:
            return ids, mask
        if p.prompt_mask is None:
            if len(p.ids) > self.L:
                raise ConfigError(f"prompt of length {len(p.ids)} does not fit in L={self.L}")
            ids[: len(p.ids)] = p.ids
            mask[: len(p.ids)] = True
        else:
            if p.ids.shape != (self.L,):
                raise ConfigError(f"positional prompt must have length L={self.L}, got {p.ids.shape}")
            mask[:] = p.prompt_mask
            ids[mask] = p.ids[mask]
        return ids, mask


def step_uniforms(seed: int, step: int, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-position draws for one reverse step: (stay, categorical)."""
    u = np.random.default_rng(np.random.SeedSequence([seed, step])).random((2, L))
    return u[0], u[1]


def _categorical(logits: np.ndarray, temperature: float, u: np.ndarray) -> np.ndarray:
    # inverse CDF of softmax(logits / temperature), one row per uniform
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    cdf = np.cumsum(np.exp(z), axis=-1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1)


def _apply_reverse(ids: np.ndarray, frozen: np.ndarray, t: float, s: float, logits: np.ndarray,
                   u_stay: np.ndarray, u_cat: np.ndarray, temperature: float, mask_id: int) -> np.ndarray:
    if not 0.0 < t <= 1.0 or not 0.0 <= s < t:
        raise DomainError(f"reverse step needs 0 <= s < t <= 1, got t={t}, s={s}")
    out = ids.copy()
    masked = (ids == mask_id) & ~frozen
    unmask = masked & (u_stay >= s / t)
    if unmask.any():
        out[unmask] = _categorical(logits[unmask], temperature, u_cat[unmask])
    return out


def reverse_step(x_t: TokenSequence, t: float, s: float, logits, rng, temperature: float = 1.0,
                 mask_id: int | None = None) -> TokenSequence:
    """One draw from the reverse kernel taking noise level ``t`` to ``s``.

    Unmasked positions are copied. A masked position stays masked with
    probability ``s / t`` and otherwise takes a token drawn from
    ``softmax(logits / temperature)``. Prompt positions never change.
    ``mask_id`` defaults to the number of logit columns.
    """
    logits = np.asarray(getattr(logits, "data", logits))
    ids = x_t.ids
    if logits.ndim != 2 or logits.shape[0] != ids.shape[-1]:
        raise DomainError(f"logits must be [L, V] with L={ids.shape[-1]}, got {logits.shape}")
    if mask_id is None:
        mask_id = logits.shape[1]
    frozen = np.zeros(ids.shape, dtype=bool) if x_t.prompt_mask is None else x_t.prompt_mask
    L = ids.shape[-1]
    if isinstance(rng, tuple):
        u_stay, u_cat = rng
    else:
        u_stay, u_cat = rng.random(L), rng.random(L)
    out = _apply_reverse(ids, frozen, t, s, logits, u_stay, u_cat, temperature, mask_id)
    return TokenSequence(out, x_t.prompt_mask)


def _model_classes(model) -> tuple[int, int]:
    n_classes = getattr(model, "n_classes", None)
    mask_id = getattr(model, "mask_id", None)
    if n_classes is None or mask_id is None:
        raise ConfigError("model must expose n_classes and mask_id")
    return int(n_classes), int(mask_id)


def _decode(model, ids: np.ndarray, frozen: np.ndarray, S: int, temperature: float, seeds) -> np.ndarray:
    """Run the full reverse chain on a [B, L] batch; row ``b`` uses ``seeds[b]``."""
    n_classes, mask_id = _model_classes(model)
    sched = NoiseSchedule(steps=S)
    ids = ids.copy()
    B, L = ids.shape
    with no_grad():
        for k in range(S, 0, -1):
            t, s = sched.step_time(k), sched.step_time(k - 1)
            logits = np.asarray(model.forward_logits(ids, t).data)
            if logits.shape != (B, L, n_classes):
                raise ConfigError(f"model produced logits {logits.shape}, expected {(B, L, n_classes)}")
            for b in range(B):
                u_stay, u_cat = step_uniforms(seeds[b], k, L)
                ids[b] = _apply_reverse(ids[b], frozen[b], t, s, logits[b], u_stay, u_cat, temperature, mask_id)
    return ids


def _initial(model, config: SamplerConfig) -> tuple[np.ndarray, np.ndarray]:
    n_classes, mask_id = _model_classes(model)
    p_ids, p_mask = config.prompt_arrays()
    if p_mask.any():
        bad = p_ids[p_mask]
        if bad.min() < 0 or bad.max() >= n_classes:
            raise TokenIndexError(f"prompt ids must lie in [0, {n_classes})")
    ctx = getattr(getattr(model, "config", None), "context_len", None)
    if ctx is not None and config.L > ctx:
        raise ConfigError(f"generation length {config.L} exceeds model context {ctx}")
    ids = np.where(p_mask, p_ids, mask_id)
    return ids, p_mask


def generate(model, config: SamplerConfig, sched: NoiseSchedule | None = None) -> TokenSequence:
    """Sample a length-L sequence by ``config.S`` reverse steps on the grid ``k / S``."""
    if sched is not None and sched.steps != config.S:
        raise ConfigError(f"schedule has {sched.steps} steps but the sampler asks for S={config.S}")
    ids, p_mask = _initial(model, config)
    out = _decode(model, ids[None], p_mask[None], config.S, config.temperature, [config.seed])[0]
    return TokenSequence(out, p_mask if config.prompt is not None else None)


def generate_batch(model, configs: list[SamplerConfig], workers: int = 1) -> list[TokenSequence]:
    """``generate`` for each config; identical to running them one by one.

    With ``workers > 1`` configs run concurrently on threads that share the
    model read-only. Each run owns its counter-based random stream.
    """
    if workers <= 1 or len(configs) <= 1:
        return [generate(model, c) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: generate(model, c), configs))
