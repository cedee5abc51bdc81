"""Absorbing-state masking process, noise schedule and diffusion loss.

Models passed to :func:`mdm_loss` and :func:`nelbo_ppl_bound` only need
``n_classes`` (size of the predicted vocabulary), ``mask_id`` and
``forward_logits(ids[B, L], t[B]) -> Tensor[B, L, n_classes]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import ops
from .autograd import Tensor, no_grad
from .errors import DomainError, TokenIndexError


class Denoiser(Protocol):
    n_classes: int
    mask_id: int

    def forward_logits(self, ids: np.ndarray, t) -> Tensor: ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Log-linear schedule ``sigma(t) = -log(1 - t)``.

    Under absorbing-state diffusion the masking probability is
    ``1 - exp(-sigma(t)) = t``, so the decoding grid ``t_k = k / steps`` is
    uniform in ``t``. Training times are drawn from ``Uniform[t_min, 1]``.
    """

    steps: int = 128
    t_min: float = 1e-3
    kind: str = "log_linear"

    def __post_init__(self):
        if self.kind != "log_linear":
            raise DomainError(f"unsupported schedule kind {self.kind!r}")
        if self.steps < 1:
            raise DomainError("steps must be positive")
        if not 0.0 < self.t_min < 1.0:
            raise DomainError("t_min must lie in (0, 1)")

    def sigma(self, t: float) -> float:
        return -math.log1p(-t) if t < 1.0 else math.inf

    def mask_probability(self, t: float) -> float:
        return -math.expm1(-self.sigma(t))

    def step_time(self, k: int) -> float:
        return step_time(self, k)

    def sample_times(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.t_min, 1.0, size=n)


def step_time(sched: NoiseSchedule, k: int) -> float:
    if not 0 <= k <= sched.steps:
        raise TokenIndexError(f"step index {k} outside [0, {sched.steps}]")
    return k / sched.steps


@dataclass
class TokenSequence:
    """Token ids plus an optional mask of positions the process must not touch."""

    ids: np.ndarray
    prompt_mask: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.prompt_mask is not None:
            self.prompt_mask = np.asarray(self.prompt_mask, dtype=bool)
            if self.prompt_mask.shape != self.ids.shape:
                raise DomainError("prompt_mask must match ids")

    def __len__(self):
        return self.ids.shape[-1]


@dataclass
class LossEstimate:
    value: Tensor
    masked_count: int
    t_used: np.ndarray


def forward_mask(x0, t, rng: np.random.Generator, mask_id: int, exempt=None) -> tuple[np.ndarray, np.ndarray]:
    """Replace each non-exempt token by ``mask_id`` independently with probability ``t``.

    ``x0`` is ``[L]`` or ``[B, L]``; ``t`` a scalar or one value per row.
    Returns the corrupted ids and the boolean mask of replaced positions.
    """
    x0 = np.asarray(x0)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or not np.all(np.isfinite(t_arr)):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    if np.any(x0 == mask_id):
        raise DomainError("clean sequence already contains the mask id")
    if t_arr.ndim == 1:
        t_arr = t_arr[:, None]
    masked = rng.random(x0.shape) < t_arr
    if exempt is not None:
        masked &= ~np.asarray(exempt, dtype=bool)
    return np.where(masked, mask_id, x0), masked


def mdm_loss(model: Denoiser, x0, sched: NoiseSchedule, rng: np.random.Generator, exempt=None, t=None) -> LossEstimate:
    """Single-draw Monte-Carlo estimate of the reweighted masked-diffusion loss.

    Per sequence: ``t ~ Uniform[t_min, 1]`` (or the fixed ``t``), mask, then
    ``(1/t) * sum_masked CE / L_eff`` where ``L_eff`` counts positions that
    are not exempt. The batch mean is returned as a differentiable scalar.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.int64))
    B, L = x0.shape
    if exempt is None:
        exempt = np.zeros_like(x0, dtype=bool)
    else:
        exempt = np.broadcast_to(np.asarray(exempt, dtype=bool), x0.shape)
    tt = sched.sample_times(rng, B) if t is None else np.full(B, float(t))
    xt, masked = forward_mask(x0, tt, rng, model.mask_id, exempt)
    logits = model.forward_logits(xt, tt)
    targets = np.where(exempt | (x0 >= model.n_classes), 0, x0)
    ce = ops.cross_entropy(logits, targets)
    l_eff = np.maximum((~exempt).sum(axis=1), 1)
    weights = masked / (tt[:, None] * l_eff[:, None] * B)
    value = ops.sum(ops.mul(ce, weights.astype(logits.dtype)))
    return LossEstimate(value=value, masked_count=int(masked.sum()), t_used=tt)


def per_sequence_nelbo(model: Denoiser, x0, sched: NoiseSchedule, rng: np.random.Generator, exempt=None) -> np.ndarray:
    """One Monte-Carlo draw of the per-token bound for every row of ``x0``."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.int64))
    B = x0.shape[0]
    if exempt is None:
        exempt = np.zeros_like(x0, dtype=bool)
    tt = sched.sample_times(rng, B)
    xt, masked = forward_mask(x0, tt, rng, model.mask_id, exempt)
    with no_grad():
        logits = model.forward_logits(xt, tt)
    targets = np.where(exempt | (x0 >= model.n_classes), 0, x0)
    ce = ops.cross_entropy(logits, targets).data.astype(np.float64)
    l_eff = np.maximum((~np.asarray(exempt)).sum(axis=1), 1)
    return (ce * masked).sum(axis=1) / (tt * l_eff)


def nelbo_ppl_bound(
    model: Denoiser,
    sequences: Sequence | np.ndarray,
    n_mc: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    exempt=None,
    batch_size: int = 16,
) -> float:
    """``exp`` of the mean per-token bound over sequences and ``n_mc`` draws."""
    seqs = np.asarray(sequences, dtype=np.int64)
    if seqs.size == 0:
        raise DomainError("cannot evaluate an empty corpus")
    if n_mc < 1:
        raise DomainError("n_mc must be at least 1")
    seqs = np.atleast_2d(seqs)
    ex = None if exempt is None else np.broadcast_to(np.asarray(exempt, dtype=bool), seqs.shape)
    totals = []
    for _ in range(n_mc):
        for s in range(0, len(seqs), batch_size):
            part_ex = None if ex is None else ex[s:s + batch_size]
            totals.append(per_sequence_nelbo(model, seqs[s:s + batch_size], sched, rng, part_ex))
    return float(math.exp(np.concatenate(totals).mean()))
