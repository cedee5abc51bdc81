"""AdamW training loop over the masked-diffusion loss."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autograd import Tensor
from .diffusion import NoiseSchedule, mdm_loss, nelbo_ppl_bound
from .errors import DomainError, TrainingDivergedError
from .model import DenoiserModel, param_groups

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 16
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    t_min: float = 1e-3
    log_interval: int = 10
    eval_interval: int = 100
    eval_mc: int = 4
    ckpt_interval: int = 500
    seed: int = 0
    stop_below_ppl: float | None = None


@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    warmup_steps: int = 100
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        d = asdict(self)
        d.pop("m"), d.pop("v")
        return d


@dataclass
class TrainReport:
    step: int
    loss: float
    grad_norm: float
    lr: float
    tokens_per_s: float
    ppl_bound: float | None = None

    def to_tsv(self) -> str:
        ppl = "" if self.ppl_bound is None else f"{self.ppl_bound:.6g}"
        return f"{self.step}\t{self.loss:.8g}\t{self.grad_norm:.8g}\t{self.lr:.8g}\t{self.tokens_per_s:.1f}\t{ppl}"


REPORT_HEADER = "# step\tloss\tgrad_norm\tlr\ttokens_per_s\tppl_bound"


def adamw_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState,
                 lr: float | None = None, no_decay: set[str] | frozenset = frozenset()) -> None:
    """One AdamW step in place: decoupled decay, then bias-corrected moments."""
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DomainError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name].data
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay and name not in no_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr`` then cosine decay to ``min_lr_ratio * lr``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    frac = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.min_lr_ratio * cfg.lr
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * frac))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale gradients so their global norm is at most ``clip_norm``; returns the pre-clip norm."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
    norm = math.sqrt(total)
    if clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, stream]))


class Trainer:
    """Owns a model, its optimizer state and the step counter."""

    def __init__(self, model: DenoiserModel, cfg: TrainConfig, optim: OptimState | None = None):
        self.model = model
        self.cfg = cfg
        self.sched = NoiseSchedule(t_min=cfg.t_min)
        self.optim = optim or OptimState(
            lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
            weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm, warmup_steps=cfg.warmup_steps,
        )
        _, rest = param_groups(model.params, model.params)
        self.no_decay = frozenset(rest)

    @property
    def step(self) -> int:
        return self.optim.step

    def select_batch(self, train: np.ndarray, step: int) -> np.ndarray:
        rng = step_rng(self.cfg.seed, step, 0)
        n = len(train)
        idx = rng.permutation(n)[: self.cfg.batch] if n >= self.cfg.batch else rng.integers(0, n, self.cfg.batch)
        return train[np.sort(idx)]

    def train_step(self, batch: np.ndarray, pad_id: int | None = None) -> TrainReport:
        step = self.optim.step
        t0 = time.perf_counter()
        exempt = None if pad_id is None else batch == pad_id
        self.model.zero_grad()
        est = mdm_loss(self.model, batch, self.sched, step_rng(self.cfg.seed, step, 1), exempt=exempt)
        loss = est.value.item()
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"loss became non-finite at step {step}; resume from the last checkpoint")
        est.value.backward()
        grads = {n: p.grad for n, p in self.model.params.items() if p.grad is not None}
        missing = [n for n, p in self.model.params.items() if p.grad is None]
        for n in missing:
            grads[n] = np.zeros_like(self.model.params[n].data)
        norm = clip_gradients(grads, self.cfg.clip_norm)
        if not math.isfinite(norm):
            raise TrainingDivergedError(f"gradient norm became non-finite at step {step}; resume from the last checkpoint")
        lr = lr_at(step, self.cfg)
        adamw_update(self.model.params, grads, self.optim, lr=lr, no_decay=self.no_decay)
        dt = time.perf_counter() - t0
        return TrainReport(step=step + 1, loss=loss, grad_norm=norm, lr=lr, tokens_per_s=batch.size / max(dt, 1e-12))

    def evaluate(self, sequences: np.ndarray, pad_id: int | None = None, n_mc: int | None = None) -> float:
        exempt = None if pad_id is None else sequences == pad_id
        rng = step_rng(self.cfg.seed, self.optim.step, 2)
        return nelbo_ppl_bound(self.model, sequences, n_mc or self.cfg.eval_mc, self.sched, rng,
                               exempt=exempt, batch_size=self.cfg.batch)


def fit(
    trainer: Trainer,
    train: np.ndarray,
    valid: np.ndarray | None = None,
    pad_id: int | None = None,
    report_path: str | Path | None = None,
    checkpoint_fn: Callable[[Trainer], None] | None = None,
    on_report: Callable[[TrainReport], None] | None = None,
) -> list[TrainReport]:
    """Run ``train_step`` until ``cfg.steps`` total steps have been taken.

    Evaluates the perplexity bound on ``valid`` every ``eval_interval`` steps
    and calls ``checkpoint_fn`` every ``ckpt_interval`` steps and at the end.
    Stops early once the bound drops below ``cfg.stop_below_ppl``.
    """
    cfg = trainer.cfg
    train = np.asarray(train)
    if train.size == 0:
        raise DomainError("training corpus is empty")
    reports: list[TrainReport] = []
    fh = None
    if report_path is not None:
        report_path = Path(report_path)
        new = not report_path.exists()
        fh = open(report_path, "a", encoding="utf-8")
        if new:
            fh.write(REPORT_HEADER + "\n")
    try:
        while trainer.step < cfg.steps:
            rep = trainer.train_step(trainer.select_batch(train, trainer.step), pad_id)
            stop = False
            if valid is not None and cfg.eval_interval and rep.step % cfg.eval_interval == 0:
                rep.ppl_bound = trainer.evaluate(valid, pad_id)
                stop = cfg.stop_below_ppl is not None and rep.ppl_bound < cfg.stop_below_ppl
            if rep.ppl_bound is not None or rep.step % max(1, cfg.log_interval) == 0 or rep.step == cfg.steps or stop:
                reports.append(rep)
                if fh is not None:
                    fh.write(rep.to_tsv() + "\n")
                    fh.flush()
                if on_report is not None:
                    on_report(rep)
                log.info("step %d loss %.4f grad_norm %.3f lr %.2e", rep.step, rep.loss, rep.grad_norm, rep.lr)
            if checkpoint_fn is not None and cfg.ckpt_interval and rep.step % cfg.ckpt_interval == 0:
                checkpoint_fn(trainer)
            if stop:
                break
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_fn is not None and reports and (not cfg.ckpt_interval or reports[-1].step % cfg.ckpt_interval):
        checkpoint_fn(trainer)
    return reports
