"""Decode latency and throughput sweeps over sequence length and backbone."""

from __future__ import annotations

import datetime as _dt
import logging
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, kernels
from .errors import ConfigError, DomainError
from .model import PATTERN_KINDS, DenoiserModel, ModelConfig
from .sampler import _decode

log = logging.getLogger(__name__)

CSV_HEADER = "backbone,L,S,batch,runs,mean_s,median_s,std_s,tokens_per_s"


@dataclass
class BenchConfig:
    lengths: list[int] = field(default_factory=lambda: [512, 1024, 2048, 4096, 8192])
    S: int = 128
    warmup_runs: int = 5
    timed_runs: int = 20
    batch: int = 1
    backbones: list[str] = field(default_factory=lambda: list(PATTERN_KINDS))
    d_model: int = 64
    n_layers: int = 6
    d_head: int = 32
    d_state: int = 16
    K: int = 5
    seed: int = 0
    fit_points: int = 0  # 0: upper half of the grid, at least 4 points
    out_dir: str = "bench_out"

    def __post_init__(self):
        self.lengths = [int(v) for v in self.lengths]
        if not self.lengths or any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ConfigError("bench lengths must be nonempty and strictly increasing")
        if self.lengths[0] < 1:
            raise ConfigError("bench lengths must be positive")
        if self.warmup_runs < 1:
            raise ConfigError("warmup_runs must be at least 1")
        if self.timed_runs < 2:
            raise ConfigError("timed_runs must be at least 2")
        if self.batch < 1 or self.S < 1:
            raise ConfigError("batch and S must be positive")
        for b in self.backbones:
            if b not in PATTERN_KINDS:
                raise ConfigError(f"unknown backbone {b!r}; expected one of {PATTERN_KINDS}")

    def model_config(self, backbone: str) -> ModelConfig:
        return ModelConfig.for_backbone(
            backbone, n_layers=self.n_layers, d_model=self.d_model, d_head=self.d_head,
            d_state=self.d_state, K=self.K, context_len=max(self.lengths),
        )

    def fit_window(self) -> list[int]:
        n = len(self.lengths)
        k = self.fit_points or max(4, math.ceil(n / 2))
        return self.lengths[max(0, n - k):]


@dataclass
class LatencyStats:
    L: int
    S: int
    batch: int
    durations: list[float]

    @property
    def runs(self) -> int:
        return len(self.durations)

    @property
    def mean(self) -> float:
        return float(np.mean(self.durations))

    @property
    def median(self) -> float:
        return float(np.median(self.durations))

    @property
    def std(self) -> float:
        return float(np.std(self.durations, ddof=1)) if len(self.durations) > 1 else 0.0

    @property
    def tokens_per_s(self) -> float:
        return self.batch * self.L / self.mean


@dataclass
class ScalingFit:
    exponent: float
    intercept: float
    residual: float
    n_points: int


@dataclass
class ScalingReport:
    cells: dict[tuple[str, int], LatencyStats] = field(default_factory=dict)
    skipped: dict[tuple[str, int], str] = field(default_factory=dict)
    fits: dict[str, ScalingFit] = field(default_factory=dict)
    csv_path: Path | None = None
    svg_path: Path | None = None

    def throughput(self, backbone: str, L: int) -> float:
        return self.cells[(backbone, L)].tokens_per_s


def measure_decode(model, L: int, S: int, warmup: int, runs: int,
                   timer: Callable[[], float] = time.perf_counter, batch: int = 1, seed: int = 0) -> LatencyStats:
    """Time ``runs`` full decodes of ``S`` steps after ``warmup`` untimed ones."""
    ctx = getattr(getattr(model, "config", None), "context_len", None)
    if ctx is not None and L > ctx:
        raise ConfigError(f"length {L} exceeds model context {ctx}")
    if runs < 1 or warmup < 0:
        raise ConfigError("runs must be positive and warmup nonnegative")
    ids = np.full((batch, L), model.mask_id, dtype=np.int64)
    frozen = np.zeros((batch, L), dtype=bool)
    seeds = [seed + b for b in range(batch)]
    for _ in range(warmup):
        _decode(model, ids, frozen, S, 1.0, seeds)
    durations = []
    for _ in range(runs):
        start = timer()
        _decode(model, ids, frozen, S, 1.0, seeds)
        durations.append(timer() - start)
    return LatencyStats(L=L, S=S, batch=batch, durations=durations)


def fit_scaling_exponent(points) -> ScalingFit:
    """Least-squares slope of log(latency) against log(L).

    The residual is the largest absolute deviation from the fitted line in
    log space.
    """
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError("points must be (L, latency) pairs")
    if len(pts) < 4:
        raise DomainError(f"an exponent fit needs at least 4 points, got {len(pts)}")
    if not (pts > 0).all() or not np.isfinite(pts).all():
        raise DomainError("lengths and latencies must be positive and finite")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.max(np.abs(y - (slope * x + icpt))))
    return ScalingFit(float(slope), float(icpt), resid, len(pts))


def machine_comments(cfg: BenchConfig) -> list[str]:
    threads = {k: os.environ.get(k, "unset") for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}
    return [
        f"# maskdiff {__version__} kernels={kernels.BACKEND} numpy={np.__version__}",
        f"# machine={platform.machine()} processor={platform.processor() or 'unknown'} "
        f"cpus={os.cpu_count()} python={platform.python_version()}",
        "# threads " + " ".join(f"{k}={v}" for k, v in threads.items()),
        f"# d_model={cfg.d_model} n_layers={cfg.n_layers} d_head={cfg.d_head} d_state={cfg.d_state} "
        f"K={cfg.K} warmup={cfg.warmup_runs} seed={cfg.seed}",
    ]


def _fresh_path(out_dir: Path, stem: str, suffix: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = out_dir / f"{stem}-{stamp}{suffix}"
    n = 1
    while path.exists():
        path = out_dir / f"{stem}-{stamp}-{n}{suffix}"
        n += 1
    return path


def write_csv(report: ScalingReport, cfg: BenchConfig, path: Path) -> None:
    lines = machine_comments(cfg) + [CSV_HEADER]
    for (bk, L) in sorted(report.cells):
        c = report.cells[(bk, L)]
        lines.append(f"{bk},{L},{c.S},{c.batch},{c.runs},{c.mean:.6g},{c.median:.6g},{c.std:.6g},{c.tokens_per_s:.6g}")
    for (bk, L), why in sorted(report.skipped.items()):
        lines.append(f"# skipped {bk},{L}: {why}")
    for bk, f in sorted(report.fits.items()):
        lines.append(f"# fit {bk}: exponent={f.exponent:.4f} residual={f.residual:.4f} points={f.n_points}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]


def _panel(series: dict[str, list[tuple[float, float]]], x0: float, title: str, ylabel: str,
           width: float = 380, height: float = 300) -> list[str]:
    pad_l, pad_b, pad_t = 60, 40, 30
    pts = [p for s in series.values() for p in s]
    out = [f'<g transform="translate({x0},0)">',
           f'<text x="{pad_l + (width - pad_l) / 2}" y="18" text-anchor="middle" font-size="14">{title}</text>']
    if not pts:
        return out + ["</g>"]
    lx = [math.log10(p[0]) for p in pts]
    ly = [math.log10(p[1]) for p in pts]
    xmin, xmax = min(lx), max(lx)
    ymin, ymax = min(ly), max(ly)
    xmax += 1e-9 if xmax == xmin else 0.0
    ymax += 1e-9 if ymax == ymin else 0.0

    def sx(v):
        return pad_l + (math.log10(v) - xmin) / (xmax - xmin) * (width - pad_l - 10)

    def sy(v):
        return pad_t + (1 - (math.log10(v) - ymin) / (ymax - ymin)) * (height - pad_t - pad_b)

    out.append(f'<rect x="{pad_l}" y="{pad_t}" width="{width - pad_l - 10}" height="{height - pad_t - pad_b}" '
               'fill="none" stroke="#888"/>')
    for L in sorted({p[0] for p in pts}):
        out.append(f'<text x="{sx(L):.1f}" y="{height - pad_b + 15}" text-anchor="middle" font-size="10">{int(L)}</text>')
    for v in (10 ** ymin, 10 ** ymax):
        out.append(f'<text x="{pad_l - 4}" y="{sy(v) + 3:.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    out.append(f'<text x="{pad_l + (width - pad_l) / 2}" y="{height - 5}" text-anchor="middle" font-size="11">L (log scale)</text>')
    out.append(f'<text x="12" y="{pad_t + (height - pad_t - pad_b) / 2}" font-size="11" '
               f'transform="rotate(-90 12 {pad_t + (height - pad_t - pad_b) / 2})" text-anchor="middle">{ylabel}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}" data-backbone="{name}"/>')
    return out + ["</g>"]


def write_svg(report: ScalingReport, backbones: list[str], path: Path) -> None:
    thr: dict[str, list] = {}
    lat: dict[str, list] = {}
    for bk in backbones:
        cells = sorted((L, c) for (b, L), c in report.cells.items() if b == bk)
        thr[bk] = [(L, c.tokens_per_s) for L, c in cells]
        lat[bk] = [(L, c.mean) for L, c in cells]
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="800" height="360" font-family="sans-serif">',
             '<rect width="100%" height="100%" fill="white"/>']
    parts += _panel(thr, 0, "Throughput", "tokens / s")
    parts += _panel(lat, 400, "Latency", "seconds per decode")
    for i, bk in enumerate(backbones):
        color = _COLORS[i % len(_COLORS)]
        x = 70 + i * 150
        parts.append(f'<line x1="{x}" y1="340" x2="{x + 20}" y2="340" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x + 25}" y="344" font-size="12" class="legend">{bk}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")


def run_sweep(cfg: BenchConfig, timer: Callable[[], float] = time.perf_counter,
              on_cell: Callable[[str, int, LatencyStats | None], None] | None = None) -> ScalingReport:
    """Measure every (backbone, L) cell, fit exponents, write CSV and SVG.

    All backbones share ``d_model`` and ``n_layers`` and use random weights.
    A cell that runs out of memory is recorded as skipped.
    """
    report = ScalingReport()
    for bk in cfg.backbones:
        model = DenoiserModel(cfg.model_config(bk), seed=cfg.seed)
        for L in cfg.lengths:
            try:
                stats = measure_decode(model, L, cfg.S, cfg.warmup_runs, cfg.timed_runs, timer=timer,
                                       batch=cfg.batch, seed=cfg.seed)
            except MemoryError as exc:
                report.skipped[(bk, L)] = f"out of memory ({exc or 'allocation failed'})"
                log.warning("skipping %s at L=%d: out of memory", bk, L)
                stats = None
            else:
                report.cells[(bk, L)] = stats
            if on_cell is not None:
                on_cell(bk, L, stats)
    window = set(cfg.fit_window())
    for bk in cfg.backbones:
        pts = [(L, report.cells[(bk, L)].mean) for L in cfg.lengths if (bk, L) in report.cells and L in window]
        if len(pts) >= 4:
            report.fits[bk] = fit_scaling_exponent(pts)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.csv_path = _fresh_path(out, "bench", ".csv")
    write_csv(report, cfg, report.csv_path)
    report.svg_path = report.csv_path.with_suffix(".svg")
    write_svg(report, cfg.backbones, report.svg_path)
    return report
