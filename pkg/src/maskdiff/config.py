"""Flat ``key = value`` run configuration.

Every key has a default and a type; values in a file or on the command line
are coerced to that type. Lists are comma separated, booleans are
``true``/``false``. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

from pathlib import Path

from .bench import BenchConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

# key -> (default, type, description); a list type is written as (list, elem)
SCHEMA: dict[str, tuple] = {
    "seed": (0, int, "seed for every stochastic component"),
    "ckpt": ("", str, "checkpoint path read by sample, eval, inspect (and train resume)"),
    "model.pattern_kind": ("ssm_only", str, "ssm_only, hybrid or attention_only"),
    "model.n_layers": (6, int, "number of blocks"),
    "model.d_model": (128, int, "hidden width"),
    "model.d_head": (32, int, "attention head width"),
    "model.d_state": (16, int, "selective-scan state size"),
    "model.K": (5, int, "hybrid: SSM layers per attention layer"),
    "model.use_mlp": (True, bool, "append an MLP sublayer to every block"),
    "model.mlp_ratio": (0, int, "MLP expansion; 0 picks 4 for attention_only, 2 otherwise"),
    "train.lr": (1e-3, float, "peak learning rate"),
    "train.steps": (2000, int, "total optimizer steps"),
    "train.batch": (16, int, "sequences per step"),
    "train.warmup": (100, int, "linear warmup steps"),
    "train.weight_decay": (0.1, float, "decoupled weight decay"),
    "train.clip_norm": (1.0, float, "global gradient norm clip"),
    "train.log_interval": (10, int, "steps between log lines"),
    "train.eval_interval": (100, int, "steps between perplexity-bound evaluations"),
    "train.eval_mc": (4, int, "Monte Carlo draws per evaluation"),
    "train.ckpt_interval": (500, int, "steps between checkpoints"),
    "train.stop_below_ppl": (0.0, float, "stop once the bound falls below this; 0 disables"),
    "train.out_dir": ("run", str, "directory for checkpoints and the training report"),
    "data.paths": ([], (list, str), "files or directories of training text"),
    "data.context_len": (256, int, "window length for packing and the model context"),
    "data.split": (1.0, float, "fraction of windows used for training; the rest validate"),
    "eval.mc": (8, int, "Monte Carlo draws for eval"),
    "eval.batch": (16, int, "sequences per eval forward pass"),
    "sample.S": (128, int, "decoding steps"),
    "sample.L": (256, int, "generated length"),
    "sample.temperature": (1.0, float, "softmax temperature"),
    "sample.prompt": ("", str, "UTF-8 prefix fixed during sampling"),
    "bench.lengths": ([512, 1024, 2048, 4096, 8192], (list, int), "sequence lengths"),
    "bench.steps": (128, int, "decoding steps per timed run"),
    "bench.runs": (20, int, "timed runs per cell"),
    "bench.warmup": (5, int, "untimed warmup runs per cell"),
    "bench.batch": (1, int, "sequences per decode"),
    "bench.backbones": (["ssm_only", "hybrid", "attention_only"], (list, str), "backbones to sweep"),
    "bench.d_model": (64, int, "bench model width"),
    "bench.n_layers": (6, int, "bench model depth"),
    "bench.out_dir": ("bench_out", str, "directory for CSV and SVG"),
}


def _coerce(key: str, raw):
    default, typ, _ = SCHEMA[key]
    if isinstance(typ, tuple):
        elem = typ[1]
        if isinstance(raw, str):
            items = [s.strip() for s in raw.split(",") if s.strip()]
        else:
            items = list(raw)
        try:
            return [elem(v) for v in items]
        except ValueError:
            raise ConfigError(f"{key}: cannot read {raw!r} as a list of {elem.__name__}") from None
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in ("true", "1", "yes", "on"):
            return True
        if s in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")
    try:
        return typ(raw.strip() if isinstance(raw, str) and typ is not str else raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


class RunConfig:
    """Typed view over the flat key space with documented defaults."""

    def __init__(self, values: dict | None = None):
        self.values = {k: (list(v[0]) if isinstance(v[0], list) else v[0]) for k, v in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value)

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in s.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            cfg.set(key, value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        return cls.parse(text, str(path))

    def to_text(self) -> str:
        return "\n".join(f"{k} = {_fmt(v)}" for k, v in self.values.items()) + "\n"

    def model_config(self) -> ModelConfig:
        v = self.values
        kw = dict(n_layers=v["model.n_layers"], d_model=v["model.d_model"], d_head=v["model.d_head"],
                  d_state=v["model.d_state"], K=v["model.K"], use_mlp=v["model.use_mlp"],
                  context_len=v["data.context_len"])
        if v["model.mlp_ratio"]:
            kw["mlp_ratio"] = v["model.mlp_ratio"]
        return ModelConfig.for_backbone(v["model.pattern_kind"], **kw)

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr=v["train.lr"], steps=v["train.steps"], batch=v["train.batch"], warmup_steps=v["train.warmup"],
            weight_decay=v["train.weight_decay"], clip_norm=v["train.clip_norm"],
            log_interval=v["train.log_interval"], eval_interval=v["train.eval_interval"],
            eval_mc=v["train.eval_mc"], ckpt_interval=v["train.ckpt_interval"], seed=v["seed"],
            stop_below_ppl=v["train.stop_below_ppl"] or None,
        )

    def bench_config(self) -> BenchConfig:
        v = self.values
        return BenchConfig(
            lengths=v["bench.lengths"], S=v["bench.steps"], warmup_runs=v["bench.warmup"],
            timed_runs=v["bench.runs"], batch=v["bench.batch"], backbones=v["bench.backbones"],
            d_model=v["bench.d_model"], n_layers=v["bench.n_layers"], seed=v["seed"], out_dir=v["bench.out_dir"],
        )
