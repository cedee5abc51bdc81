"""Command-line entry point: ``maskdiff {train,sample,eval,bench,inspect}``.

Exit status is 0 on success, 1 on a usage error and 2 on a data, config or
checkpoint error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import MaskdiffError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flag -> (config key, argparse kwargs); values stay strings and are coerced by RunConfig
_COMMON = {
    "--seed": ("seed", {}),
    "--ckpt": ("ckpt", {"help": "checkpoint path"}),
}
_FLAGS = {
    "train": {
        "--data": ("data.paths", {"help": "comma-separated files or directories"}),
        "--context-len": ("data.context_len", {}),
        "--split": ("data.split", {}),
        "--backbone": ("model.pattern_kind", {"help": "ssm_only, hybrid or attention_only"}),
        "--n-layers": ("model.n_layers", {}),
        "--d-model": ("model.d_model", {}),
        "--K": ("model.K", {}),
        "--steps": ("train.steps", {}),
        "--lr": ("train.lr", {}),
        "--batch": ("train.batch", {}),
        "--warmup": ("train.warmup", {}),
        "--eval-interval": ("train.eval_interval", {}),
        "--ckpt-interval": ("train.ckpt_interval", {}),
        "--log-interval": ("train.log_interval", {}),
        "--stop-below-ppl": ("train.stop_below_ppl", {}),
        "--out-dir": ("train.out_dir", {}),
    },
    "sample": {
        "--len": ("sample.L", {}),
        "--steps": ("sample.S", {}),
        "--temperature": ("sample.temperature", {}),
        "--prompt": ("sample.prompt", {}),
    },
    "eval": {
        "--data": ("data.paths", {"help": "comma-separated files or directories"}),
        "--mc": ("eval.mc", {}),
        "--batch": ("eval.batch", {}),
    },
    "bench": {
        "--lengths": ("bench.lengths", {"help": "comma-separated lengths"}),
        "--steps": ("bench.steps", {}),
        "--warmup": ("bench.warmup", {}),
        "--runs": ("bench.runs", {}),
        "--batch": ("bench.batch", {}),
        "--backbones": ("bench.backbones", {"help": "comma-separated backbone names"}),
        "--d-model": ("bench.d_model", {}),
        "--n-layers": ("bench.n_layers", {}),
        "--out-dir": ("bench.out_dir", {}),
    },
    "inspect": {},
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskdiff", description="Masked diffusion language models: train, sample, evaluate, benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, flags in _FLAGS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        for flag, (key, kw) in {**_COMMON, **flags}.items():
            p.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar=key.split(".")[-1].upper(), **kw)
        if name == "inspect":
            p.add_argument("path", nargs="?", help="checkpoint path (or --ckpt)")
    return parser


def effective_config(args):
    from .config import RunConfig

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    for flags in (_COMMON, _FLAGS[args.command]):
        for _, (key, _) in flags.items():
            if key in vars(args):
                cfg.set(key, getattr(args, key))
    if args.command == "inspect" and args.path:
        cfg.set("ckpt", args.path)
    return cfg


def _need_ckpt(cfg) -> str:
    if not cfg["ckpt"]:
        raise UsageError("a checkpoint path is required (--ckpt)")
    return cfg["ckpt"]


def _corpus(cfg, context_len: int):
    from .data import pack, read_corpus

    if not cfg["data.paths"]:
        raise UsageError("no data given (--data)")
    return pack(read_corpus(cfg["data.paths"]), context_len, cfg["data.split"], cfg["seed"])


def cmd_train(cfg, out) -> None:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import PAD_ID
    from .model import DenoiserModel
    from .trainer import Trainer, fit

    tcfg = cfg.train_config()
    optim = None
    if cfg["ckpt"]:
        ck = load_checkpoint(cfg["ckpt"])
        model, optim = ck.model, ck.optim
        tcfg.seed = ck.seed
    else:
        model = DenoiserModel(cfg.model_config(), seed=cfg["seed"])
    train, valid = _corpus(cfg, model.config.context_len)
    if len(train) == 0:
        raise MaskdiffError("the split left no training windows")
    evalset = valid.sequences if len(valid) else train.sequences
    out_dir = Path(cfg["train.out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ckpt"
    trainer = Trainer(model, tcfg, optim)

    def on_report(rep):
        line = f"step {rep.step} loss {rep.loss:.6f} grad_norm {rep.grad_norm:.6f} lr {rep.lr:.6e}"
        if rep.ppl_bound is not None:
            line += f" ppl_bound {rep.ppl_bound:.4f}"
        print(line, file=out, flush=True)

    fit(trainer, train.sequences, evalset, pad_id=PAD_ID, report_path=out_dir / "report.tsv",
        checkpoint_fn=lambda tr: save_checkpoint(tr.model, tr.optim, ckpt_path, seed=tcfg.seed),
        on_report=on_report)
    print(f"checkpoint {ckpt_path}", file=out)


def cmd_sample(cfg, out) -> None:
    from .checkpoint import load_checkpoint
    from .data import decode, encode
    from .diffusion import TokenSequence
    from .sampler import SamplerConfig, generate

    model = load_checkpoint(_need_ckpt(cfg)).model
    prompt = TokenSequence(encode(cfg["sample.prompt"])) if cfg["sample.prompt"] else None
    sc = SamplerConfig(S=cfg["sample.S"], L=cfg["sample.L"], temperature=cfg["sample.temperature"],
                       seed=cfg["seed"], prompt=prompt)
    seq = generate(model, sc)
    text = decode(seq.ids, strip=True)
    buf = getattr(out, "buffer", None)
    if buf is not None:
        out.flush()
        buf.write(text + b"\n")
        buf.flush()
    else:
        out.write(text.decode("utf-8", errors="replace") + "\n")


def cmd_eval(cfg, out) -> None:
    from .checkpoint import load_checkpoint
    from .data import PAD_ID
    from .diffusion import NoiseSchedule, nelbo_ppl_bound
    from .trainer import step_rng

    model = load_checkpoint(_need_ckpt(cfg)).model
    train, valid = _corpus(cfg, model.config.context_len)
    seqs = valid.sequences if len(valid) else train.sequences
    ppl = nelbo_ppl_bound(model, seqs, cfg["eval.mc"], NoiseSchedule(), step_rng(cfg["seed"], 0, 2),
                          exempt=seqs == PAD_ID, batch_size=cfg["eval.batch"])
    print(f"sequences {len(seqs)} mc {cfg['eval.mc']} ppl_bound {ppl:.6f}", file=out)


def cmd_bench(cfg, out) -> None:
    from .bench import run_sweep

    bc = cfg.bench_config()

    def on_cell(bk, L, st):
        if st is None:
            print(f"{bk} L={L} skipped", file=sys.stderr)
        else:
            print(f"{bk} L={L} mean_s={st.mean:.4f} tokens_per_s={st.tokens_per_s:.1f}", file=sys.stderr)

    rep = run_sweep(bc, on_cell=on_cell)
    for bk, f in sorted(rep.fits.items()):
        print(f"fit {bk} exponent {f.exponent:.4f} residual {f.residual:.4f}", file=out)
    print(f"csv {rep.csv_path}", file=out)
    print(f"svg {rep.svg_path}", file=out)


def cmd_inspect(cfg, out) -> None:
    from .checkpoint import read_header

    h = read_header(_need_ckpt(cfg))
    print(f"format_version={h['format_version']}", file=out)
    print(f"step={h['step']}", file=out)
    print(f"seed={h['rng']['seed']}", file=out)
    print(f"has_optimizer={str(h['has_optimizer']).lower()}", file=out)
    for k, v in h["model_config"].items():
        print(f"{k}={v}", file=out)
    print(f"tensors={len(h['tensors'])}", file=out)
    for e in h["tensors"]:
        shape = "x".join(str(s) for s in e["shape"]) or "scalar"
        print(f"  {e['name']} {shape} offset={e['offset']} nbytes={e['nbytes']}", file=out)


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = effective_config(args)
        sys.stderr.write("# effective config\n" + cfg.to_text())
        COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (MaskdiffError, OSError) as exc:
        print(f"maskdiff: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
