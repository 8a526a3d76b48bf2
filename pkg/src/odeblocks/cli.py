"""Command-line entry point: ``odeblocks <subcommand> ...``.

Exit codes: 0 success / check passed, 1 check failed, 2 usage or configuration
error, 3 numerical failure (NaN loss, divergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, nnkit, odelab
from .lmstack import LanguageModel, ModelConfig
from .pcblock import BLOCK_KINDS
from .textdata import Vocab, batchify, build_vocab, load_corpus, split_text
from .trainkit import (TrainConfig, TrainingDiverged, coeff_trace, evaluate, prepare_data,
                       read_metrics, summarize, train, truncation_experiment, write_coeff_trace)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

GRADCHECK_TOL = 1e-4

# keys of the flat JSON run config besides the ModelConfig / TrainConfig fields
RUN_KEYS = {"corpus": None, "out_dir": "runs/default", "level": "char", "max_vocab": None,
            "depths": [1]}

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    corpus: str | None = None
    out_dir: str = "runs/default"
    level: str = "char"
    max_vocab: int | None = None
    depths: list = dataclasses.field(default_factory=lambda: [1])

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - _MODEL_KEYS - _TRAIN_KEYS - set(RUN_KEYS)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        try:
            model = ModelConfig.from_dict({k: v for k, v in d.items() if k in _MODEL_KEYS})
            tr = TrainConfig.from_dict({k: v for k, v in d.items() if k in _TRAIN_KEYS})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc
        extra = {k: d.get(k, v) for k, v in RUN_KEYS.items()}
        return cls(model, tr, **extra)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        out = {**self.model.to_dict(), **dataclasses.asdict(self.train)}
        out.update(corpus=self.corpus, out_dir=self.out_dir, level=self.level,
                   max_vocab=self.max_vocab, depths=list(self.depths))
        return out


def config_help() -> str:
    defaults = {**ModelConfig().to_dict(), **dataclasses.asdict(TrainConfig()), **RUN_KEYS}
    return "config keys (defaults): " + ", ".join(f"{k}={v!r}" for k, v in defaults.items())


def _write_manifest(out: Path, cfg: RunConfig, command: str) -> None:
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True, indent=2)
    (out / "config.json").write_text(cfg_json + "\n")
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(cfg_json.encode()).hexdigest(),
        "seed": cfg.model.seed,
        "versions": {"odeblocks": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# subcommands ---------------------------------------------------------------------


def cmd_ode_validate(args) -> int:
    problem = odelab.PROBLEMS[args.problem]()
    h0 = args.h0 if args.h0 is not None else (0.1 if args.problem == "decay" else problem.horizon / 50)
    try:
        rep = odelab.empirical_order(problem, args.method, h0, args.levels)
    except odelab.ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    print(f"{'h':>12} {'global_error':>14} {'p_hat':>8}")
    for row in rep.rows():
        p = f"{row['p_hat']:.4f}" if row["p_hat"] != "" else ""
        print(f"{row['h']:>12.6g} {row['global_error']:>14.6e} {p:>8}")
    lo, hi = odelab.ORDER_BANDS[args.method]
    ok = rep.within_band()
    flag = " (error underflow, truncated)" if rep.underflow else ""
    print(f"{args.method}: estimated order {rep.order:.4f}, band [{lo}, {hi}] -> "
          f"{'PASS' if ok else 'FAIL'}{flag}")
    if args.out:
        rep.to_csv(args.out)
    return EXIT_OK if ok else EXIT_FAIL


def gradcheck_model(block: str, width: int = 32, seq: int = 8, samples: int = 200, *,
                    batch: int = 2, vocab: int = 16, heads: int = 4, layers: int = 1,
                    seed: int = 1) -> float:
    """Max relative gradient error for a small dropout-free model of ``block``."""
    cfg = ModelConfig(vocab_size=vocab, width=width, heads=heads, layers=layers, block=block,
                      dropout=0.0, attn_dropout=0.0, relu_dropout=0.0, sublayer_drop=0.0,
                      max_seq_len=seq, seed=seed)
    model = LanguageModel(cfg)
    rng = np.random.default_rng([seed, 7])
    x = rng.integers(0, vocab, (batch, seq))
    y = rng.integers(0, vocab, (batch, seq))
    return nnkit.grad_check(lambda: model.loss(x, y), model.store, samples, rng)


def cmd_gradcheck(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be at least 1")
    err = gradcheck_model(args.block, args.width, args.seq, args.samples, seed=args.seed)
    ok = err <= GRADCHECK_TOL
    print(f"{args.block}: max relative error {err:.3e} over {args.samples} samples -> "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.out:
        cfg.out_dir = args.out
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = load_corpus(cfg.corpus)
    vocab, train_b, valid_b = prepare_data(text, cfg.train, cfg.level, cfg.max_vocab)
    cfg.model = dataclasses.replace(cfg.model, vocab_size=len(vocab))
    vocab.save(out / "vocab.tsv")
    _write_manifest(out, cfg, "train")
    model = LanguageModel(cfg.model)
    rows = train(model, train_b, valid_b, cfg.train, out,
                 on_row=lambda r: print(f"step {r.step:>6} valid_ppl {r.valid_ppl:.4f}"))
    best = min(rows, key=lambda r: r.valid_loss)
    print(f"best valid ppl {best.valid_ppl:.6f} at step {best.step}; artifacts in {out}")
    return EXIT_OK


def eval_checkpoint(ckpt, corpus=None) -> tuple[float, float]:
    """(valid loss, valid ppl) of a saved run, using its config.json and vocab.tsv."""
    run_dir = Path(ckpt).parent
    cfg = RunConfig.load(run_dir / "config.json")
    vocab = Vocab.load(run_dir / "vocab.tsv", cfg.level)
    model = LanguageModel(cfg.model)
    model.store.load_state_dict(nnkit.load_checkpoint(ckpt))
    _, valid_text = split_text(load_corpus(corpus if corpus is not None else cfg.corpus))
    valid_b = batchify(vocab.encode(valid_text), cfg.train.batch_size, cfg.train.seq_len)
    if cfg.train.eval_batches:
        valid_b = valid_b[: cfg.train.eval_batches]
    loss = evaluate(model, valid_b)
    return loss, math.exp(loss)


def cmd_eval(args) -> int:
    if not Path(args.ckpt).exists():
        raise UsageError(f"no checkpoint at {args.ckpt}")
    loss, ppl = eval_checkpoint(args.ckpt, args.corpus)
    print(f"valid_loss {loss!r}\nvalid_ppl {ppl!r}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_truncation(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig(ModelConfig(), TrainConfig())
    blocks = args.blocks.split(",") if args.blocks else ["vanilla", "rk4", "pc-rk4-ms"]
    bad = [b for b in blocks if b not in BLOCK_KINDS]
    if bad:
        raise UsageError(f"unknown block kind(s): {', '.join(bad)}")
    seeds = _int_list(args.seeds) if args.seeds else list(cfg.train.seeds)
    depths = _int_list(args.depths) if args.depths else list(cfg.depths)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, cfg, "truncation")
    text = load_corpus(cfg.corpus)
    results = truncation_experiment(text, blocks, seeds, depths, cfg.model, cfg.train, out,
                                    workers=args.workers, level=cfg.level, max_vocab=cfg.max_vocab)
    _write_cell_manifests(out, cfg, text, results)
    print(f"{'kind':<12} {'depth':>5} {'seed':>6} {'best_valid_ppl':>15} {'params':>8}")
    for r in results:
        print(f"{r['kind']:<12} {r['depth']:>5} {r['seed']:>6} {r['best_valid_ppl']:>15.4f} "
              f"{r['params']:>8}")
    for (kind, depth), mean in summarize(results).items():
        print(f"mean {kind:<12} depth {depth}: {mean:.4f}")
    return EXIT_OK


def _write_cell_manifests(out: Path, cfg: RunConfig, text: str, results) -> None:
    """Make every cell directory evaluable and re-launchable on its own."""
    vocab = build_vocab(split_text(text)[0], cfg.level, cfg.max_vocab)
    for r in results:
        cell = out / f"{r['kind']}_L{r['depth']}_s{r['seed']}"
        if not cell.is_dir():
            continue
        model = dataclasses.replace(cfg.model, block=r["kind"], layers=r["depth"], seed=r["seed"],
                                    vocab_size=len(vocab))
        cell_cfg = dataclasses.replace(cfg, model=model, out_dir=str(cell), depths=[r["depth"]])
        cell_cfg.train = dataclasses.replace(cfg.train, seeds=[r["seed"]])
        vocab.save(cell / "vocab.tsv")
        _write_manifest(cell, cell_cfg, "train")


def cmd_coeff_trace(args) -> int:
    path = Path(args.metrics)
    if not path.exists():
        raise UsageError(f"no metrics file at {path}")
    order = args.order
    if order is None:
        cfg_path = path.parent / "config.json"
        order = 4
        if cfg_path.exists():
            order = RunConfig.load(cfg_path).model.kind.order
    trace = coeff_trace(read_metrics(path), order)
    out = Path(args.out) if args.out else path.parent / "coeff_trace.csv"
    write_coeff_trace(trace, out)
    for rec in trace:
        print(", ".join(f"{k}={'' if v is None else (f'{v:.6g}' if isinstance(v, float) else v)}"
                        for k, v in rec.items()))
    return EXIT_OK


# parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odeblocks", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ode-validate", help="empirical convergence order of a solver")
    s.add_argument("--method", required=True, choices=odelab.METHODS)
    s.add_argument("--problem", default="decay", choices=sorted(odelab.PROBLEMS))
    s.add_argument("--h0", type=float, default=None,
                   help="initial step (default 0.1 for decay, 2*pi/50 for oscillator)")
    s.add_argument("--levels", type=int, default=4, help="number of step halvings (default 4)")
    s.add_argument("--out", help="CSV path for the order report")
    s.set_defaults(func=cmd_ode_validate)

    s = sub.add_parser("gradcheck", help="finite-difference check of a block's gradients")
    s.add_argument("--block", required=True, choices=BLOCK_KINDS)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--seq", type=int, default=8)
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--seed", type=int, default=1)
    s.set_defaults(func=cmd_gradcheck)

    epilog = config_help()
    s = sub.add_parser("train", help="train one language model", epilog=epilog)
    s.add_argument("--config", required=True, help="JSON run config")
    s.add_argument("--out", help="output directory (overrides out_dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="validation loss/ppl of a saved checkpoint")
    s.add_argument("--ckpt", required=True, help="model.pck inside a run directory")
    s.add_argument("--corpus", help="corpus path (default: the run's corpus)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("truncation", help="single/two-layer ppl comparison across block kinds",
                       epilog=epilog)
    s.add_argument("--config", help="JSON run config")
    s.add_argument("--blocks", help=f"comma-separated kinds from: {', '.join(BLOCK_KINDS)}")
    s.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    s.add_argument("--depths", help="comma-separated depths (default: config depths)")
    s.add_argument("--out", help="output directory")
    s.add_argument("--workers", type=int, default=1, help="parallel cell processes")
    s.set_defaults(func=cmd_truncation)

    s = sub.add_parser("coeff-trace", help="EMA / corrector coefficient trajectories")
    s.add_argument("--metrics", required=True, help="metrics.csv of a run")
    s.add_argument("--order", type=int, default=None, help="stage count (default: from config.json)")
    s.add_argument("--out", help="CSV path (default: coeff_trace.csv next to the metrics)")
    s.set_defaults(func=cmd_coeff_trace)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
