"""Optimiser, schedule, training loop and the two desk-scale experiments."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nnkit
from .lmstack import LanguageModel, ModelConfig
from .nnkit import ParamStore
from .odekit import ema_weights
from .textdata import Batch, batchify, build_vocab, iter_epochs, split_text

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["step", "train_loss", "valid_loss", "valid_ppl", "lr", "gamma",
                   "corrector_w1", "corrector_w2", "corrector_w3", "corrector_w4"]
TABLE_COLUMNS = ["kind", "depth", "seed", "best_valid_ppl", "steps", "params"]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    peak_lr: float = 0.002
    warmup_steps: int = 200
    max_steps: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    grad_clip: float = 1.0
    seeds: list = field(default_factory=lambda: [1])
    log_interval: int = 200
    eval_batches: int | None = None   # None: whole validation split

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.max_steps < 0 or self.log_interval < 1:
            raise ValueError("max_steps must be >= 0 and log_interval >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise KeyError(f"unknown TrainConfig key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


# optimiser -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.997
    eps: float = 1e-8


def adam_update(store: ParamStore, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam step over every parameter; gradients are zeroed after."""
    for p in store:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in {p.name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for p in store:
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in store))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in store:
            p.grad *= scale
    return norm


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then inverse square-root decay."""
    w = cfg.warmup_steps
    if step <= w:
        return cfg.peak_lr * step / w
    return cfg.peak_lr * math.sqrt(w / step)


# training ----------------------------------------------------------------------


@dataclass
class MetricsRow:
    step: int
    train_loss: float | None
    valid_loss: float
    valid_ppl: float
    lr: float
    gamma: float | None = None
    corrector_weights: list | None = None
    wall_seconds: float = 0.0

    def as_csv(self) -> dict:
        w = self.corrector_weights or [None] * 4
        row = {"step": self.step, "train_loss": self.train_loss, "valid_loss": self.valid_loss,
               "valid_ppl": self.valid_ppl, "lr": self.lr, "gamma": self.gamma,
               "corrector_w1": w[0], "corrector_w2": w[1], "corrector_w3": w[2], "corrector_w4": w[3]}
        return {k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in row.items()}


def write_metrics(rows: Iterable[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_csv())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def evaluate(model: LanguageModel, batches: Sequence[Batch]) -> float:
    """Mean validation loss (eval mode, no dropout)."""
    if not batches:
        raise ValueError("no validation batches")
    with nnkit.no_grad():
        losses = [float(model.loss(b.inputs, b.targets).data) for b in batches]
    return float(np.mean(losses))


def _snapshot(model: LanguageModel, step, train_loss, valid_loss, lr, t0) -> MetricsRow:
    gammas = model.gammas()
    cws = model.corrector_weights()
    return MetricsRow(step, train_loss, valid_loss, math.exp(valid_loss), lr,
                      gammas[0] if gammas else None, cws[0] if cws else None,
                      time.perf_counter() - t0)


def train(model: LanguageModel, train_batches: Sequence[Batch], valid_batches: Sequence[Batch],
          cfg: TrainConfig, out_dir=None, on_row: Callable[[MetricsRow], None] | None = None
          ) -> list[MetricsRow]:
    """Train for ``cfg.max_steps``; evaluate every ``log_interval`` and at the end.

    With ``out_dir`` set, ``metrics.csv`` is rewritten after each evaluation and
    ``model.pck`` holds the best-validation parameters.  Randomness comes only
    from the model seed.
    """
    seed = model.cfg.seed
    drop_rng = np.random.default_rng([seed, 1])
    data = iter_epochs(list(train_batches), np.random.default_rng([seed, 2]))
    valid = list(valid_batches)[: cfg.eval_batches] if cfg.eval_batches else list(valid_batches)
    out = Path(out_dir) if out_dir is not None else None
    state = AdamState()
    rows: list[MetricsRow] = []
    t0 = time.perf_counter()
    best = math.inf

    def record(row: MetricsRow):
        nonlocal best
        rows.append(row)
        if on_row:
            on_row(row)
        if out is not None:
            if row.valid_loss < best:
                nnkit.save_checkpoint(model.store, out / "model.pck")
            write_metrics(rows, out / "metrics.csv")
        best = min(best, row.valid_loss)

    record(_snapshot(model, 0, None, evaluate(model, valid), 0.0, t0))
    running = []
    for step in range(1, cfg.max_steps + 1):
        batch = next(data)
        lr = lr_at(step, cfg)
        loss = model.loss(batch.inputs, batch.targets, train=True, rng=drop_rng)
        if not math.isfinite(float(loss.data)):
            raise TrainingDiverged(f"loss is {float(loss.data)} at step {step}")
        loss.backward()
        clip_grad_norm(model.store, cfg.grad_clip)
        adam_update(model.store, state, lr)
        running.append(float(loss.data))
        if step % cfg.log_interval == 0 or step == cfg.max_steps:
            valid_loss = evaluate(model, valid)
            if not math.isfinite(valid_loss):
                raise TrainingDiverged(f"validation loss is {valid_loss} at step {step}")
            record(_snapshot(model, step, float(np.mean(running)), valid_loss, lr, t0))
            log.info("step %d train %.4f valid %.4f", step, rows[-1].train_loss, valid_loss)
            running = []
    return rows


# experiments ---------------------------------------------------------------------


def prepare_data(text: str, cfg: TrainConfig, level: str = "char", max_vocab: int | None = None):
    """Vocab from the training split; returns (vocab, train batches, valid batches)."""
    train_text, valid_text = split_text(text)
    vocab = build_vocab(train_text, level, max_vocab)
    train_b = batchify(vocab.encode(train_text), cfg.batch_size, cfg.seq_len)
    valid_b = batchify(vocab.encode(valid_text), cfg.batch_size, cfg.seq_len)
    return vocab, train_b, valid_b


def _run_cell(args) -> dict:
    kind, depth, seed, model_dict, train_cfg, train_b, valid_b, cell_dir = args
    mcfg = ModelConfig.from_dict({**model_dict, "block": kind, "layers": depth, "seed": seed})
    model = LanguageModel(mcfg)
    row = {"kind": kind, "depth": depth, "seed": seed, "best_valid_ppl": math.nan,
           "steps": train_cfg.max_steps, "params": model.num_params()}
    try:
        if cell_dir is not None:
            Path(cell_dir).mkdir(parents=True, exist_ok=True)
        rows = train(model, train_b, valid_b, train_cfg, cell_dir)
        row["best_valid_ppl"] = min(r.valid_ppl for r in rows)
    except (FloatingPointError, ValueError) as exc:
        log.warning("cell %s/depth %d/seed %d failed: %s", kind, depth, seed, exc)
        row["failed"] = str(exc)
    return row


def truncation_experiment(text: str, kinds: Sequence[str], seeds: Sequence[int],
                          depths: Sequence[int], model_cfg: ModelConfig, train_cfg: TrainConfig,
                          out_dir=None, workers: int = 1, level: str = "char",
                          max_vocab: int | None = None) -> list[dict]:
    """Train one model per (kind, depth, seed) under an identical budget.

    Every cell sees the same batches, schedule and step count; the data order
    depends only on the seed.  Failed cells report ``nan`` and the run goes on.
    """
    vocab, train_b, valid_b = prepare_data(text, train_cfg, level, max_vocab)
    base = {**model_cfg.to_dict(), "vocab_size": len(vocab)}
    cells = []
    for depth in depths:
        for kind in kinds:
            for seed in seeds:
                cell_dir = None if out_dir is None else Path(out_dir) / f"{kind}_L{depth}_s{seed}"
                cells.append((kind, depth, seed, base, train_cfg, train_b, valid_b, cell_dir))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    if out_dir is not None:
        write_table(results, Path(out_dir) / "truncation.csv")
    return results


def summarize(results: Sequence[dict]) -> dict:
    """Mean best-valid ppl over seeds per (kind, depth); failed cells excluded."""
    groups: dict = {}
    for r in results:
        groups.setdefault((r["kind"], r["depth"]), []).append(r["best_valid_ppl"])
    return {k: float(np.mean([v for v in vs if math.isfinite(v)])) if any(map(math.isfinite, vs))
            else math.nan for k, vs in groups.items()}


def write_table(results: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in results:
            ppl = r["best_valid_ppl"]
            w.writerow({**r, "best_valid_ppl": "failed" if not math.isfinite(ppl) else repr(ppl)})


def coeff_trace(rows: Iterable, order: int) -> list[dict]:
    """Effective EMA stage weights and raw corrector weights per logged step.

    ``rows`` may be MetricsRow objects or dicts as returned by ``read_metrics``.
    """
    out = []
    for r in rows:
        d = r.as_csv() if isinstance(r, MetricsRow) else r
        g = d.get("gamma")
        g = None if g in ("", None) else float(g)
        rec = {"step": int(float(d["step"])), "gamma": g}
        ws = ema_weights(g, order) if g is not None else [None] * order
        for i, w in enumerate(ws, 1):
            rec[f"w{i}"] = w
        for i in range(1, 5):
            v = d.get(f"corrector_w{i}")
            rec[f"corrector_w{i}"] = None if v in ("", None) else float(v)
        out.append(rec)
    return out


def write_coeff_trace(trace: Sequence[dict], path) -> None:
    if not trace:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(trace[0]))
        w.writeheader()
        for rec in trace:
            w.writerow({k: "" if v is None else v for k, v in rec.items()})
