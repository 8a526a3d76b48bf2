"""Predictor-corrector transformer blocks.

A block evaluates one merged sublayer ``F(y) = FFN(LN(SAN(LN(y))))`` several
times per layer.  The predictor is a 2- or 4-stage Runge-Kutta step whose
stages are layer-normalised ("RK-Norm") and combined either with the classical
weights or with EMA weights ``gamma * (1 - gamma)**(n - i)``.  The corrector
evaluates ``F`` once more at the prediction and either adds it directly
(backward Euler) or mixes it with the derivatives stored by the previous layers
using learnable Adams-Moulton style weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnkit, odekit
from .nnkit import ParamStore, Tensor
from .odekit import CORRECTOR_INIT, DerivativeHistory, Schedule

__all__ = [
    "BLOCK_KINDS",
    "BlockKind",
    "LayerState",
    "PCBlock",
    "predictor_corrector",
    "sublayer_drop",
]

BLOCK_KINDS = (
    "vanilla", "rk2", "rk4", "rk2-ema", "rk4-ema",
    "pc-rk2-ms", "pc-rk2-be", "pc-rk4-ms", "pc-rk4-be",
)

HISTORY_CAPACITY = 3

_CORRECTORS = {"ms": "multistep", "be": "backward-euler"}


@dataclass(frozen=True)
class BlockKind:
    solver: str = "vanilla"        # vanilla | rk2 | rk4
    mode: str = "classical"        # classical | ema
    corrector: str = "none"        # none | multistep | backward-euler

    def __post_init__(self):
        if self.solver not in ("vanilla", "rk2", "rk4"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.mode not in ("classical", "ema"):
            raise ValueError(f"unknown coefficient mode {self.mode!r}")
        if self.corrector not in ("none", "multistep", "backward-euler"):
            raise ValueError(f"unknown corrector {self.corrector!r}")
        if self.solver == "vanilla" and (self.mode, self.corrector) != ("classical", "none"):
            raise ValueError("vanilla blocks take no coefficients and no corrector")

    @classmethod
    def parse(cls, text: str) -> "BlockKind":
        if text not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {text!r}; expected one of {', '.join(BLOCK_KINDS)}")
        if text == "vanilla":
            return cls()
        parts = text.split("-")
        if parts[0] == "pc":
            return cls(parts[1], "ema", _CORRECTORS[parts[2]])
        return cls(parts[0], "ema" if len(parts) == 2 else "classical")

    def __str__(self) -> str:
        if self.solver == "vanilla":
            return "vanilla"
        if self.corrector != "none":
            short = {v: k for k, v in _CORRECTORS.items()}[self.corrector]
            return f"pc-{self.solver}-{short}"
        return self.solver + ("-ema" if self.mode == "ema" else "")

    @property
    def order(self) -> int:
        return {"vanilla": 1, "rk2": 2, "rk4": 4}[self.solver]


@dataclass
class LayerState:
    """Per-forward-pass state shared down the layer stack."""

    history: DerivativeHistory = field(default_factory=lambda: DerivativeHistory(HISTORY_CAPACITY))
    train: bool = False

    def reset(self) -> None:
        self.history.clear()


def predictor_corrector(y, kind: BlockKind, F, *, gamma=0.5, corrector_weights=CORRECTOR_INIT,
                        norm=None, history: DerivativeHistory | None = None):
    """One layer update for ``kind`` given the stage function ``F``.

    ``norm(i, F_i)`` is the RK-Norm hook (None disables it).  The raw ``F(P)``
    of the corrector is pushed onto ``history`` when one is given.
    """
    if kind.solver == "vanilla":
        return odekit.euler_step(y, F).next_state

    sched = Schedule.ema(gamma) if kind.mode == "ema" else Schedule.classical(kind.order)
    step = odekit.rk2_step if kind.solver == "rk2" else odekit.rk4_step
    pred = step(y, F, sched, norm=norm).next_state
    if kind.corrector == "none":
        return pred

    f_new = F(pred)
    if not np.all(np.isfinite(getattr(f_new, "data", f_new))):
        raise odekit.StageDivergence("corrector")
    if kind.corrector == "backward-euler":
        out = odekit.backward_euler_correct(y, f_new)
    else:
        if history is None:
            history = DerivativeHistory(HISTORY_CAPACITY)
        out = odekit.am4_correct(y, f_new, history, Schedule.learned(corrector_weights))
    if history is not None:
        history.push(f_new)
    return out


def sublayer_drop(output, y, rate: float, train: bool, rng: np.random.Generator | None):
    """Skip the whole block with probability ``rate`` in training.

    ``output`` may be a zero-argument callable, which is then only evaluated
    when the block is kept.
    """
    if train and rate > 0.0 and rng.random() < rate:
        return y
    return output() if callable(output) else output


class PCBlock:
    """Parameters and forward pass of one block.

    ``gamma_raw`` is passed in when the model shares one coefficient across
    layers; otherwise the block owns its own.
    """

    def __init__(self, store: ParamStore, prefix: str, kind: BlockKind, width: int, heads: int,
                 hidden_mult: int, rng: np.random.Generator, *, rk_norm: bool = True,
                 rk_norm_per_stage: bool = False, gamma_raw=None, gamma_init: float = 0.5,
                 dropout: float = 0.0, attn_dropout: float = 0.0, relu_dropout: float = 0.0):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.kind = kind
        self.heads = heads
        self.dropout, self.attn_dropout, self.relu_dropout = dropout, attn_dropout, relu_dropout

        self.ln_attn = nnkit.init_layer_norm(store, f"{prefix}.ln_attn", width)
        self.attn = nnkit.init_attention(store, f"{prefix}.attn", width, rng)
        self.ln_ffn = nnkit.init_layer_norm(store, f"{prefix}.ln_ffn", width)
        self.ffn = nnkit.init_ffn(store, f"{prefix}.ffn", width, hidden_mult, rng)

        self.rk_norms = []
        if kind.solver != "vanilla" and rk_norm:
            n = kind.order if rk_norm_per_stage else 2
            self.rk_norms = [nnkit.init_layer_norm(store, f"{prefix}.rk_norm{i}", width) for i in range(n)]

        self.gamma_raw = gamma_raw
        if kind.mode == "ema" and gamma_raw is None:
            self.gamma_raw = store.add(f"{prefix}.gamma_raw", np.array(_logit(gamma_init)))

        self.corrector_w = None
        if kind.corrector == "multistep":
            self.corrector_w = store.add(f"{prefix}.corrector_w", np.array(CORRECTOR_INIT))

    def gamma(self) -> Tensor | None:
        return None if self.gamma_raw is None else nnkit.sigmoid(self.gamma_raw)

    def sublayer(self, y, train: bool = False, rng=None) -> Tensor:
        h = nnkit.layer_norm(y, self.ln_attn["gain"], self.ln_attn["bias"])
        h = nnkit.multi_head_attention(h, self.attn, self.heads, causal=True,
                                       dropout_rate=self.attn_dropout, train=train, rng=rng)
        h = nnkit.layer_norm(h, self.ln_ffn["gain"], self.ln_ffn["bias"])
        h = nnkit.ffn(h, self.ffn, dropout_rate=self.relu_dropout, train=train, rng=rng)
        return nnkit.dropout(h, self.dropout, train, rng)

    def _norm(self, i: int, f):
        ln = self.rk_norms[i % len(self.rk_norms)]
        return nnkit.layer_norm(f, ln["gain"], ln["bias"])

    def forward(self, y, state: LayerState, rng=None) -> Tensor:
        weights = CORRECTOR_INIT
        if self.corrector_w is not None:
            weights = [self.corrector_w[i] for i in range(4)]
        return predictor_corrector(
            y, self.kind, lambda z: self.sublayer(z, state.train, rng),
            gamma=self.gamma(), corrector_weights=weights,
            norm=self._norm if self.rk_norms else None, history=state.history,
        )


def _logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"gamma init must lie in (0, 1), got {p}")
    return math.log(p / (1.0 - p))
