"""Decoder-only language model: embeddings -> L blocks -> final LN -> output head."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import nnkit
from .nnkit import DataError, ParamStore, Tensor
from .pcblock import BlockKind, LayerState, PCBlock, _logit, sublayer_drop


@dataclass
class ModelConfig:
    vocab_size: int = 128
    width: int = 64
    heads: int = 4
    layers: int = 1
    hidden_mult: int = 4
    block: str = "vanilla"
    dropout: float = 0.1          # on each sublayer evaluation F(y)
    attn_dropout: float = 0.1
    relu_dropout: float = 0.1
    sublayer_drop: float = 0.1
    max_seq_len: int = 256
    seed: int = 1
    rk_norm: bool = True
    rk_norm_per_stage: bool = False
    layerwise_gamma: bool = False
    gamma_init: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        BlockKind.parse(self.block)
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.layers < 0:
            raise ValueError("layers must be non-negative")
        for name in ("dropout", "attn_dropout", "relu_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not 0.0 <= self.sublayer_drop <= 1.0:
            raise ValueError("sublayer_drop must lie in [0, 1]")
        if min(self.vocab_size, self.width, self.heads, self.hidden_mult, self.max_seq_len) < 1:
            raise ValueError("sizes must be positive")
        _logit(self.gamma_init)

    @property
    def kind(self) -> BlockKind:
        return BlockKind.parse(self.block)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise KeyError(f"unknown ModelConfig key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    embeddings (V + S)d, final LN 2d, head dV + V; per block: attention
    4d^2 + 3d (no key bias), FFN 2md^2 + md + d, two sublayer LNs 4d,
    RK-Norm 2d per LN set (2 sets, or n with per-stage norms), a corrector
    vector of 4 for multistep blocks; EMA adds 1 scalar (shared) or 1 per layer.
    """
    d, V, S, m, L = cfg.width, cfg.vocab_size, cfg.max_seq_len, cfg.hidden_mult, cfg.layers
    kind = cfg.kind
    total = (V + S) * d + 2 * d + d * V + V
    block = 4 * d * d + 3 * d + 2 * m * d * d + m * d + d + 4 * d
    if kind.solver != "vanilla" and cfg.rk_norm:
        block += 2 * d * (kind.order if cfg.rk_norm_per_stage else 2)
    if kind.corrector == "multistep":
        block += 4
    total += L * block
    if kind.mode == "ema" and L > 0:
        total += L if cfg.layerwise_gamma else 1
    return total


class LanguageModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        kind = cfg.kind
        rng = np.random.default_rng(cfg.seed)
        self.store = ParamStore(seed=cfg.seed)
        d = cfg.width
        # token vectors are scaled by sqrt(d) in forward, so both embeddings enter the
        # residual stream at the same unit scale as the block outputs
        self.tok_embed = self.store.add("embed.tok", rng.normal(0.0, d**-0.5, (cfg.vocab_size, d)))
        self.pos_embed = self.store.add("embed.pos", rng.normal(0.0, d**-0.5, (cfg.max_seq_len, d)))
        self.embed_scale = float(np.sqrt(d))
        shared_gamma = None
        if kind.mode == "ema" and not cfg.layerwise_gamma and cfg.layers > 0:
            shared_gamma = self.store.add("gamma_raw", np.array(_logit(cfg.gamma_init)))
        self.blocks = [
            PCBlock(self.store, f"layer{i}", kind, d, cfg.heads, cfg.hidden_mult, rng,
                    rk_norm=cfg.rk_norm, rk_norm_per_stage=cfg.rk_norm_per_stage,
                    gamma_raw=shared_gamma, gamma_init=cfg.gamma_init, dropout=cfg.dropout,
                    attn_dropout=cfg.attn_dropout, relu_dropout=cfg.relu_dropout)
            for i in range(cfg.layers)
        ]
        self.ln_final = nnkit.init_layer_norm(self.store, "ln_final", d)
        # small head so the untrained model predicts close to uniform
        self.head = nnkit.init_linear(self.store, "head", d, cfg.vocab_size, rng, std=0.02)

    def num_params(self) -> int:
        return self.store.num_scalars()

    def forward(self, tokens, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DataError(f"tokens must be [batch, seq], got shape {tokens.shape}")
        if tokens.shape[1] > self.cfg.max_seq_len:
            raise DataError(f"sequence length {tokens.shape[1]} exceeds {self.cfg.max_seq_len}")
        if train and rng is None:
            raise ValueError("training mode needs an rng")
        x = nnkit.embedding(tokens, self.tok_embed) * self.embed_scale
        x = x + _positions(self.pos_embed, tokens.shape[1])
        state = LayerState(train=train)
        for block in self.blocks:
            x = sublayer_drop(lambda y=x, b=block: b.forward(y, state, rng), x,
                              self.cfg.sublayer_drop, train, rng)
        x = nnkit.layer_norm(x, self.ln_final["gain"], self.ln_final["bias"])
        return nnkit.linear(x, self.head["w"], self.head["b"])

    def loss(self, inputs, targets, train: bool = False, rng=None) -> Tensor:
        return nnkit.softmax_cross_entropy(self.forward(inputs, train, rng), targets)

    def gammas(self) -> list[float]:
        """Current EMA coefficient per layer (empty for non-EMA kinds)."""
        return [float(b.gamma().data) for b in self.blocks if b.gamma_raw is not None]

    def corrector_weights(self) -> list[list[float]]:
        return [b.corrector_w.data.tolist() for b in self.blocks if b.corrector_w is not None]


def _positions(table, n: int) -> Tensor:
    return nnkit.embedding(np.arange(n), table)


def loss_and_ppl(logits, targets) -> tuple[Tensor, float]:
    loss = nnkit.softmax_cross_entropy(logits, targets)
    return loss, nnkit.perplexity(loss)
