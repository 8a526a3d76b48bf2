"""Transformer sublayers built on the autodiff primitives."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import Tensor

LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class DataError(ValueError):
    pass


# initialisation ------------------------------------------------------------


def init_linear(store: ParamStore, prefix: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, bias: bool = True, std: float | None = None) -> dict:
    """W ~ N(0, std^2) with std = 1/sqrt(fan_in) by default, b = 0."""
    std = fan_in**-0.5 if std is None else std
    out = {"w": store.add(f"{prefix}.w", rng.normal(0.0, std, (fan_in, fan_out)))}
    if bias:
        out["b"] = store.add(f"{prefix}.b", np.zeros(fan_out))
    return out


def init_layer_norm(store: ParamStore, prefix: str, width: int) -> dict:
    return {"gain": store.add(f"{prefix}.gain", np.ones(width)),
            "bias": store.add(f"{prefix}.bias", np.zeros(width))}


def init_attention(store: ParamStore, prefix: str, width: int, rng) -> dict:
    # no key bias: it shifts every score in a row equally and has zero gradient
    return {
        "q": init_linear(store, f"{prefix}.q", width, width, rng),
        "k": init_linear(store, f"{prefix}.k", width, width, rng, bias=False),
        "v": init_linear(store, f"{prefix}.v", width, width, rng),
        "o": init_linear(store, f"{prefix}.o", width, width, rng),
    }


def init_ffn(store: ParamStore, prefix: str, width: int, hidden_mult: int, rng) -> dict:
    return {
        "fc1": init_linear(store, f"{prefix}.fc1", width, hidden_mult * width, rng),
        "fc2": init_linear(store, f"{prefix}.fc2", hidden_mult * width, width, rng),
    }


# forward ops ---------------------------------------------------------------


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"layer_norm: input width {x.shape[-1]} != gain width {gain.shape[-1]}")
    return T.layer_norm(x, gain, bias, eps)


def linear(x, W, b=None) -> Tensor:
    if x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        raise ShapeError(f"linear: {x.shape} @ {W.shape}")
    return T.linear(x, W, b)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return T.dropout_mask(x, keep / (1.0 - rate))


def causal_mask(n: int) -> np.ndarray:
    """True where attention is allowed (key index <= query index)."""
    return np.tril(np.ones((n, n), dtype=bool))


def multi_head_attention(x, p: dict, heads: int, causal: bool = True, *,
                         dropout_rate: float = 0.0, train: bool = False, rng=None,
                         return_weights: bool = False):
    B, S, D = x.shape
    if D % heads:
        raise ValueError(f"width {D} not divisible by {heads} heads")
    dh = D // heads

    def split(t):
        return t.reshape(B, S, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, p["q"]["w"], p["q"].get("b")))
    k = linear(x, p["k"]["w"], p["k"].get("b")).reshape(B, S, heads, dh).transpose(0, 2, 3, 1)
    v = split(linear(x, p["v"]["w"], p["v"].get("b")))
    scores = (q @ k) * (1.0 / np.sqrt(dh))
    probs = T.softmax(scores, causal_mask(S) if causal else None)
    att = dropout(probs, dropout_rate, train, rng)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
    out = linear(ctx, p["o"]["w"], p["o"]["b"])
    return (out, probs.data) if return_weights else out


def ffn(x, p: dict, *, dropout_rate: float = 0.0, train: bool = False, rng=None) -> Tensor:
    h = T.relu(linear(x, p["fc1"]["w"], p["fc1"]["b"]))
    h = dropout(h, dropout_rate, train, rng)
    return linear(h, p["fc2"]["w"], p["fc2"]["b"])


def embedding(ids, table) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"token id out of range [0, {table.shape[0]})")
    return T.embedding(ids, table)


def softmax_cross_entropy(logits, targets) -> Tensor:
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise DataError(f"target id out of range [0, {V})")
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    return T.cross_entropy(logits, targets)


def perplexity(loss) -> float:
    return float(np.exp(float(getattr(loss, "data", loss))))
