"""Solver combinators for residual / ODE-style updates.

Every combinator works on anything that supports ``+`` and multiplication by a
scalar: plain floats, numpy arrays, or :class:`odeblocks.nnkit.Tensor`.  The step
size is folded into the stage function (``G = h * f``), so none of these ever see
``h`` directly.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "RK2_WEIGHTS",
    "RK4_WEIGHTS",
    "AB4_COEFFS",
    "AM4_COEFFS",
    "CORRECTOR_INIT",
    "ConfigurationError",
    "InsufficientHistoryError",
    "StageDivergence",
    "Schedule",
    "DerivativeHistory",
    "StepResult",
    "euler_step",
    "rk2_step",
    "rk4_step",
    "ema_weights",
    "ema_predict",
    "ab4_step",
    "am4_correct",
    "backward_euler_correct",
    "multistep_combine",
]

RK2_WEIGHTS = (1 / 2, 1 / 2)
RK4_WEIGHTS = (1 / 6, 1 / 3, 1 / 3, 1 / 6)
# oldest-first: F_{t-3}, F_{t-2}, F_{t-1}, F_t
AB4_COEFFS = (-9 / 24, 37 / 24, -59 / 24, 55 / 24)
# newest-first: F_{t+1}, F_t, F_{t-1}, F_{t-2}
AM4_COEFFS = (9 / 24, 19 / 24, -5 / 24, 1 / 24)
# newest-first, alpha * (1 - alpha)^k with alpha = 0.5
CORRECTOR_INIT = (0.5, 0.25, 0.125, 0.0625)

# stage-input offsets for the classical 4-stage scheme
_RK4_OFFSETS = (0.5, 0.5, 1.0)


class ConfigurationError(ValueError):
    pass


class InsufficientHistoryError(ValueError):
    pass


class StageDivergence(FloatingPointError):
    """A stage (or combined state) produced NaN/Inf."""

    def __init__(self, stage: int | str, msg: str = ""):
        self.stage = stage
        super().__init__(msg or f"non-finite values in stage {stage}")


def _raw(x):
    return getattr(x, "data", x)


def _check_finite(x, stage):
    if not np.all(np.isfinite(_raw(x))):
        raise StageDivergence(stage)
    return x


@dataclass(frozen=True)
class Schedule:
    """How stage outputs (or history entries) are weighted.

    ``kind`` is one of ``classical``, ``ema`` or ``learned``.  ``gamma`` may be a
    float or a differentiable scalar; ``weights`` likewise may hold scalars of
    either sort.
    """

    kind: str
    gamma: object = None
    weights: tuple = ()

    @classmethod
    def classical(cls, order: int) -> "Schedule":
        table = {1: (1.0,), 2: RK2_WEIGHTS, 4: RK4_WEIGHTS}
        if order not in table:
            raise ConfigurationError(f"no classical weights for order {order}")
        return cls("classical", weights=table[order])

    @classmethod
    def ema(cls, gamma) -> "Schedule":
        return cls("ema", gamma=gamma)

    @classmethod
    def learned(cls, weights: Sequence) -> "Schedule":
        return cls("learned", weights=tuple(weights))

    def weights_for(self, n: int) -> list:
        if self.kind == "ema":
            return ema_weights(self.gamma, n)
        if len(self.weights) != n:
            raise ConfigurationError(
                f"{self.kind} schedule has {len(self.weights)} weights, method needs {n}"
            )
        return list(self.weights)


@dataclass
class StepResult:
    next_state: object
    stages: list = field(default_factory=list)


class DerivativeHistory:
    """Bounded FIFO of past derivative evaluations, newest last."""

    def __init__(self, capacity: int = 3):
        if capacity < 1:
            raise ConfigurationError("history capacity must be positive")
        self.capacity = capacity
        self._buf: deque = deque(maxlen=capacity)

    def push(self, f) -> None:
        self._buf.append(f)

    def clear(self) -> None:
        self._buf.clear()

    @property
    def entries(self) -> list:
        return list(self._buf)

    def newest(self, k: int) -> list:
        """The ``k`` most recent entries, newest first."""
        return list(reversed(self._buf))[:k]

    def __len__(self) -> int:
        return len(self._buf)

    def __repr__(self) -> str:
        return f"DerivativeHistory(len={len(self)}, capacity={self.capacity})"


def _combine(y, fs, ws):
    out = y
    for w, f in zip(ws, fs):
        out = out + f * w
    return out


def euler_step(y, G: Callable) -> StepResult:
    _check_finite(y, "input")
    f = _check_finite(G(y), 1)
    return StepResult(_check_finite(y + f, "output"), [f])


def _rk_step(y, G, sched, offsets, norm):
    n = len(offsets) + 1
    weights = sched.weights_for(n)
    _check_finite(y, "input")
    stages = []
    f = None
    for i in range(n):
        arg = y if i == 0 else y + f * offsets[i - 1]
        f = _check_finite(G(arg), i + 1)
        if norm is not None:
            f = _check_finite(norm(i, f), i + 1)
        stages.append(f)
    return StepResult(_check_finite(_combine(y, stages, weights), "output"), stages)


def rk2_step(y, G: Callable, sched: Schedule | None = None, norm=None) -> StepResult:
    """Two-stage step: F1 = G(y), F2 = G(y + F1).

    ``norm(i, F_i)``, when given, is applied to each stage before it is stored
    and before it offsets the next stage input.
    """
    return _rk_step(y, G, sched or Schedule.classical(2), (1.0,), norm)


def rk4_step(y, G: Callable, sched: Schedule | None = None, norm=None) -> StepResult:
    return _rk_step(y, G, sched or Schedule.classical(4), _RK4_OFFSETS, norm)


def ema_weights(gamma, n: int) -> list:
    """Weights ``gamma * (1 - gamma)**(n - i)`` for i = 1..n; the last is largest.

    ``gamma`` may be a differentiable scalar, in which case so are the weights.
    """
    if n < 1:
        raise ConfigurationError("n must be positive")
    if isinstance(gamma, (int, float, np.floating)):
        g = float(gamma)
        if not 0.0 < g <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {g}")
        return [g * (1.0 - g) ** (n - i) for i in range(1, n + 1)]
    one_minus = 1.0 - gamma
    return [gamma * one_minus ** (n - i) if i < n else gamma * 1.0 for i in range(1, n + 1)]


def ema_predict(y, stages: Sequence, gamma):
    if not stages:
        raise ConfigurationError("ema_predict needs at least one stage")
    return _check_finite(_combine(y, stages, ema_weights(gamma, len(stages))), "predictor")


def ab4_step(y, hist: DerivativeHistory):
    """Four-step Adams-Bashforth from ``[F_{t-3}, F_{t-2}, F_{t-1}, F_t]``."""
    entries = hist.entries if isinstance(hist, DerivativeHistory) else list(hist)
    if len(entries) < 4:
        raise InsufficientHistoryError(f"AB4 needs 4 history entries, have {len(entries)}")
    return _check_finite(_combine(y, entries[-4:], AB4_COEFFS), "output")


def am4_correct(y, f_new, hist: DerivativeHistory, sched: Schedule | None = None):
    """Adams-Moulton style correction ``y + w0*f_new + sum_k w_k F_{t+1-k}``.

    Weights are newest-first.  Only the three newest history entries take part;
    with fewer available the unmatched weight slots are dropped.
    """
    sched = sched or Schedule("classical", weights=AM4_COEFFS)
    if sched.kind == "ema":
        raise ConfigurationError("corrector takes classical or learned weights")
    weights = list(sched.weights)
    if len(weights) != 4:
        raise ConfigurationError(f"corrector needs 4 weights, got {len(weights)}")
    past = hist.newest(3) if isinstance(hist, DerivativeHistory) else list(reversed(list(hist)))[:3]
    out = _combine(y, [f_new, *past], weights[: 1 + len(past)])
    return _check_finite(out, "corrector")


def backward_euler_correct(y, f_at_p):
    return _check_finite(y + f_at_p, "corrector")


def multistep_combine(y, fs: Sequence, alphas: Sequence):
    if len(fs) != len(alphas):
        raise ConfigurationError(f"{len(fs)} derivatives but {len(alphas)} weights")
    return _check_finite(_combine(y, fs, alphas), "output")
