"""Closed-form test problems and empirical convergence orders for the combinators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import odekit
from .odekit import ConfigurationError, DerivativeHistory

METHODS = ("euler", "rk2", "rk4", "ab4", "am4", "abm4")

# accepted p-hat bands per method
ORDER_BANDS = {
    "euler": (0.9, 1.1),
    "rk2": (1.8, 2.2),
    "rk4": (3.7, 4.3),
    "ab4": (3.5, 4.5),
    "am4": (3.5, 4.5),
    "abm4": (3.5, 4.5),
}

UNDERFLOW = 1e-13


@dataclass(frozen=True)
class TestProblem:
    name: str
    field: Callable[[np.ndarray], np.ndarray]
    exact: Callable[[float], np.ndarray]
    y0: np.ndarray
    horizon: float

    __test__ = False  # not a pytest class


def decay(horizon: float = 2.0) -> TestProblem:
    """y' = -y, y(0) = 1."""
    return TestProblem(
        "decay",
        lambda y: -y,
        lambda t: np.array([math.exp(-t)]),
        np.array([1.0]),
        horizon,
    )


def oscillator(horizon: float = 2 * math.pi) -> TestProblem:
    """Harmonic oscillator y1' = y2, y2' = -y1 from (1, 0)."""
    return TestProblem(
        "oscillator",
        lambda y: np.array([y[1], -y[0]]),
        lambda t: np.array([math.cos(t), -math.sin(t)]),
        np.array([1.0, 0.0]),
        horizon,
    )


PROBLEMS = {"decay": decay, "oscillator": oscillator}


def _n_steps(horizon: float, h: float) -> int:
    if h <= 0:
        raise ConfigurationError("step size must be positive")
    n = round(horizon / h)
    if n < 1 or abs(n * h - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigurationError(f"horizon {horizon} is not a whole number of steps of {h}")
    return n


def integrate(problem: TestProblem, method: str, h: float) -> np.ndarray:
    """Integrate to the horizon; multistep methods bootstrap 3 steps with RK4."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    n = _n_steps(problem.horizon, h)
    G = lambda y: h * problem.field(y)  # noqa: E731
    y = np.array(problem.y0, dtype=np.float64)

    if method in ("euler", "rk2", "rk4"):
        step = {"euler": lambda y: odekit.euler_step(y, G),
                "rk2": lambda y: odekit.rk2_step(y, G),
                "rk4": lambda y: odekit.rk4_step(y, G)}[method]
        for _ in range(n):
            y = step(y).next_state
        return y

    hist = DerivativeHistory(4)
    hist.push(G(y))
    for k in range(n):
        if k < 3:
            y = odekit.rk4_step(y, G).next_state
        elif method == "ab4":
            y = odekit.ab4_step(y, hist)
        elif method == "abm4":
            p = odekit.ab4_step(y, hist)
            y = odekit.am4_correct(y, G(p), hist)
        else:  # am4: RK4 predictor, AM4 corrector
            p = odekit.rk4_step(y, G).next_state
            y = odekit.am4_correct(y, G(p), hist)
        hist.push(G(y))
    return y


def global_error(final, problem: TestProblem) -> float:
    return float(np.max(np.abs(np.asarray(final) - problem.exact(problem.horizon))))


@dataclass
class OrderReport:
    method: str
    h: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    p_hat: list = field(default_factory=list)  # p_hat[k] pairs h[k] with h[k+1]
    underflow: bool = False

    @property
    def order(self) -> float:
        """Estimate from the finest non-underflowing pair."""
        return self.p_hat[-1] if self.p_hat else float("nan")

    def within_band(self) -> bool:
        lo, hi = ORDER_BANDS[self.method]
        return lo <= self.order <= hi

    def rows(self):
        for k, (h, e) in enumerate(zip(self.h, self.errors)):
            yield {"method": self.method, "h": h, "global_error": e,
                   "p_hat": self.p_hat[k - 1] if k > 0 else ""}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "h", "global_error", "p_hat"])
            w.writeheader()
            for row in self.rows():
                w.writerow(row)


def empirical_order(problem: TestProblem, method: str, h0: float, levels: int) -> OrderReport:
    """Run at h0, h0/2, ..., h0/2**levels and estimate orders from error ratios."""
    if levels < 2:
        raise ConfigurationError("levels must be at least 2")
    rep = OrderReport(method)
    h = h0
    for _ in range(levels + 1):
        err = global_error(integrate(problem, method, h), problem)
        if err < UNDERFLOW:
            rep.underflow = True
            break
        if rep.errors:
            rep.p_hat.append(math.log2(rep.errors[-1] / err))
        rep.h.append(h)
        rep.errors.append(err)
        h /= 2
    return rep
