import csv
import math

import numpy as np
import pytest

from odeblocks import odelab
from odeblocks.odekit import ConfigurationError


def test_integrate_euler_examples():
    p = odelab.decay(horizon=1.0)
    assert odelab.integrate(p, "euler", 1.0)[0] == 0.0
    assert odelab.integrate(p, "euler", 0.5)[0] == pytest.approx(0.25, abs=1e-15)


def test_integrate_rk4_against_closed_form():
    p = odelab.decay(horizon=1.0)
    assert abs(odelab.integrate(p, "rk4", 0.5)[0] - math.exp(-1)) <= 1e-3


def test_rk4_against_brute_force_reference():
    # independent route: very fine explicit Euler, vectorised as a power
    p = odelab.decay(horizon=1.0)
    n = 10**7
    brute = (1 - 1 / n) ** n
    assert abs(odelab.integrate(p, "rk4", 0.5)[0] - brute) <= 1e-3


def test_non_integer_steps_rejected():
    with pytest.raises(ConfigurationError):
        odelab.integrate(odelab.decay(1.0), "euler", 0.3)
    with pytest.raises(ConfigurationError):
        odelab.integrate(odelab.decay(1.0), "leapfrog", 0.5)


def test_global_error_examples():
    p = odelab.decay(horizon=1.0)
    exact = p.exact(1.0)
    assert odelab.global_error(exact, p) == 0.0
    assert odelab.global_error(exact + 0.1, p) == pytest.approx(0.1, abs=1e-15)
    err = odelab.global_error(odelab.integrate(p, "euler", 1.0), p)
    assert err == pytest.approx(math.exp(-1), abs=1e-12)
    assert err == pytest.approx(0.3679, abs=1e-4)


@pytest.mark.parametrize("method,target", [("euler", 1), ("rk4", 4), ("abm4", 4)])
def test_empirical_order_examples(method, target):
    rep = odelab.empirical_order(odelab.decay(1.0), method, 0.1, 4)
    assert rep.order == pytest.approx(target, abs=0.3)
    assert all(a > b for a, b in zip(rep.h, rep.h[1:]))
    assert all(e > 0 for e in rep.errors)


def test_empirical_order_underflow_flag():
    # a single tiny rk4 step is accurate far below the underflow threshold
    rep = odelab.empirical_order(odelab.decay(horizon=0.001), "rk4", 0.001, 3)
    assert rep.underflow
    assert len(rep.errors) < 4


def test_levels_validated():
    with pytest.raises(ConfigurationError):
        odelab.empirical_order(odelab.decay(), "euler", 0.1, 1)


def test_abm4_beats_ab4_on_decay():
    prob = odelab.decay(2.0)
    for k in range(5):
        h = 0.1 / 2**k
        e_ab = odelab.global_error(odelab.integrate(prob, "ab4", h), prob)
        e_abm = odelab.global_error(odelab.integrate(prob, "abm4", h), prob)
        assert e_abm <= e_ab


def test_oscillator_rk4_returns_home():
    p = odelab.oscillator()
    y = odelab.integrate(p, "rk4", p.horizon / 628)
    assert np.max(np.abs(y - p.y0)) <= 1e-6
    assert odelab.global_error(y, p) <= 1e-6


def test_order_report_csv(tmp_path):
    rep = odelab.empirical_order(odelab.decay(), "rk2", 0.1, 2)
    path = tmp_path / "order.csv"
    rep.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["method", "h", "global_error", "p_hat"]
    assert rows[0]["p_hat"] == ""
    assert float(rows[2]["p_hat"]) == pytest.approx(rep.p_hat[1])
    assert len(rows) == 3
