import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odeblocks import nnkit
from odeblocks.nnkit import ParamStore, Tensor
from odeblocks.odekit import CORRECTOR_INIT, DerivativeHistory, StageDivergence
from odeblocks.pcblock import (
    BLOCK_KINDS,
    BlockKind,
    LayerState,
    PCBlock,
    predictor_corrector,
    sublayer_drop,
)


# scalar oracles -----------------------------------------------------------------

def test_backward_euler_corrector_scalar():
    # F(y) = y: stages 1 and 2, P = 1 + 0.25 + 1.0 = 2.25, output 1 + F(P)
    out = predictor_corrector(1.0, BlockKind.parse("pc-rk2-be"), lambda z: z, gamma=0.5)
    assert out == pytest.approx(3.25, abs=1e-12)


def test_multistep_corrector_empty_history_scalar():
    hist = DerivativeHistory(3)
    out = predictor_corrector(1.0, BlockKind.parse("pc-rk2-ms"), lambda z: z, gamma=0.5, history=hist)
    assert out == pytest.approx(1.0 + 0.5 * 2.25, abs=1e-12)
    assert out == pytest.approx(2.125, abs=1e-12)
    assert hist.entries == [2.25]


def test_vanilla_zero_sublayer_is_identity():
    y = np.random.default_rng(0).normal(size=(2, 3, 4))
    np.testing.assert_array_equal(predictor_corrector(y, BlockKind(), lambda z: 0 * z), y)


def _hand_rk(y, F, order, weights):
    offsets = [1.0] if order == 2 else [0.5, 0.5, 1.0]
    stages = [F(y)]
    for c in offsets:
        stages.append(F(y + c * stages[-1]))
    return y + sum(w * f for w, f in zip(weights, stages))


@pytest.mark.parametrize("text", BLOCK_KINDS)
def test_all_kinds_match_hand_oracle(text):
    # a scalar nonlinear field stands in for the sublayer; gamma = 0.3
    kind = BlockKind.parse(text)
    F = lambda z: math.sin(z) + 0.5  # noqa: E731
    g = 0.3
    y = 0.7
    hist_vals = [0.2, -0.4, 0.9]  # oldest-first
    history = DerivativeHistory(3)
    for v in hist_vals:
        history.push(v)
    cw = [0.4, 0.3, 0.2, 0.1]

    if kind.solver == "vanilla":
        expected = y + F(y)
    else:
        n = kind.order
        if kind.mode == "ema":
            w = [g * (1 - g) ** (n - i) for i in range(1, n + 1)]
        else:
            w = [0.5, 0.5] if n == 2 else [1 / 6, 1 / 3, 1 / 3, 1 / 6]
        expected = _hand_rk(y, F, n, w)
        if kind.corrector == "backward-euler":
            expected = y + F(expected)
        elif kind.corrector == "multistep":
            newest = hist_vals[::-1]
            expected = y + cw[0] * F(expected) + sum(c * f for c, f in zip(cw[1:], newest))

    out = predictor_corrector(y, kind, F, gamma=g, corrector_weights=cw, history=history)
    assert out == pytest.approx(expected, abs=1e-12)


def test_history_receives_raw_corrector_evaluation():
    hist = DerivativeHistory(3)
    kind = BlockKind.parse("pc-rk4-ms")
    for i in range(5):
        predictor_corrector(float(i), kind, lambda z: 2.0 * z, history=hist)
    assert len(hist) == 3
    # non-pc kinds never touch the history
    predictor_corrector(1.0, BlockKind.parse("rk4"), lambda z: z, history=hist)
    assert len(hist) == 3


# block kinds ----------------------------------------------------------------------

@pytest.mark.parametrize("text", BLOCK_KINDS)
def test_block_kind_round_trip(text):
    assert str(BlockKind.parse(text)) == text


def test_block_kind_rejects_unknown():
    for bad in ("rk3", "pc-rk4", "pc-rk4-xx", ""):
        with pytest.raises(ValueError):
            BlockKind.parse(bad)
    with pytest.raises(ValueError):
        BlockKind("vanilla", "ema")


# the block --------------------------------------------------------------------------

def make_block(kind="pc-rk4-ms", width=8, heads=2, seed=0, **kw):
    store = ParamStore()
    block = PCBlock(store, "b", BlockKind.parse(kind), width, heads, 2, np.random.default_rng(seed), **kw)
    return store, block


@pytest.mark.parametrize("text", BLOCK_KINDS)
def test_block_preserves_shape_and_is_causal(text):
    _, block = make_block(text, seed=1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 8))
    base = block.forward(Tensor(x), LayerState()).data
    assert base.shape == x.shape
    y = x.copy()
    y[:, 3] += 1.0
    out = block.forward(Tensor(y), LayerState()).data
    assert np.array_equal(out[:, :3], base[:, :3])


def test_block_parameter_names():
    store, _ = make_block("pc-rk4-ms")
    names = store.names()
    assert "b.corrector_w" in names and "b.gamma_raw" in names
    assert {"b.rk_norm0.gain", "b.rk_norm1.gain"} <= set(names)
    np.testing.assert_array_equal(store["b.corrector_w"].data, CORRECTOR_INIT)
    store, _ = make_block("pc-rk4-be", rk_norm_per_stage=True)
    assert "b.rk_norm3.gain" in store.names() and "b.corrector_w" not in store.names()
    store, _ = make_block("vanilla")
    assert not any("rk_norm" in n or "gamma" in n for n in store.names())


def test_gamma_stays_in_unit_interval():
    store, block = make_block("rk4-ema")
    assert float(block.gamma().data) == pytest.approx(0.5)
    for raw in (-1e3, -5.0, 0.0, 5.0, 1e3):
        store["b.gamma_raw"].data[...] = raw
        g = float(block.gamma().data)
        assert 0.0 <= g <= 1.0


def test_divergence_surfaces_without_rk_norm():
    store, block = make_block("rk4", rk_norm=False)
    store["b.ffn.fc2.b"].data[0] = np.inf
    with pytest.raises(StageDivergence):
        block.forward(Tensor(np.ones((1, 2, 8))), LayerState())


def test_rk_norm_bounds_stage_magnitude():
    store, block = make_block("rk4", rk_norm=True)
    store["b.ffn.fc2.w"].data *= 1e6
    out = block.forward(Tensor(np.random.default_rng(0).normal(size=(1, 3, 8))), LayerState()).data
    assert np.all(np.isfinite(out)) and np.abs(out).max() < 100


def test_block_gradients_match_finite_differences():
    store, block = make_block("pc-rk2-ms", seed=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 3, 8))
    w = rng.normal(size=(1, 3, 8))

    def loss():
        state = LayerState()
        h = block.forward(Tensor(x), state)
        return (block.forward(h, state) * w).sum()

    assert nnkit.grad_check(loss, store, 150, np.random.default_rng(5)) <= 1e-5


# sublayer drop -------------------------------------------------------------------------

def test_sublayer_drop_rates():
    y = np.zeros(3)
    out = np.ones(3)
    rng = np.random.default_rng(0)
    assert sublayer_drop(out, y, 0.0, True, rng) is out
    assert sublayer_drop(out, y, 0.999999, False, rng) is out
    calls = []
    assert sublayer_drop(lambda: calls.append(1), y, 1.0, True, rng) is y
    assert not calls


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 0.95), st.integers(0, 2**16))
def test_sublayer_drop_frequency(rate, seed):
    rng = np.random.default_rng(seed)
    y, out = object(), object()
    n = 4000
    dropped = sum(sublayer_drop(out, y, rate, True, rng) is y for _ in range(n))
    assert abs(dropped / n - rate) < 5 * math.sqrt(rate * (1 - rate) / n)


def test_history_discipline_across_layers():
    store = ParamStore()
    rng = np.random.default_rng(0)
    blocks = [PCBlock(store, f"l{i}", BlockKind.parse("pc-rk2-ms"), 8, 2, 2, rng) for i in range(5)]
    state = LayerState()
    h = Tensor(rng.normal(size=(1, 3, 8)))
    pushed = []
    for i, block in enumerate(blocks):
        before = list(state.history.entries)
        h = block.forward(h, state)
        assert len(state.history) == min(3, i + 1)
        # the newest entry is this layer's own F(P); older ones are the previous layers'
        assert state.history.entries[:-1] == before[-2:]
        pushed.append(state.history.entries[-1])
    assert state.history.entries == pushed[-3:]
    state.reset()
    assert len(state.history) == 0
