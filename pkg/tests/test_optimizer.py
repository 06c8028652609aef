import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latent_isp.errors import DimensionMismatch, UnknownKind
from latent_isp.optimizer import AdamState, adam_step, schedule, should_stop


def scalar_reference(z0, g, alpha, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Coordinate-by-coordinate loop written independently of the vectorized code."""
    z = [float(v) for v in z0]
    m = [0.0] * len(z)
    v = [0.0] * len(z)
    for _ in range(steps):
        for i in range(len(z)):
            m[i] = b1 * m[i] + (1.0 - b1) * g[i]
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
            z[i] = z[i] - alpha * m[i] / (math.sqrt(v[i]) + eps)
    return z


def test_first_step_closed_form():
    g = np.array([2.0, -0.5, 1e-3, -40.0])
    state = AdamState.fresh(4, eps_den=0.0)
    _, z = adam_step(state, np.zeros(4), g, 0.01)
    expected = -0.01 * 0.1 * np.sign(g) / math.sqrt(0.001)
    assert np.allclose(z, expected, rtol=1e-14, atol=0)
    assert np.allclose(z, -3.1623 * 0.01 * np.sign(g), rtol=1e-4)


def test_first_step_with_guard():
    g = np.array([1.0, -2.0])
    eps = 1e-8
    _, z = adam_step(AdamState.fresh(2, eps_den=eps), np.zeros(2), g, 0.5)
    expected = -0.5 * 0.1 * g / (math.sqrt(0.001) * np.abs(g) + eps)
    assert np.allclose(z, expected, rtol=1e-15, atol=0)


def test_zero_gradient_leaves_z_unchanged():
    z0 = np.array([0.3, -1.2, 5.0])
    state, z = adam_step(AdamState.fresh(3), z0, np.zeros(3), 0.01)
    assert np.array_equal(z, z0)
    assert state.n == 1


def test_ten_steps_match_scalar_reference():
    rng = np.random.default_rng(7)
    z0 = rng.normal(size=6)
    g = rng.normal(size=6)
    state = AdamState.fresh(6)
    z = z0
    for _ in range(10):
        state, z = adam_step(state, z, g, 0.01)
    ref = scalar_reference(z0, g, 0.01, 10)
    assert np.max(np.abs(z - np.array(ref))) <= 1e-14
    assert state.n == 10


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        adam_step(AdamState.fresh(3), np.zeros(4), np.zeros(4), 0.1)


@pytest.mark.parametrize("b1,b2", [(0.999, 0.9), (-0.1, 0.9), (0.5, 1.5)])
def test_invalid_betas(b1, b2):
    with pytest.raises(ValueError):
        AdamState.fresh(2, beta1=b1, beta2=b2)


def test_nonpositive_step_rejected():
    with pytest.raises(ValueError):
        adam_step(AdamState.fresh(1), np.zeros(1), np.ones(1), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.data())
def test_coordinate_permutation_commutes(n, data):
    vecs = data.draw(arrays(float, (4, n), elements=st.floats(-1e3, 1e3)))
    z, g, m, v = vecs[0], vecs[1], vecs[2], np.abs(vecs[3])
    perm = np.array(data.draw(st.permutations(range(n))))
    state = AdamState(m, v, 3)
    s1, z1 = adam_step(state, z, g, 0.01)
    s2, z2 = adam_step(AdamState(m[perm], v[perm], 3), z[perm], g[perm], 0.01)
    assert np.array_equal(z1[perm], z2)
    assert np.array_equal(s1.m[perm], s2.m) and np.array_equal(s1.v[perm], s2.v)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (5, 8), elements=st.floats(-1e6, 1e6) | st.just(0.0)))
def test_steps_stay_finite(grads):
    state = AdamState.fresh(8)
    z = np.zeros(8)
    for g in grads:
        state, z = adam_step(state, z, g, 0.01)
        assert np.all(np.isfinite(z))
        assert np.all(state.v >= 0)


def test_bit_identical_trajectories():
    def run():
        rng = np.random.default_rng(11)
        state, z = AdamState.fresh(5), np.zeros(5)
        for _ in range(20):
            state, z = adam_step(state, z, rng.normal(size=5), 0.01)
        return z

    assert np.array_equal(run(), run())


def test_state_round_trip():
    state, _ = adam_step(AdamState.fresh(3), np.zeros(3), np.array([1.0, 2.0, 3.0]), 0.1)
    back = AdamState.from_dict(state.to_dict())
    assert np.array_equal(back.m, state.m) and np.array_equal(back.v, state.v) and back.n == state.n


# -- schedules -----------------------------------------------------------------
@pytest.mark.parametrize("n", [0, 1, 499, 10_000])
def test_constant_schedule(n):
    assert schedule("constant", n) == 0.01


@pytest.mark.parametrize("n,rate", [(0, 5.0e-4), (499, 5.0e-4), (500, 2.5e-4), (1024, 1.25e-4)])
def test_decay_schedule(n, rate):
    assert schedule("decay", n) == pytest.approx(rate, rel=1e-15)


def test_unknown_schedule():
    with pytest.raises(UnknownKind):
        schedule("cosine", 3)


# -- stopping ------------------------------------------------------------------
def test_decreasing_losses_continue():
    assert not should_stop(list(np.linspace(1.0, 0.1, 80)), max_iters=100)


def test_max_iters_stops():
    assert should_stop([1.0] * 10, max_iters=10)


def test_flat_losses_stop_after_patience():
    hist = [1.0, 0.5] + [0.5] * 30
    assert should_stop(hist, max_iters=1000, patience=30)
    assert not should_stop(hist[:-1], max_iters=1000, patience=30)


def test_oscillating_but_improving_continues():
    n = np.arange(90)
    hist = list(np.exp(-0.02 * n) * (1.0 + 0.3 * (-1.0) ** n))
    assert not should_stop(hist, max_iters=1000, patience=30)


def test_empty_history_rejected():
    with pytest.raises(ValueError):
        should_stop([], max_iters=5)
