import math

import numpy as np
import pytest

from latent_isp.errors import ConfigError, NegativeDelta, NonPositiveN
from latent_isp.geometry import GridSpec, icosphere
from latent_isp.latent_shape import Ellipsoid
from latent_isp.measurement import (
    FarFieldData, MeasurementConfig, add_noise, fibonacci_directions, indicator_error, read_data,
    smoothed_modulus, winding_number, write_data,
)

GOLDEN = (math.sqrt(5) + 1) / 2


def test_fibonacci_single_point_on_equator():
    d = fibonacci_directions(1)
    assert d.shape == (1, 3) and d[0, 2] == 0.0


@pytest.mark.parametrize("n", [1, 2, 4, 50, 100, 1000])
def test_fibonacci_unit_norm(n):
    assert np.max(np.abs(np.linalg.norm(fibonacci_directions(n), axis=1) - 1.0)) <= 1e-14


def test_fibonacci_reproduces_formula():
    n = 37
    d = fibonacci_directions(n)
    for i in range(1, n + 1):
        x3 = (2 * i - 1) / n - 1
        rho = math.sqrt(1 - x3 * x3)
        ref = (rho * math.cos(2 * math.pi * i * GOLDEN), rho * math.sin(2 * math.pi * i * GOLDEN), x3)
        assert np.allclose(d[i - 1], ref, rtol=0, atol=1e-15)


def test_fibonacci_spacing():
    n = 100
    d = fibonacci_directions(n)
    cos = np.clip(d @ d.T, -1, 1)
    np.fill_diagonal(cos, -1)
    assert np.arccos(cos.max()) >= 0.8 * math.sqrt(4 * math.pi / n)


def test_fibonacci_deterministic():
    assert np.array_equal(fibonacci_directions(64), fibonacci_directions(64))


def test_fibonacci_rejects_zero():
    with pytest.raises(NonPositiveN):
        fibonacci_directions(0)


def test_config_validation():
    with pytest.raises(ConfigError):
        MeasurementConfig(np.pi, [[1.0, 0.0, 0.0]], [[0.0, 2.0, 0.0]])
    with pytest.raises(ConfigError):
        MeasurementConfig(-1.0, [[1.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]])
    with pytest.raises(ConfigError):
        MeasurementConfig(np.pi, [[1.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], mode="near")


def test_backscatter_forces_opposite_directions():
    cfg = MeasurementConfig.fibonacci(np.pi, 6, 99, "backscatter")
    assert cfg.shape == (6, 1)
    for l in range(6):
        assert np.array_equal(cfg.observations_for(l), -cfg.incident[l : l + 1])


def _data(cfg, rng):
    return FarFieldData(cfg, rng.normal(size=cfg.shape) + 1j * rng.normal(size=cfg.shape))


def test_noise_zero_delta_is_identity(rng):
    data = _data(MeasurementConfig.fibonacci(np.pi, 2, 5), rng)
    assert add_noise(data, 0.0, seed=1) is data


def test_noise_first_moment(rng):
    data = _data(MeasurementConfig.fibonacci(np.pi, 40, 100), rng)
    noisy = add_noise(data, 0.4, seed=3)
    ratio = np.abs(noisy.values / data.values - 1.0)
    assert ratio.mean() == pytest.approx(0.4 * math.sqrt(2 / math.pi), rel=0.05)
    assert noisy.delta == 0.4


def test_noise_reproducible_and_unbiased(rng):
    data = _data(MeasurementConfig.fibonacci(np.pi, 1, 3), rng)
    a, b = add_noise(data, 0.3, seed=9), add_noise(data, 0.3, seed=9)
    assert np.array_equal(a.values, b.values)
    draws = np.array([add_noise(data, 0.3, seed=s).values for s in range(10_000)])
    mean = draws.mean(axis=0)
    se = 0.3 * np.abs(data.values) / math.sqrt(len(draws))
    assert np.all(np.abs(mean - data.values) <= 3 * se)


def test_noise_rejects_negative(rng):
    with pytest.raises(NegativeDelta):
        add_noise(_data(MeasurementConfig.fibonacci(np.pi, 1, 2), rng), -0.1)


def test_phaseless_transform_uses_relative_eps(rng):
    cfg = MeasurementConfig.fibonacci(np.pi, 2, 4, "phaseless")
    raw = _data(cfg, rng)
    out = raw.to_phaseless()
    eps = 1e-8 * np.mean(np.abs(raw.values) ** 2)
    assert out.config.eps == pytest.approx(eps, rel=1e-14)
    assert np.allclose(out.values, np.abs(raw.values) ** 2 / np.sqrt(np.abs(raw.values) ** 2 + eps))
    assert smoothed_modulus(np.array([3 + 4j]), 1e-30)[0] == pytest.approx(5.0)


@pytest.mark.parametrize("mode", ["full", "backscatter", "phaseless"])
def test_data_file_round_trip(tmp_path, rng, mode):
    cfg = MeasurementConfig.fibonacci(2 * np.pi, 3, 7, mode)
    data = add_noise(_data(cfg, rng), 0.1, seed=5)
    if mode == "phaseless":
        data = data.to_phaseless()
    write_data(data, tmp_path / "d.csv")
    back = read_data(tmp_path / "d.csv")
    assert np.array_equal(back.values, data.values)
    assert back.config.matches(data.config, tol=0.0)
    assert back.delta == data.delta and back.seed == data.seed and back.config.eps == data.config.eps
    header = (tmp_path / "d.csv").read_text().splitlines()[:2]
    assert header[0].startswith("# L=3,M=")
    assert header[1].endswith("modulus" if mode == "phaseless" else "re,im")


def test_indicator_identical_is_zero():
    s = Ellipsoid((0.1, 0, 0), (0.5, 0.3, 0.4))
    assert indicator_error(s, s) == 0


def test_indicator_shell_count():
    grid = GridSpec(h=0.05)
    count = indicator_error(Ellipsoid.sphere(0.5), Ellipsoid.sphere(0.4), grid)
    expected = 4 / 3 * math.pi * (0.5**3 - 0.4**3) / 0.05**3
    assert count == pytest.approx(expected, rel=0.1)


def test_indicator_disjoint_and_symmetric():
    grid = GridSpec(h=0.05)
    a = Ellipsoid.sphere(0.3, (-0.5, 0, 0))
    b = Ellipsoid.sphere(0.25, (0.5, 0, 0))
    pts = grid.points()
    inside_a = np.count_nonzero(a.sdf(pts) < 0)
    inside_b = np.count_nonzero(b.sdf(pts) < 0)
    assert indicator_error(a, b, grid) == inside_a + inside_b
    assert indicator_error(b, a, grid) == indicator_error(a, b, grid)


def test_winding_number_classifies_mesh():
    mesh = icosphere(3, 0.5)
    pts = np.array([[0, 0, 0], [0.3, 0.1, 0], [0.7, 0, 0], [0, 0, -2.0]])
    w = winding_number(mesh, pts)
    assert np.allclose(w, [1, 1, 0, 0], atol=1e-10)


def test_indicator_mesh_matches_implicit():
    grid = GridSpec(h=0.1)
    mesh = icosphere(4, 0.5)
    # the inscribed polyhedron differs from the sphere only in a thin shell
    assert indicator_error(mesh, Ellipsoid.sphere(0.5), grid) <= 30
