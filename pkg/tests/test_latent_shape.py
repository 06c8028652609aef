import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from latent_isp.errors import DimensionMismatch, EmptyDataset, IrregularSurface, NoSurface
from latent_isp.geometry import GridSpec
from latent_isp.latent_shape import (
    AnalyticDecoder, Ellipsoid, MLPDecoder, SdfSampleSet, TrainSchedule, extract_surface, load_codes,
    mean_l1_error, read_dataset, sample_sdf, save_codes, train_decoder, write_dataset,
)

from toy_family import ellipsoid_family

ANALYTIC = AnalyticDecoder()


def reference_forward(weights, biases, activation, z, x):
    """Straight-line evaluation of the network, one point at a time."""
    act = {"softplus": lambda a: math.log1p(math.exp(-abs(a))) + max(a, 0.0), "tanh": math.tanh}[activation]
    out = []
    for p in np.atleast_2d(x):
        h = list(z) + list(p)
        for li, (w, b) in enumerate(zip(weights, biases)):
            nxt = []
            for j in range(w.shape[1]):
                s = b[j]
                for i in range(w.shape[0]):
                    s += h[i] * w[i, j]
                nxt.append(s if li == len(weights) - 1 else act(s))
            h = nxt
        out.append(h[0])
    return np.array(out)


@pytest.fixture(scope="module")
def small_net():
    return MLPDecoder.initialize(5, hidden=(16, 16, 16, 16), rng=np.random.default_rng(3))


def central_difference(fun, v, i, step=1e-5):
    e = np.zeros_like(v)
    e.flat[i] = step
    return (fun(v + e) - fun(v - e)) / (2 * step)


# -- analytic backend ----------------------------------------------------------
def test_sphere_encoding_evaluates_exact_sdf():
    z = ANALYTIC.encode((0, 0, 0), (0.5, 0.5, 0.5))
    assert ANALYTIC.evaluate(z, [0.5, 0.0, 0.0])[0] == pytest.approx(0.0, abs=1e-15)
    assert ANALYTIC.evaluate(z, [1.0, 0.0, 0.0])[0] == pytest.approx(0.5, abs=1e-14)
    assert np.allclose(ANALYTIC.grad_x(z, [1.0, 0.0, 0.0]), [[1.0, 0.0, 0.0]], atol=1e-14)


def test_encode_decode_round_trip():
    z = ANALYTIC.encode((0.1, -0.2, 0.05), (0.3, 0.45, 0.7), 3.5)
    c, a, p = ANALYTIC.decode(z)
    assert np.allclose(c, [0.1, -0.2, 0.05]) and np.allclose(a, [0.3, 0.45, 0.7]) and p == pytest.approx(3.5)


def test_semi_axes_bounded():
    for v in (-50.0, 0.0, 50.0):
        _, a, _ = ANALYTIC.decode(np.full(7, v))
        assert np.all((a >= 0.15) & (a <= 0.8))


def test_eikonal_on_spheres(rng):
    z = ANALYTIC.encode((0.1, 0.0, -0.1), (0.35, 0.35, 0.35))
    x = rng.uniform(-1, 1, size=(200, 3))
    assert np.allclose(np.linalg.norm(ANALYTIC.grad_x(z, x), axis=1), 1.0, atol=1e-14)


def test_analytic_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        ANALYTIC.evaluate(np.zeros(6), [0, 0, 0])


def _check_fd(decoder, z, x, tol):
    _, gx, gz = decoder.value_and_grads(z, x)
    scale = max(np.max(np.abs(gx)), np.max(np.abs(gz)))
    for i in range(3):
        fd = central_difference(lambda p: decoder.evaluate(z, p), x, i)
        assert abs(gx[0, i] - fd[0]) <= tol * max(abs(fd[0]), scale)
    for i in range(len(z)):
        fd = central_difference(lambda v: decoder.evaluate(v, x), z, i)
        assert abs(gz[0, i] - fd[0]) <= tol * max(abs(fd[0]), scale)


def test_analytic_gradients_match_finite_differences(rng):
    for _ in range(100):
        z = np.concatenate([rng.uniform(-0.2, 0.2, 3), rng.normal(size=3), rng.uniform(-0.5, 1.0, 1)])
        x = rng.uniform(-0.9, 0.9, size=(1, 3))
        _check_fd(ANALYTIC, z, x, 1e-6)


# -- learned backend ----------------------------------------------------------
def test_forward_matches_reference(small_net, rng):
    z = rng.normal(size=5)
    x = rng.uniform(-1, 1, size=(4, 3))
    ref = reference_forward(small_net.weights, small_net.biases, "softplus", z, x)
    assert np.allclose(small_net.evaluate(z, x), ref, rtol=1e-12, atol=1e-12)


def test_learned_gradients_match_finite_differences(small_net, rng):
    for _ in range(100):
        z = rng.normal(size=5)
        x = rng.uniform(-1, 1, size=(1, 3))
        _check_fd(small_net, z, x, 1e-5)


def test_tanh_gradients(rng):
    net = MLPDecoder.initialize(3, hidden=(8, 8), activation="tanh", rng=rng)
    _check_fd(net, rng.normal(size=3), rng.uniform(-1, 1, (1, 3)), 1e-5)


def test_zero_final_layer_has_zero_latent_gradient(small_net, rng):
    w = [a.copy() for a in small_net.weights]
    w[-1][:] = 0.0
    net = MLPDecoder(w, small_net.biases, 5)
    assert np.array_equal(net.grad_z(rng.normal(size=5), rng.uniform(-1, 1, (10, 3))), np.zeros((10, 5)))


def test_parameter_gradients_match_finite_differences(rng):
    net = MLPDecoder.initialize(2, hidden=(6, 6), rng=rng)
    inputs = rng.normal(size=(7, 5))
    up = rng.normal(size=7)
    gw, gb, gin = net.parameter_gradients(inputs, up)

    def total(ws, bs):
        return float(up @ MLPDecoder(ws, bs, 2)._forward(inputs)[0])

    for layer in range(len(net.weights)):
        for idx in [(0, 0), (net.weights[layer].shape[0] - 1, net.weights[layer].shape[1] - 1)]:
            ws = [w.copy() for w in net.weights]
            ws[layer][idx] += 1e-6
            hi = total(ws, net.biases)
            ws[layer][idx] -= 2e-6
            lo = total(ws, net.biases)
            assert gw[layer][idx] == pytest.approx((hi - lo) / 2e-6, rel=1e-5, abs=1e-8)
        bs = [b.copy() for b in net.biases]
        bs[layer][0] += 1e-6
        hi = total(net.weights, bs)
        bs[layer][0] -= 2e-6
        assert gb[layer][0] == pytest.approx((hi - total(net.weights, bs)) / 2e-6, rel=1e-5, abs=1e-8)
    fd = central_difference(lambda v: float(up @ net._forward(v.reshape(7, 5))[0]), inputs.ravel(), 3, 1e-6)
    assert gin.ravel()[3] == pytest.approx(fd, rel=1e-5)


def test_learned_dimension_mismatch(small_net):
    with pytest.raises(DimensionMismatch):
        small_net.evaluate(np.zeros(4), [0, 0, 0])


def test_weight_file_round_trip(tmp_path, small_net, rng):
    path = tmp_path / "dec.bin"
    small_net.save(path)
    back = MLPDecoder.load(path)
    assert back.layer_dims == small_net.layer_dims and back.activation == small_net.activation
    z, x = rng.normal(size=5), rng.uniform(-1, 1, (5, 3))
    assert np.array_equal(back.evaluate(z, x), small_net.evaluate(z, x))
    raw = path.read_bytes()
    assert raw[:8] == b"LISPDEC\x00"
    expected = 24 + 8 * 5 + 8 * sum(w.size + b.size for w, b in zip(small_net.weights, small_net.biases))
    assert len(raw) == expected


def test_rejects_inconsistent_layers():
    with pytest.raises(ValueError):
        MLPDecoder([np.zeros((5, 4)), np.zeros((3, 1))], [np.zeros(4), np.zeros(1)], 2)
    with pytest.raises(ValueError):
        MLPDecoder([np.full((5, 1), np.nan)], [np.zeros(1)], 2)


def test_codes_csv_round_trip(tmp_path, rng):
    codes = [rng.normal(size=8) for _ in range(3)]
    save_codes(codes, tmp_path / "codes.csv")
    back = load_codes(tmp_path / "codes.csv")
    assert all(np.array_equal(a, b) for a, b in zip(codes, back))


# -- surfaces ------------------------------------------------------------------
def test_extract_sphere_area():
    mesh = extract_surface(ANALYTIC, ANALYTIC.encode((0, 0, 0), (0.5, 0.5, 0.5)))
    assert mesh.area == pytest.approx(math.pi, rel=0.03)


def test_extract_vertices_near_zero_level():
    z = ANALYTIC.encode((0.05, 0.0, 0.0), (0.3, 0.5, 0.4), 3.0)
    mesh = extract_surface(ANALYTIC, z)
    assert np.max(np.abs(ANALYTIC.evaluate(z, mesh.vertices))) <= GridSpec().h


def test_empty_shape_has_no_surface(small_net):
    w = [a.copy() for a in small_net.weights]
    b = [a.copy() for a in small_net.biases]
    w[-1][:] = 0.0
    b[-1][:] = 1.0
    with pytest.raises(NoSurface):
        extract_surface(MLPDecoder(w, b, 5), np.zeros(5))


def test_irregular_surface_detected():
    class Flat:
        latent_dim = 1

        def evaluate(self, z, x):
            return np.linalg.norm(np.atleast_2d(x), axis=1) - 0.5

        def value_and_grads(self, z, x):
            x = np.atleast_2d(x)
            return self.evaluate(z, x), np.zeros_like(x), np.zeros((len(x), 1))

    with pytest.raises(IrregularSurface):
        extract_surface(Flat(), np.zeros(1))


# -- samples ---------------------------------------------------------------------
def _ellipsoid_distance_oracle(axes, p):
    """Nearest surface point by dense angular search and local polish."""
    a = np.asarray(axes)

    def dist(ang):
        th, ph = ang
        q = a * np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
        return np.linalg.norm(q - p)

    th, ph = np.meshgrid(np.linspace(0, np.pi, 181), np.linspace(-np.pi, np.pi, 361), indexing="ij")
    q = a * np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
    d = np.linalg.norm(q - p, axis=-1)
    i = np.unravel_index(np.argmin(d), d.shape)
    res = minimize(dist, [th[i], ph[i]], method="Nelder-Mead", options=dict(xatol=1e-12, fatol=1e-14))
    return res.fun


def test_ellipsoid_sdf_against_oracle(rng):
    shape = Ellipsoid((0.0, 0.0, 0.0), (0.5, 0.35, 0.25))
    pts = np.vstack([rng.uniform(-0.9, 0.9, size=(20, 3)), rng.uniform(-0.2, 0.2, size=(10, 3))])
    got = shape.sdf(pts)
    for p, g in zip(pts, got):
        assert abs(g) == pytest.approx(_ellipsoid_distance_oracle(shape.axes, p), abs=1e-8)
    inside = np.sum((pts / np.array(shape.axes)) ** 2, axis=1) < 1
    assert np.array_equal(got < 0, inside)


def test_sphere_samples_on_surface_are_zero(rng):
    s = Ellipsoid.sphere(0.5)
    assert np.allclose(s.sdf(s.surface_points(500, rng)), 0.0, atol=1e-15)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    assert np.allclose(s.sdf(corners), math.sqrt(3) - 0.5)


def test_uniform_sign_fraction_matches_volume():
    shape = Ellipsoid((0.1, 0.0, 0.0), (0.5, 0.4, 0.3))
    samples = sample_sdf(shape, 100_000, rng=5, near_fraction=0.0)
    frac = np.mean(samples.sdf < 0)
    assert frac == pytest.approx(shape.volume / 8.0, rel=0.02)


def test_near_samples_are_close(rng):
    samples = sample_sdf(Ellipsoid.sphere(0.5), 2000, rng=rng, near_fraction=1.0)
    assert np.std(samples.sdf) == pytest.approx(0.02, rel=0.1)


def test_sample_set_round_trip(tmp_path, rng):
    sets = [sample_sdf(Ellipsoid.sphere(0.4), 100, rng=rng), sample_sdf(Ellipsoid.sphere(0.3), 50, rng=rng)]
    write_dataset(sets, tmp_path)
    back = read_dataset(tmp_path)
    assert len(back) == 2
    assert np.array_equal(back[1].points, sets[1].points) and np.array_equal(back[1].sdf, sets[1].sdf)
    assert (tmp_path / "shape_0000.bin").stat().st_size == 8 + 100 * 32


def test_sample_set_rejects_nonfinite():
    with pytest.raises(ValueError):
        SdfSampleSet(np.zeros((2, 3)), [0.0, np.inf])


# -- training ------------------------------------------------------------------
def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train_decoder([], 8)


def test_large_regularizer_shrinks_codes():
    data = [sample_sdf(Ellipsoid.sphere(0.5), 500, rng=1)]
    _, codes, _ = train_decoder(data, 8, lam=1e6, schedule=TrainSchedule(epochs=200, points_per_shape=128))
    assert np.linalg.norm(codes[0]) <= 1e-2


@pytest.mark.slow
def test_single_sphere_fit():
    rng = np.random.default_rng(9)
    shape = Ellipsoid.sphere(0.5)
    train = [sample_sdf(shape, 20_000, rng=rng)]
    test = sample_sdf(shape, 5_000, rng=rng)
    decoder, codes, history = train_decoder(
        train, 8, lam=1e-4, schedule=TrainSchedule(epochs=1500, points_per_shape=2048, halve_every=750))
    assert mean_l1_error(decoder, codes[0], test) <= 0.02
    window = 100
    smooth = np.convolve(history, np.ones(window) / window, mode="valid")
    assert smooth[-1] < smooth[0]


@pytest.mark.slow
def test_trained_family_surface_close_to_truth():
    shapes, _, _, decoder, codes, _ = ellipsoid_family()
    h = GridSpec().h
    for i in (0, 7):
        mesh = extract_surface(decoder, codes[i])
        truth = shapes[i].surface_points(20_000, np.random.default_rng(i))
        d1 = np.max(np.abs(shapes[i].sdf(mesh.vertices)))
        d2 = np.max(cKDTree(mesh.vertices).query(truth)[0])
        assert max(d1, d2) <= 2 * h
