import numpy as np
import pytest
from scipy import special

from latent_isp.analytic_oracle import (
    SphereScatterer, legendre_all, mie_far_field, mie_scattered_field, spherical_derivative,
    spherical_jn_all, spherical_yn_all,
)
from latent_isp.analytic_oracle import _ratio_coefficients
from latent_isp.errors import PointInside
from latent_isp.measurement import fibonacci_directions

K = np.pi
SPHERE = SphereScatterer(0.5)


def test_bessel_against_scipy():
    x = np.linspace(0.1, 100, 400)
    n = np.arange(61)[:, None]
    j = spherical_jn_all(60, x)
    ref = special.spherical_jn(n, x)
    assert np.max(np.abs(j - ref) / (np.abs(ref) + 1e-300)) < 1e-10
    y = spherical_yn_all(60, x)
    ref_y = special.spherical_yn(n, x)
    assert np.max(np.abs(y - ref_y) / np.abs(ref_y)) < 1e-10


def test_wronskian():
    x = np.linspace(0.1, 100, 500)
    j = spherical_jn_all(61, x)
    y = spherical_yn_all(61, x)
    dj = spherical_derivative(j, x)
    dy = spherical_derivative(y, x)
    w = (j * dy - dj * y)[:61] * x**2
    assert np.max(np.abs(w - 1.0)) < 1e-12


def test_legendre_against_scipy():
    t = np.linspace(-1, 1, 101)
    p = legendre_all(30, t)
    for n in (0, 1, 5, 30):
        assert np.allclose(p[n], special.eval_legendre(n, t), atol=1e-12)


def test_far_field_depends_only_on_angle():
    d1 = np.array([0.0, 0.0, 1.0])
    x1 = np.array([np.sin(0.7), 0.0, np.cos(0.7)])
    rot = np.linalg.qr(np.random.default_rng(0).normal(size=(3, 3)))[0]
    a = mie_far_field(SPHERE, K, d1, x1)
    b = mie_far_field(SPHERE, K, rot @ d1, rot @ x1)
    assert abs(a - b) <= 1e-12 * abs(a)


def test_far_field_reciprocity():
    rng = np.random.default_rng(1)
    for _ in range(5):
        d, x = (v / np.linalg.norm(v) for v in rng.normal(size=(2, 3)))
        sphere = SphereScatterer(0.4, (0.1, -0.2, 0.05))
        a = mie_far_field(sphere, K, d, x)
        b = mie_far_field(sphere, K, -x, -d)
        assert abs(a - b) <= 1e-12 * abs(a)


def test_optical_theorem():
    d = np.array([0.0, 0.0, 1.0])
    xs = fibonacci_directions(4000)
    total = np.mean(np.abs(mie_far_field(SPHERE, K, d, xs)) ** 2) * 4 * np.pi
    forward = mie_far_field(SPHERE, K, d, d)
    assert forward.imag == pytest.approx(K / (4 * np.pi) * total, rel=1e-3)


def test_dirichlet_condition_on_sphere():
    d = np.array([0.0, 0.6, 0.8])
    pts = fibonacci_directions(60) * 0.5
    total = np.exp(1j * K * pts @ d) + mie_scattered_field(SPHERE, K, d, pts)
    assert np.max(np.abs(total)) < 1e-10


def test_far_field_limit():
    # r e^{-ikr} u^s(r xhat) = u_inf + c/r + O(1/r^2)
    d = np.array([0.0, 0.0, 1.0])
    xhat = np.array([0.6, 0.0, 0.8])
    u_inf = mie_far_field(SPHERE, K, d, xhat)
    scaled = {r: r * np.exp(-1j * K * r) * mie_scattered_field(SPHERE, K, d, r * xhat) for r in (50.0, 200.0)}
    err50, err200 = abs(scaled[50.0] - u_inf), abs(scaled[200.0] - u_inf)
    assert err200 < err50
    assert err50 / err200 == pytest.approx(4.0, rel=0.05)
    richardson = (200.0 * scaled[200.0] - 50.0 * scaled[50.0]) / 150.0
    assert abs(richardson - u_inf) <= 1e-4


def test_long_wavelength_monopole():
    a, k = 0.5, 0.2  # ka = 0.1
    sphere = SphereScatterer(a)
    d = np.array([0.0, 0.0, 1.0])
    x = np.array([[0.0, 3.0, 0.0]])
    r = 3.0
    monopole = -a * np.exp(1j * k * (r - a)) / r
    got = mie_scattered_field(sphere, k, d, x)
    assert abs(got - monopole) <= 0.05 * abs(monopole)


def test_truncation_stable():
    d = np.array([0.0, 0.0, 1.0])
    xs = fibonacci_directions(20)
    base = mie_far_field(SPHERE, K, d, xs)
    n_auto = len(_ratio_coefficients(K * 0.5, None)) - 1
    more = mie_far_field(SPHERE, K, d, xs, n_terms=n_auto + 10)
    assert np.max(np.abs(more - base)) < 1e-12


def test_center_shift_phase():
    d = np.array([1.0, 0.0, 0.0])
    x = np.array([0.0, 1.0, 0.0])
    c = np.array([0.1, 0.2, -0.1])
    shifted = mie_far_field(SphereScatterer(0.5, c), K, d, x)
    base = mie_far_field(SPHERE, K, d, x)
    assert shifted == pytest.approx(base * np.exp(1j * K * (d - x) @ c), rel=1e-12)


def test_interior_point_rejected():
    with pytest.raises(PointInside):
        mie_scattered_field(SPHERE, K, [0, 0, 1], [[0.1, 0.0, 0.0]])


def test_rejects_bad_radius():
    with pytest.raises(ValueError):
        SphereScatterer(0.0)
