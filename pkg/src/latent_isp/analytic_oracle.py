"""Partial-wave solution for plane-wave scattering by a sound-soft sphere.

Uses the far-field normalization ``u^s(x) ~ exp(ik|x|)/|x| * u_inf(xhat)``:

    u_inf(xhat, d) = (i/k) sum_n (2n+1) j_n(ka)/h_n(ka) P_n(xhat.d),
    u^s(x)         = -sum_n i^n (2n+1) j_n(ka)/h_n(ka) h_n(k r) P_n(cos theta),

with ``h_n = j_n + i y_n`` and a center offset applied through the incident
phase at the center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PointInside, SeriesNotConverged

TERM_TOL = 1e-14


@dataclass(frozen=True)
class SphereScatterer:
    radius: float
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


# ---------------------------------------------------------------------------
# Special functions
# ---------------------------------------------------------------------------
def spherical_yn_all(n_max: int, x) -> np.ndarray:
    """``y_0..y_{n_max}`` at ``x`` by upward recurrence, shape ``(n_max+1, *x.shape)``."""
    x = np.asarray(x, dtype=float)
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = -np.cos(x) / x
    if n_max >= 1:
        out[1] = -np.cos(x) / x**2 - np.sin(x) / x
    for n in range(1, n_max):
        out[n + 1] = (2 * n + 1) / x * out[n] - out[n - 1]
    return out


def spherical_jn_all(n_max: int, x) -> np.ndarray:
    """``j_0..j_{n_max}`` at ``x > 0`` by downward (Miller) recurrence.

    The recurrence is run on the ratios ``j_n / j_{n-1}``, which cannot
    overflow, and anchored on ``j_0`` or ``j_1``, whichever is larger.
    """
    x = np.asarray(x, dtype=float)
    xm = float(np.max(x))
    start = int(max(n_max, xm) + 30 + 3 * np.sqrt(max(n_max, xm)))
    ratio = np.zeros((start + 2,) + x.shape)
    for n in range(start, 0, -1):
        ratio[n] = x / (2 * n + 1 - x * ratio[n + 1])
    j0 = np.sin(x) / x
    j1 = np.sin(x) / x**2 - np.cos(x) / x
    anchor = np.where(np.abs(j0) >= np.abs(j1), j0, j1 / ratio[1])
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = anchor
    for n in range(1, n_max + 1):
        out[n] = out[n - 1] * ratio[n]
    return out


def spherical_derivative(values: np.ndarray, x) -> np.ndarray:
    """Derivatives ``f_n' = f_{n-1} - (n+1)/x f_n`` (``f_0' = -f_1``) of a stacked sequence.

    The last order is dropped since it would need ``f_{n+1}`` for ``n = 0`` only.
    """
    x = np.asarray(x, dtype=float)
    n = np.arange(values.shape[0]).reshape((-1,) + (1,) * x.ndim)
    out = np.empty_like(values)
    out[1:] = values[:-1] - (n[1:] + 1) / x * values[1:]
    out[0] = -values[1]
    return out


def legendre_all(n_max: int, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.empty((n_max + 1,) + t.shape)
    out[0] = 1.0
    if n_max >= 1:
        out[1] = t
    for n in range(1, n_max):
        out[n + 1] = ((2 * n + 1) * t * out[n] - n * out[n - 1]) / (n + 1)
    return out


# ---------------------------------------------------------------------------
# Series
# ---------------------------------------------------------------------------
def _ratio_coefficients(ka: float, n_terms: int | None):
    """Return ``(2n+1) j_n(ka)/h_n(ka)`` truncated where terms fall below tolerance."""
    n_min = int(np.ceil(ka + 10))
    n_cap = n_min + 60 if n_terms is None else n_terms
    j = spherical_jn_all(n_cap, ka)
    y = spherical_yn_all(n_cap, ka)
    coef = (2 * np.arange(n_cap + 1) + 1) * j / (j + 1j * y)
    if n_terms is not None:
        return coef
    small = np.flatnonzero((np.arange(n_cap + 1) >= n_min) & (np.abs(coef) < TERM_TOL))
    if small.size == 0:
        raise SeriesNotConverged(f"partial-wave series not below {TERM_TOL} by n={n_cap}")
    return coef[: small[0] + 1]


def mie_far_field(sphere: SphereScatterer, k: float, d, xhat, n_terms: int | None = None):
    """Far-field pattern for incident direction ``d`` at observation direction(s) ``xhat``."""
    d = np.asarray(d, dtype=float)
    xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
    coef = _ratio_coefficients(k * sphere.radius, n_terms)
    p = legendre_all(len(coef) - 1, xhat @ d)
    c = np.asarray(sphere.center)
    shift = np.exp(1j * k * ((d - xhat) @ c))
    value = (1j / k) * (coef @ p) * shift
    return value if value.size > 1 else complex(value[0])


def mie_scattered_field(sphere: SphereScatterer, k: float, d, x, n_terms: int | None = None):
    """Scattered field at exterior point(s) ``x``."""
    d = np.asarray(d, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c = np.asarray(sphere.center)
    rel = x - c
    r = np.linalg.norm(rel, axis=1)
    if np.any(r < sphere.radius * (1 - 1e-12)):
        raise PointInside("field requested inside the sphere")
    ka = k * sphere.radius
    if n_terms is None:
        # the exterior series decays no slower than the far-field one
        n_terms = len(_ratio_coefficients(ka, None)) - 1
    coef = _ratio_coefficients(ka, n_terms)
    n = np.arange(n_terms + 1)
    kr = k * r
    h = spherical_jn_all(n_terms, kr) + 1j * spherical_yn_all(n_terms, kr)
    p = legendre_all(n_terms, (rel @ d) / r)
    terms = ((1j**n) * coef)[:, None] * h * p
    value = -terms.sum(axis=0) * np.exp(1j * k * (d @ c))
    return value if value.size > 1 else complex(value[0])
