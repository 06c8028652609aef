"""Compiled inner loops for Galerkin assembly.

Every routine writes ``c_k * K' + c_s * S`` entries (indicator basis), where
``S`` and ``K'`` are the single-layer and adjoint double-layer operators.
"""

import math

import numba
import numpy as np

INV_FOUR_PI = 1.0 / (4.0 * math.pi)
_SERIES_TERMS = 20
_INV_FACT = np.array([1.0 / math.factorial(n) for n in range(_SERIES_TERMS + 1)])


@numba.njit(cache=True, inline="always")
def _full_kernel(k, dx, dy, dz, nx, ny, nz):
    r = math.sqrt(dx * dx + dy * dy + dz * dz)
    kr = k * r
    e = complex(math.cos(kr), math.sin(kr)) * (INV_FOUR_PI / r)
    cosine = (nx * dx + ny * dy + nz * dz) / r
    return e, cosine * e * complex(-1.0 / r, k)


@numba.njit(cache=True, inline="always")
def _remainder_kernel(k, dx, dy, dz, nx, ny, nz):
    """``Phi - (1/r - k^2 r/2)/(4 pi)`` and its ``nu_x`` derivative.

    Both are C^2 across ``r = 0``; a power series is used for ``kr < 1``.
    """
    r = math.sqrt(dx * dx + dy * dy + dz * dz)
    s = complex(0.0, k * r)
    ik = complex(0.0, k)
    if k * r < 1.0:
        # g = ik sum_{n != 2} s^(n-1)/n!,  dg = (ik)^2 sum_{n >= 3} (n-1)/n! s^(n-2)
        g = 0j
        dg = 0j
        for n in range(_SERIES_TERMS, 2, -1):
            g = g * s + _INV_FACT[n]
            dg = dg * s + (n - 1) * _INV_FACT[n]
        g = ik * (1.0 + s * s * g)
        dg = ik * ik * s * dg
    else:
        es = complex(math.cos(k * r), math.sin(k * r))
        g = (es - 1.0 - 0.5 * s * s) / r
        dg = (s * es - es + 1.0 - 0.5 * s * s) / (r * r)
    if r > 0.0:
        cosine = (nx * dx + ny * dy + nz * dz) / r
    else:
        cosine = 0.0
    return g * INV_FOUR_PI, cosine * dg * INV_FOUR_PI


@numba.njit(cache=True)
def far_block(pts, wts, normals, k, c_s, c_k, out):
    """Regular tensor-rule entries for all pairs.

    The point-pair kernel is evaluated once for ``(i, j)`` and ``(j, i)``.
    """
    nf = pts.shape[0]
    nq = pts.shape[1]
    for i in range(nf):
        for j in range(i, nf):
            s_ij = 0j
            k_ij = 0j
            k_ji = 0j
            for a in range(nq):
                xa, ya, za = pts[i, a, 0], pts[i, a, 1], pts[i, a, 2]
                wa = wts[i, a]
                for b in range(nq):
                    dx = xa - pts[j, b, 0]
                    dy = ya - pts[j, b, 1]
                    dz = za - pts[j, b, 2]
                    r = math.sqrt(dx * dx + dy * dy + dz * dz)
                    if r == 0.0:
                        continue
                    w = wa * wts[j, b]
                    kr = k * r
                    e = complex(math.cos(kr), math.sin(kr)) * (w * INV_FOUR_PI / r)
                    radial = e * complex(-1.0 / r, k) / r
                    s_ij += e
                    k_ij += radial * (normals[i, 0] * dx + normals[i, 1] * dy + normals[i, 2] * dz)
                    k_ji -= radial * (normals[j, 0] * dx + normals[j, 1] * dy + normals[j, 2] * dz)
            out[i, j] = c_s * s_ij + c_k * k_ij
            out[j, i] = c_s * s_ij + c_k * k_ji


@numba.njit(cache=True)
def pair_entries(rows, cols, pts, wts, normals, k, c_s, c_k):
    """Regular tensor-rule entries for explicit index pairs."""
    n = rows.shape[0]
    nq = pts.shape[1]
    out = np.empty(n, dtype=np.complex128)
    for p in range(n):
        i = rows[p]
        j = cols[p]
        acc_s = 0j
        acc_k = 0j
        for a in range(nq):
            for b in range(nq):
                dx = pts[i, a, 0] - pts[j, b, 0]
                dy = pts[i, a, 1] - pts[j, b, 1]
                dz = pts[i, a, 2] - pts[j, b, 2]
                w = wts[i, a] * wts[j, b]
                s, kp = _full_kernel(k, dx, dy, dz, normals[i, 0], normals[i, 1], normals[i, 2])
                acc_s += w * s
                acc_k += w * kp
        out[p] = c_s * acc_s + c_k * acc_k
    return out


@numba.njit(cache=True)
def static_potential(x0, x1, x2, tri, n):
    """Closed-form ``int_T R^q dy`` for ``q = -1, 1`` and their gradients in ``x``.

    Returns ``(I_m1, grad I_m1, I_1, grad I_1)`` flattened to eight floats.
    """
    d = (x0 - tri[0, 0]) * n[0] + (x1 - tri[0, 1]) * n[1] + (x2 - tri[0, 2]) * n[2]
    e0 = tri[1] - tri[0]
    size = math.sqrt(e0[0] ** 2 + e0[1] ** 2 + e0[2] ** 2)
    if abs(d) < 1e-10 * size:
        d = 0.0
    ad = abs(d)
    r0 = x0 - d * n[0]
    r1 = x1 - d * n[1]
    r2 = x2 - d * n[2]
    value = 0.0
    g0 = 0.0
    g1 = 0.0
    g2 = 0.0
    solid = 0.0
    edge_sum = 0.0
    h0 = 0.0
    h1 = 0.0
    h2 = 0.0
    for e in range(3):
        a = tri[e]
        b = tri[(e + 1) % 3]
        ex, ey, ez = b[0] - a[0], b[1] - a[1], b[2] - a[2]
        length = math.sqrt(ex * ex + ey * ey + ez * ez)
        lx, ly, lz = ex / length, ey / length, ez / length
        ux = ly * n[2] - lz * n[1]
        uy = lz * n[0] - lx * n[2]
        uz = lx * n[1] - ly * n[0]
        lp = (b[0] - r0) * lx + (b[1] - r1) * ly + (b[2] - r2) * lz
        lm = (a[0] - r0) * lx + (a[1] - r1) * ly + (a[2] - r2) * lz
        p0 = (a[0] - r0) * ux + (a[1] - r1) * uy + (a[2] - r2) * uz
        r0sq = p0 * p0 + d * d
        rp = math.sqrt((x0 - b[0]) ** 2 + (x1 - b[1]) ** 2 + (x2 - b[2]) ** 2)
        rm = math.sqrt((x0 - a[0]) ** 2 + (x1 - a[1]) ** 2 + (x2 - a[2]) ** 2)
        if lp + lm >= 0.0:
            num = rp + lp
            den = rm + lm
        else:
            num = rm - lm
            den = rp - lp
        if num > 0.0 and den > 0.0:
            f = math.log(num / den)
        else:
            f = 0.0
        beta = math.atan2(p0 * lp, r0sq + ad * rp) - math.atan2(p0 * lm, r0sq + ad * rm)
        value += p0 * f - ad * beta
        g0 -= ux * f
        g1 -= uy * f
        g2 -= uz * f
        solid += beta
        # int_edge R dl
        k1 = 0.5 * (r0sq * f + lp * rp - lm * rm)
        edge_sum += p0 * k1
        h0 -= ux * k1
        h1 -= uy * k1
        h2 -= uz * k1
    sgn = 0.0
    if d > 0.0:
        sgn = 1.0
    elif d < 0.0:
        sgn = -1.0
    g0 -= n[0] * sgn * solid
    g1 -= n[1] * sgn * solid
    g2 -= n[2] * sgn * solid
    w = (d * d * value + edge_sum) / 3.0
    h0 += d * value * n[0]
    h1 += d * value * n[1]
    h2 += d * value * n[2]
    return value, g0, g1, g2, w, h0, h1, h2


@numba.njit(cache=True)
def near_entries(rows, cols, corners, normals, outer_pts, outer_wts, inner_pts, inner_wts, k, c_s, c_k):
    """Singularity-subtracted entries for near and self pairs.

    The closed-form part is ``(1/r - k^2 r/2) / (4 pi)``.
    ``outer_pts`` carries the test rule for the closed-form part,
    ``inner_pts`` the rule used on both faces for the bounded remainder.
    Weights are already multiplied by face areas.
    """
    n = rows.shape[0]
    nqo = outer_pts.shape[1]
    nqi = inner_pts.shape[1]
    out = np.empty(n, dtype=np.complex128)
    half_k2 = 0.5 * k * k
    for p in range(n):
        i = rows[p]
        j = cols[p]
        nx = normals[i]
        tri = corners[j]
        ny = normals[j]
        s_static = 0.0
        k_static = 0.0
        acc_s = 0j
        acc_k = 0j
        for a in range(nqo):
            x0, x1, x2 = outer_pts[i, a, 0], outer_pts[i, a, 1], outer_pts[i, a, 2]
            wa = outer_wts[i, a]
            v, g0, g1, g2, w1, h0, h1, h2 = static_potential(x0, x1, x2, tri, ny)
            s_static += wa * (v - half_k2 * w1)
            k_static += wa * (g0 * nx[0] + g1 * nx[1] + g2 * nx[2] - half_k2 * (h0 * nx[0] + h1 * nx[1] + h2 * nx[2]))
        for a in range(nqi):
            x0, x1, x2 = inner_pts[i, a, 0], inner_pts[i, a, 1], inner_pts[i, a, 2]
            wa = inner_wts[i, a]
            for b in range(nqi):
                w = wa * inner_wts[j, b]
                gs, gk = _remainder_kernel(k, x0 - inner_pts[j, b, 0], x1 - inner_pts[j, b, 1],
                                           x2 - inner_pts[j, b, 2], nx[0], nx[1], nx[2])
                acc_s += w * gs
                acc_k += w * gk
        s_total = s_static * INV_FOUR_PI + acc_s
        k_total = k_static * INV_FOUR_PI + acc_k
        out[p] = c_s * s_total + c_k * k_total
    return out
