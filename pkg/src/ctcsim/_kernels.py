"""Compiled inner loops (numba). Pure functions of their arguments."""

import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def _f(x, y, z, w, g, r, s):
    return -x + w * y + g * x * z, -w * x - y, -g * x * x - z / r + s


@nb.njit(cache=True, inline="always")
def _step(x, y, z, w, g, r, s, h):
    a1, b1, c1 = _f(x, y, z, w, g, r, s)
    a2, b2, c2 = _f(x + 0.5 * h * a1, y + 0.5 * h * b1, z + 0.5 * h * c1, w, g, r, s)
    a3, b3, c3 = _f(x + 0.5 * h * a2, y + 0.5 * h * b2, z + 0.5 * h * c2, w, g, r, s)
    a4, b4, c4 = _f(x + h * a3, y + h * b3, z + h * c3, w, g, r, s)
    h6 = h / 6.0
    return (
        x + h6 * (a1 + 2.0 * a2 + 2.0 * a3 + a4),
        y + h6 * (b1 + 2.0 * b2 + 2.0 * b3 + b4),
        z + h6 * (c1 + 2.0 * c2 + 2.0 * c3 + c4),
    )


@nb.njit(cache=True)
def rk4_fixed(x0, w, g, r, h, n, stride, pump, bound):
    """n RK4 steps of size h; every stride-th state is stored.

    ``pump`` holds one pump scale per step (empty array means 1.0).
    Returns (samples, n_stored, diverged_at) with diverged_at = -1 if the
    run stayed within ``bound``.
    """
    m = n // stride + 1
    out = np.empty((m, 3))
    x, y, z = x0[0], x0[1], x0[2]
    out[0, 0] = x
    out[0, 1] = y
    out[0, 2] = z
    noisy = pump.shape[0] > 0
    s = 1.0
    for i in range(n):
        if noisy:
            s = pump[i]
        x, y, z = _step(x, y, z, w, g, r, s, h)
        if not (abs(x) <= bound and abs(y) <= bound and abs(z) <= bound):
            j = i // stride
            return out[: j + 1], j + 1, i + 1
        if (i + 1) % stride == 0:
            j = (i + 1) // stride
            out[j, 0] = x
            out[j, 1] = y
            out[j, 2] = z
    return out, m, -1


@nb.njit(cache=True, inline="always")
def _fvar(u, w, g, r):
    # u = [x, y, z, M (row-major 3x3), log-det accumulator]
    x = u[0]
    y = u[1]
    z = u[2]
    du = np.empty(13)
    du[0] = -x + w * y + g * x * z
    du[1] = -w * x - y
    du[2] = -g * x * x - z / r + 1.0
    j00 = -1.0 + g * z
    j02 = g * x
    j20 = -2.0 * g * x
    for c in range(3):
        m0 = u[3 + c]
        m1 = u[6 + c]
        m2 = u[9 + c]
        du[3 + c] = j00 * m0 + w * m1 + j02 * m2
        du[6 + c] = -w * m0 - m1
        du[9 + c] = j20 * m0 - m2 / r
    du[12] = j00 - 1.0 - 1.0 / r
    return du


@nb.njit(cache=True)
def rk4_variational(x0, w, g, r, h, n):
    """Co-integrate state, fundamental matrix and the integral of tr J.

    Returns (x(T), M(T), integral of tr J over [0, T]) for T = n*h.
    """
    u = np.zeros(13)
    u[0] = x0[0]
    u[1] = x0[1]
    u[2] = x0[2]
    u[3] = 1.0
    u[7] = 1.0
    u[11] = 1.0
    for _ in range(n):
        k1 = _fvar(u, w, g, r)
        k2 = _fvar(u + 0.5 * h * k1, w, g, r)
        k3 = _fvar(u + 0.5 * h * k2, w, g, r)
        k4 = _fvar(u + h * k3, w, g, r)
        u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return u[:3].copy(), u[3:12].copy().reshape((3, 3)), u[12]


@nb.njit(cache=True, inline="always")
def _ftan(x, y, z, a, b, c, w, g, r):
    fx, fy, fz = _f(x, y, z, w, g, r, 1.0)
    da = (-1.0 + g * z) * a + w * b + g * x * c
    db = -w * a - b
    dc = -2.0 * g * x * a - c / r
    return fx, fy, fz, da, db, dc


@nb.njit(cache=True)
def benettin(x0, v0, w, g, r, h, n_blocks, block_steps, n_discard):
    """Largest Lyapunov exponent by renormalized tangent-vector growth.

    Integrates n_blocks blocks of block_steps RK4 steps; the log growth of
    the first n_discard blocks is not averaged.  Returns (exponent, x_end).
    """
    x, y, z = x0[0], x0[1], x0[2]
    nv = np.sqrt(v0[0] ** 2 + v0[1] ** 2 + v0[2] ** 2)
    a, b, c = v0[0] / nv, v0[1] / nv, v0[2] / nv
    acc = 0.0
    for k in range(n_blocks):
        for _ in range(block_steps):
            k1 = _ftan(x, y, z, a, b, c, w, g, r)
            hh = 0.5 * h
            k2 = _ftan(x + hh * k1[0], y + hh * k1[1], z + hh * k1[2],
                       a + hh * k1[3], b + hh * k1[4], c + hh * k1[5], w, g, r)
            k3 = _ftan(x + hh * k2[0], y + hh * k2[1], z + hh * k2[2],
                       a + hh * k2[3], b + hh * k2[4], c + hh * k2[5], w, g, r)
            k4 = _ftan(x + h * k3[0], y + h * k3[1], z + h * k3[2],
                       a + h * k3[3], b + h * k3[4], c + h * k3[5], w, g, r)
            h6 = h / 6.0
            x += h6 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
            y += h6 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
            z += h6 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
            a += h6 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
            b += h6 * (k1[4] + 2.0 * k2[4] + 2.0 * k3[4] + k4[4])
            c += h6 * (k1[5] + 2.0 * k2[5] + 2.0 * k3[5] + k4[5])
        nv = np.sqrt(a * a + b * b + c * c)
        a /= nv
        b /= nv
        c /= nv
        if k >= n_discard:
            acc += np.log(nv)
    t_avg = (n_blocks - n_discard) * block_steps * h
    out = np.empty(3)
    out[0] = x
    out[1] = y
    out[2] = z
    return acc / t_avg, out
