"""Time integration of the feedback Bloch flow.

Two integrators are provided: a classical fixed-step RK4 (compiled, optionally
driven by Ornstein-Uhlenbeck pump noise) and an adaptive embedded Runge-Kutta
pair backed by :func:`scipy.integrate.solve_ivp`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.signal import lfilter

from . import _kernels
from ._io import atomic_write_text
from .model import DimensionlessParams, rhs

DEFAULT_DT = 1e-3
DEFAULT_TOL = 1e-8
DEFAULT_BOUND = 1e6


class IntegrationError(RuntimeError):
    pass


class Divergence(IntegrationError):
    """A state component left the configured bound."""

    def __init__(self, time: float, partial: "Trajectory"):
        super().__init__(f"trajectory diverged at tau = {time:.6g}")
        self.time = time
        self.partial = partial


class StepUnderflow(IntegrationError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled states; row k is the state at ``t0 + k*dt``."""

    t0: float
    dt: float
    samples: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != 3 or s.shape[0] == 0:
            raise ValueError("samples must be a non-empty (n, 3) array")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (len(self) - 1)

    @property
    def px(self) -> np.ndarray:
        return self.samples[:, 0]

    @property
    def py(self) -> np.ndarray:
        return self.samples[:, 1]

    @property
    def pz(self) -> np.ndarray:
        return self.samples[:, 2]

    @property
    def final_state(self) -> np.ndarray:
        return self.samples[-1].copy()

    def tail(self, fraction: float) -> "Trajectory":
        """Last ``fraction`` of the samples (at least two)."""
        if not 0 < fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        k = min(len(self) - 2, int(math.floor((1 - fraction) * (len(self) - 1))))
        k = max(k, 0)
        return Trajectory(self.t0 + k * self.dt, self.dt, self.samples[k:])

    def since(self, t: float) -> "Trajectory":
        k = int(math.ceil((t - self.t0) / self.dt - 1e-9))
        k = min(max(k, 0), len(self) - 2)
        return Trajectory(self.t0 + k * self.dt, self.dt, self.samples[k:])

    def to_csv(self, path) -> Path:
        return atomic_write_text(path, trajectory_csv(self))

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        tau = data[:, 0]
        dt = float(tau[1] - tau[0]) if len(tau) > 1 else 1.0
        return cls(float(tau[0]), dt, data[:, 1:4])


def trajectory_csv(traj: Trajectory, params: DimensionlessParams | None = None) -> str:
    """Columnar text: ``tau,px,py,pz`` (plus ``dpx`` from the exact rhs when
    params are given), 17 significant digits."""
    cols = [traj.times, traj.px, traj.py, traj.pz]
    header = "tau,px,py,pz"
    if params is not None:
        w, g = params.omega, params.g
        cols.append(-traj.px + w * traj.py + g * traj.px * traj.pz)
        header += ",dpx"
    table = np.column_stack(cols)
    lines = [header]
    lines.extend(",".join(format(v, ".17g") for v in row) for row in table)
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class NoiseSpec:
    """Pump-noise settings: RMS fraction ``eta``, bandwidth ``cutoff`` (1/T2)."""

    eta: float
    cutoff: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ValueError("eta must be finite and non-negative")
        if not (math.isfinite(self.cutoff) and self.cutoff > 0):
            raise ValueError("cutoff must be finite and positive")

    @property
    def correlation_time(self) -> float:
        return 1.0 / (2.0 * math.pi * self.cutoff)


def colored_noise(spec: NoiseSpec, dt: float, n: int) -> np.ndarray:
    """Unit-variance OU samples xi_0..xi_{n-1} on a grid of spacing dt.

    Exact discretization xi_{k+1} = a*xi_k + sqrt(1 - a**2)*N(0, 1) with
    a = exp(-dt/tau_c), started from the stationary law.
    """
    if n <= 0:
        return np.empty(0)
    a = math.exp(-dt / spec.correlation_time)
    rng = np.random.default_rng(spec.seed)
    draws = rng.standard_normal(n)
    xi0 = draws[0]
    if n == 1:
        return np.array([xi0])
    b = math.sqrt(1.0 - a * a)
    rest, _ = lfilter([b], [1.0, -a], draws[1:], zi=[a * xi0])
    return np.concatenate(([xi0], rest))


def pump_scale(spec: NoiseSpec | None, dt: float, n: int) -> np.ndarray:
    """Per-step pump multiplier 1 + eta*xi; empty when there is no noise."""
    if spec is None or spec.eta == 0:
        return np.empty(0)
    return 1.0 + spec.eta * colored_noise(spec, dt, n)


def integrate_fixed(
    state0,
    params: DimensionlessParams,
    dt: float = DEFAULT_DT,
    t_end: float = 100.0,
    noise: NoiseSpec | None = None,
    stride: int = 1,
    bound: float = DEFAULT_BOUND,
    t0: float = 0.0,
) -> Trajectory:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not t_end >= dt:
        raise ValueError("t_end must be at least dt")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = int(round(t_end / dt))
    x0 = np.asarray(state0, dtype=float).reshape(3)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    pump = pump_scale(noise, dt, n)
    w, g, r = params.as_tuple()
    out, m, diverged = _kernels.rk4_fixed(x0, w, g, r, float(dt), n, int(stride), pump, float(bound))
    if diverged >= 0:
        raise Divergence(t0 + diverged * dt, Trajectory(t0, dt * stride, out[:m]))
    return Trajectory(t0, dt * stride, out[:m])


def integrate_adaptive(
    state0,
    params: DimensionlessParams,
    tol: float = DEFAULT_TOL,
    t_end: float = 100.0,
    sample_dt: float = 1e-2,
    t0: float = 0.0,
    min_step: float = 1e-12,
    max_step: float = 0.1,
) -> Trajectory:
    """Dormand-Prince 8(5,3) with step control, resampled onto a uniform grid.

    Steps are capped at ``max_step`` (a tenth of the relaxation time by
    default); at loose tolerances uncapped steps let the limit-cycle period
    drift by a few 1e-5.
    """
    if not 1e-13 < tol < 1e-2:
        raise ValueError("tol must lie in (1e-13, 1e-2)")
    x0 = np.asarray(state0, dtype=float).reshape(3)
    n = int(round(t_end / sample_dt))
    grid = t0 + sample_dt * np.arange(n + 1)
    sol = solve_ivp(
        lambda t, u: rhs(u, params),
        (t0, grid[-1]),
        x0,
        method="DOP853",
        rtol=tol,
        atol=tol * 1e-2,
        dense_output=True,
        max_step=max_step,
    )
    if sol.status < 0:
        raise StepUnderflow(sol.message)
    # last step may be truncated to land on the end point
    steps = np.diff(sol.t)[:-1]
    if steps.size and steps.min() < min_step:
        raise StepUnderflow(f"required step {steps.min():.3g} below {min_step:.3g}")
    return Trajectory(t0, sample_dt, sol.sol(grid).T)
