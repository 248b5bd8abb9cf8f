"""Feedback Bloch equations in physical and dimensionless form.

Time is measured in units of T2 and polarization in units of Rop*T2, which
reduces the flow to three parameters::

    dpx/dt = -px + omega*py + g*px*pz
    dpy/dt = -omega*px - py
    dpz/dt = -g*px**2 - pz/r + s

with ``omega = gamma*B0*T2``, ``g = GammaFB*Rop*T2**2``, ``r = T1/T2`` and
``s`` the (dimensionless) pump scale, 1 for noise-free pumping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# gamma*T2 in rad/nT; maps the magnetic-field axis onto omega.
DEFAULT_GAMMA_T2 = 0.3


def _require_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class PhysicalParams:
    """Laboratory parameters of the spin ensemble.

    Units: B0 in nT, gamma in rad/(s nT), T1 and T2 in s, Rop in 1/s,
    GammaFB in 1/s (per unit polarization).
    """

    B0: float
    gamma: float
    T1: float
    T2: float
    Rop: float
    GammaFB: float

    def __post_init__(self) -> None:
        for name in ("B0", "gamma", "T1", "T2", "Rop", "GammaFB"):
            _require_finite(name, getattr(self, name))
        for name in ("gamma", "T1", "T2", "Rop"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.B0 < 0:
            raise ValueError(f"B0 must be non-negative, got {self.B0!r}")
        if self.GammaFB < 0:
            raise ValueError(f"GammaFB must be non-negative, got {self.GammaFB!r}")


@dataclass(frozen=True)
class DimensionlessParams:
    """Reduced parameters (omega, g, r) that fully determine the dynamics."""

    omega: float
    g: float
    r: float = 1.0

    def __post_init__(self) -> None:
        for name in ("omega", "g", "r"):
            _require_finite(name, getattr(self, name))
        if self.omega < 0:
            raise ValueError(f"omega must be non-negative, got {self.omega!r}")
        if self.g < 0:
            raise ValueError(f"g must be non-negative, got {self.g!r}")
        if self.r <= 0:
            raise ValueError(f"r must be positive, got {self.r!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (float(self.omega), float(self.g), float(self.r))

    @classmethod
    def from_field(
        cls,
        B0: float,
        feedback: float,
        r: float = 1.0,
        gamma_T2: float = DEFAULT_GAMMA_T2,
    ) -> "DimensionlessParams":
        """Build parameters from a field in nT and a feedback factor quoted in
        units of 1/(Rop*T2**2), using the calibration ``gamma_T2`` (rad/nT)."""
        return cls(omega=gamma_T2 * B0, g=feedback, r=r)


class SpinState(NamedTuple):
    px: float
    py: float
    pz: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)

    def mirrored(self) -> "SpinState":
        """Image under the symmetry (px, py, pz) -> (-px, -py, pz)."""
        return SpinState(-self.px, -self.py, self.pz)


def nondimensionalize(p: PhysicalParams) -> DimensionlessParams:
    return DimensionlessParams(
        omega=p.gamma * p.B0 * p.T2,
        g=p.GammaFB * p.Rop * p.T2**2,
        r=p.T1 / p.T2,
    )


def redimensionalize(
    d: DimensionlessParams, gamma: float, T2: float, Rop: float
) -> PhysicalParams:
    """Inverse of :func:`nondimensionalize` given the three scale parameters."""
    return PhysicalParams(
        B0=d.omega / (gamma * T2),
        gamma=gamma,
        T1=d.r * T2,
        T2=T2,
        Rop=Rop,
        GammaFB=d.g / (Rop * T2**2),
    )


def rhs(state, params: DimensionlessParams, pump_scale: float = 1.0) -> np.ndarray:
    px, py, pz = (float(v) for v in state)
    w, g, r = params.omega, params.g, params.r
    return np.array(
        [
            -px + w * py + g * px * pz,
            -w * px - py,
            -g * px * px - pz / r + pump_scale,
        ]
    )


def jacobian(state, params: DimensionlessParams) -> np.ndarray:
    px, _, pz = (float(v) for v in state)
    w, g, r = params.omega, params.g, params.r
    return np.array(
        [
            [-1.0 + g * pz, w, g * px],
            [-w, -1.0, 0.0],
            [-2.0 * g * px, 0.0, -1.0 / r],
        ]
    )
