"""Fixed points of the feedback Bloch flow and their stability.

The trivial point (0, 0, r) always exists. Its linearization splits into the
transverse block [[g*r - 1, omega], [-omega, -1]] and the longitudinal rate
-1/r, giving

    lambda_pm = ((g*r - 2) +- sqrt((g*r)**2 - 4*omega**2)) / 2,  lambda_3 = -1/r.

The determinant of the block, 1 + omega**2 - g*r, vanishes on the line where
the pair of symmetric (pitchfork) fixed points is born; for omega > 1 the
same line is where the unstable manifold of the trivial point drops from
dimension 2 to 1.  The Hopf line is g*r = 2.
"""

from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import DimensionlessParams, SpinState, jacobian, rhs

EPS_EIG = 1e-9
RESIDUAL_TOL = 1e-10


class NewtonError(RuntimeError):
    pass


class SingularJacobian(NewtonError):
    pass


class NoConvergence(NewtonError):
    pass


class ResidualTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointReport:
    state: SpinState
    eigenvalues: np.ndarray
    max_real_part: float
    unstable_dim: int
    kind: str
    marginal: bool = False

    @property
    def stable(self) -> bool:
        return self.unstable_dim == 0 and not self.marginal

    def to_record(self) -> dict:
        return {
            "state": list(self.state),
            "eigenvalues": [[float(v.real), float(v.imag)] for v in self.eigenvalues],
            "unstable_dim": int(self.unstable_dim),
            "kind": self.kind,
            "marginal": bool(self.marginal),
        }


@dataclass(frozen=True)
class BoundarySet:
    """Closed-form bifurcation curves g(omega) at fixed r; NaN outside the
    range where a curve applies."""

    omega: np.ndarray
    r: float
    hopf: np.ndarray
    pitchfork: np.ndarray
    manifold_dim: np.ndarray


def trivial_fixed_point(params: DimensionlessParams) -> SpinState:
    return SpinState(0.0, 0.0, float(params.r))


def nontrivial_fixed_points(params: DimensionlessParams) -> list[SpinState]:
    """The symmetric pair born at g*r = 1 + omega**2; empty below it."""
    w, g, r = params.as_tuple()
    radicand = g * r - 1.0 - w * w
    if radicand <= 0:
        return []
    px = math.sqrt(radicand / (g * g * r))
    pz = (1.0 + w * w) / g
    return [SpinState(px, -w * px, pz), SpinState(-px, w * px, pz)]


def refine_fixed_point(
    guess,
    params: DimensionlessParams,
    tol: float = 1e-12,
    max_iter: int = 50,
    full_output: bool = False,
):
    """Damped Newton iteration on rhs with the analytic Jacobian.

    Each step is halved (at most 5 times) until the residual decreases.
    With ``full_output`` returns ``(state, iterations)``.
    """
    x = np.asarray(guess, dtype=float).reshape(3)
    res = np.linalg.norm(rhs(x, params))
    for it in range(max_iter + 1):
        if res <= tol:
            state = SpinState(*map(float, x))
            return (state, it) if full_output else state
        if it == max_iter:
            break
        J = jacobian(x, params)
        try:
            step = np.linalg.solve(J, -rhs(x, params))
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(f"singular Jacobian at {x}") from exc
        if not np.all(np.isfinite(step)) or np.linalg.cond(J) > 1e14:
            raise SingularJacobian(f"ill-conditioned Jacobian at {x}")
        lam = 1.0
        for _ in range(6):
            trial = x + lam * step
            trial_res = np.linalg.norm(rhs(trial, params))
            if trial_res < res:
                break
            lam *= 0.5
        x, res = trial, trial_res
    raise NoConvergence(f"Newton did not converge in {max_iter} iterations (residual {res:.3g})")


def eigenvalues_trivial(params: DimensionlessParams) -> np.ndarray:
    w, g, r = params.as_tuple()
    gr = g * r
    root = cmath.sqrt(gr * gr - 4.0 * w * w)
    return np.array([(gr - 2.0 + root) / 2.0, (gr - 2.0 - root) / 2.0, complex(-1.0 / r)])


def match_eigenvalues(a, b) -> float:
    """Largest absolute difference under the best pairing of two triples."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    return min(float(np.max(np.abs(a - b[list(p)]))) for p in itertools.permutations(range(len(b))))


def _kind(state: SpinState) -> str:
    if abs(state.px) < 1e-12 and abs(state.py) < 1e-12:
        return "Trivial"
    return "Pitchfork+" if state.px > 0 else "Pitchfork-"


def classify_fixed_point(state, params: DimensionlessParams, eps: float = EPS_EIG) -> FixedPointReport:
    state = SpinState(*map(float, state))
    residual = float(np.linalg.norm(rhs(state, params)))
    if residual > RESIDUAL_TOL:
        raise ResidualTooLarge(f"|rhs| = {residual:.3g} at {tuple(state)}")
    eig = np.linalg.eigvals(jacobian(state, params))
    eig = eig[np.lexsort((eig.imag, -eig.real))]
    re = eig.real
    return FixedPointReport(
        state=state,
        eigenvalues=eig,
        max_real_part=float(re.max()),
        unstable_dim=int(np.sum(re > eps)),
        kind=_kind(state),
        marginal=bool(np.any(np.abs(re) <= eps)),
    )


def all_fixed_points(params: DimensionlessParams) -> list[FixedPointReport]:
    points = [trivial_fixed_point(params), *nontrivial_fixed_points(params)]
    return [classify_fixed_point(p, params) for p in points]


def unstable_dim_trivial(params: DimensionlessParams, eps: float = EPS_EIG) -> int:
    """Unstable-manifold dimension of the trivial point from the numeric
    eigensolver."""
    eig = np.linalg.eigvals(jacobian(trivial_fixed_point(params), params))
    return int(np.sum(eig.real > eps))


def analytic_boundaries(omega, r: float = 1.0) -> BoundarySet:
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    nan = np.full_like(w, np.nan)
    return BoundarySet(
        omega=w,
        r=float(r),
        hopf=np.where(w > 1, 2.0 / r, nan),
        pitchfork=np.where(w < 1, (1.0 + w * w) / r, nan),
        manifold_dim=np.where(w > 1, (1.0 + w * w) / r, nan),
    )


def bisect(predicate: Callable[[float], bool], lo: float, hi: float, tol: float = 1e-9, max_iter: int = 200) -> float:
    """Locate the switch of a monotone boolean ``predicate`` on [lo, hi]
    (False at lo, True at hi)."""
    if predicate(lo) or not predicate(hi):
        raise ValueError("predicate must be False at lo and True at hi")
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if predicate(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def numeric_boundary(which: str, omega: float, r: float = 1.0, tol: float = 1e-10) -> float:
    """Bisection on the numeric eigen-criterion at the trivial point.

    ``hopf``: max Re(lambda) becomes positive (omega > 1);
    ``manifold_dim``: unstable dimension drops from 2 to 1 (omega > 1);
    ``pitchfork``: a real eigenvalue crosses zero (omega < 1).
    """
    def max_re(g):
        return np.linalg.eigvals(jacobian((0.0, 0.0, r), DimensionlessParams(omega, g, r))).real.max()

    def dim(g):
        return unstable_dim_trivial(DimensionlessParams(omega, g, r), eps=0.0)

    g_hopf, g_det = 2.0 / r, (1.0 + omega * omega) / r
    if which == "hopf":
        return bisect(lambda g: max_re(g) > 0, 0.0, g_det if omega > 1 else 4.0 / r, tol)
    if which == "manifold_dim":
        return bisect(lambda g: dim(g) < 2, 0.5 * (g_hopf + 2 * omega / r), 2.0 * g_det, tol)
    if which == "pitchfork":
        return bisect(lambda g: dim(g) >= 1, 0.0, 2.0 / r, tol)
    raise ValueError(f"unknown boundary {which!r}")


def has_stable_pair(params: DimensionlessParams, seeds=None) -> bool:
    """Whether Newton, started from generic seeds, lands on a stable fixed
    point off the p_z axis."""
    w, _, r = params.as_tuple()
    if seeds is None:
        seeds = [(a, -w * a, b * r) for a in (0.02, 0.1, 0.3, 0.7) for b in (0.3, 0.7, 1.0)]
    for seed in seeds:
        try:
            x = refine_fixed_point(seed, params, max_iter=80)
        except NewtonError:
            continue
        if abs(x.px) > 1e-6 and classify_fixed_point(x, params).stable:
            return True
    return False


def bistable_onset(omega: float, r: float = 1.0, tol: float = 1e-6, g_max: float | None = None, n_coarse: int = 100) -> float:
    """Smallest feedback gain at which Newton finds a stable symmetric pair:
    a coarse scan up to ``g_max`` brackets the switch, bisection refines it."""
    g_max = g_max if g_max is not None else 10.0 / r

    def pred(g):
        return has_stable_pair(DimensionlessParams(omega, g, r))

    grid = np.linspace(0.0, g_max, n_coarse + 1)
    for lo, hi in zip(grid[:-1], grid[1:]):
        if pred(hi):
            return bisect(pred, max(lo, 1e-9), hi, tol)
    raise ValueError(f"no stable pair found for g <= {g_max}")
