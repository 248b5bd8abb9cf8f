"""Attractor detection, periodic orbits, Floquet multipliers and Lyapunov
exponents.

The Poincare section is the half-plane p_y = 0, p_x > 0.  On it the flow has
dp_y/dtau = -omega*p_x < 0, so every orbit encircling the p_z axis crosses it
transversally with p_y decreasing.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import find_peaks

from . import _kernels
from .equilibria import (
    FixedPointReport,
    NewtonError,
    classify_fixed_point,
    refine_fixed_point,
)
from .integrate import DEFAULT_DT, Divergence, Trajectory, integrate_fixed
from .model import DimensionlessParams, SpinState, rhs

DELTA_FP = 1e-8
DELTA_PER = 1e-5
EPS_FLOQUET = 1e-3
EPS_LYAP = 0.01
WEAK_INSTABILITY_MAX = 2.0
PEAK_PROMINENCE = 0.05


class OrbitError(RuntimeError):
    pass


class TooFewCrossings(OrbitError):
    pass


class Inconsistent(OrbitError):
    pass


class NoConvergence(OrbitError):
    pass


class LeftDomain(OrbitError):
    pass


class AbelLiouvilleMismatch(OrbitError):
    pass


# ---------------------------------------------------------------------------
# Poincare section and period estimation

@dataclass(frozen=True)
class Crossings:
    times: np.ndarray
    states: np.ndarray

    def __len__(self) -> int:
        return len(self.times)


# Inverse Vandermonde for nodes s = 0, 1, 2, 3: monomial coefficients of the
# interpolating cubic from its four node values.
_VINV = np.linalg.inv(np.vander(np.arange(4.0), 4, increasing=True))


def section_crossings(traj: Trajectory) -> Crossings:
    """Crossings of p_y = 0 with p_x > 0, located by cubic interpolation
    through the four surrounding samples."""
    x, y = traj.px, traj.py
    n = len(traj)
    idx = np.nonzero((y[:-1] > 0) & (y[1:] <= 0) & (x[:-1] > 0))[0]
    if idx.size == 0:
        return Crossings(np.empty(0), np.empty((0, 3)))
    if n < 4:
        frac = y[idx] / (y[idx] - y[idx + 1])
        states = traj.samples[idx] * (1 - frac)[:, None] + traj.samples[idx + 1] * frac[:, None]
        return Crossings(traj.t0 + traj.dt * (idx + frac), states)

    base = np.clip(idx - 1, 0, n - 4)
    stencil = base[:, None] + np.arange(4)
    coef = np.einsum("ij,kjc->kic", _VINV, traj.samples[stencil])
    cy = coef[:, :, 1]
    lo = (idx - base).astype(float)
    s = lo + y[idx] / (y[idx] - y[idx + 1])
    for _ in range(8):
        val = cy[:, 0] + s * (cy[:, 1] + s * (cy[:, 2] + s * cy[:, 3]))
        der = cy[:, 1] + s * (2 * cy[:, 2] + 3 * s * cy[:, 3])
        s = np.clip(s - val / der, lo, lo + 1)
    powers = np.stack([np.ones_like(s), s, s * s, s * s * s], axis=1)
    states = np.einsum("ki,kic->kc", powers, coef)
    states[:, 1] = 0.0
    return Crossings(traj.t0 + traj.dt * (base + s), states)


@dataclass(frozen=True)
class PeriodEstimate:
    period: float
    residual: float
    periodic: bool
    crossings: Crossings = field(repr=False)

    @property
    def anchor(self) -> np.ndarray:
        return self.crossings.states[-1]


def estimate_period(
    traj: Trajectory,
    tail_fraction: float = 0.5,
    delta_per: float = DELTA_PER,
    min_crossings: int = 8,
) -> PeriodEstimate:
    """Mean section-return time over the tail and the return-map residual
    (largest distance between successive crossing states)."""
    cr = section_crossings(traj.tail(tail_fraction))
    if len(cr) < min_crossings:
        raise TooFewCrossings(f"{len(cr)} section crossings in tail, need {min_crossings}")
    period = float(np.mean(np.diff(cr.times)))
    residual = float(np.max(np.linalg.norm(np.diff(cr.states, axis=0), axis=1)))
    return PeriodEstimate(period, residual, residual <= delta_per, cr)


# ---------------------------------------------------------------------------
# Peak structure

def half_cycle_peak_counts(
    x: np.ndarray,
    prominence: float = PEAK_PROMINENCE,
    amplitude: float | None = None,
    lobes: str = "positive",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Peaks of |p_x| inside each lobe between consecutive zero crossings.

    Returns (counts, start_index, end_index) per lobe.  Peaks need a
    prominence of at least ``prominence * amplitude`` (amplitude defaults to
    the peak-to-peak range of ``x``).  ``lobes`` is "positive" or "both".
    """
    x = np.asarray(x, dtype=float)
    if amplitude is None:
        amplitude = float(np.ptp(x)) if x.size else 0.0
    sgn = np.signbit(x)
    zc = np.nonzero(sgn[:-1] != sgn[1:])[0]
    counts, starts, ends = [], [], []
    for a, b in zip(zc[:-1], zc[1:]):
        positive = x[a + 1] > 0
        if lobes == "positive" and not positive:
            continue
        seg = x[a + 1 : b + 1] if positive else -x[a + 1 : b + 1]
        pk, _ = find_peaks(np.concatenate(([0.0], seg, [0.0])), prominence=prominence * amplitude)
        counts.append(len(pk))
        starts.append(a + 1)
        ends.append(b)
    return np.asarray(counts, dtype=int), np.asarray(starts, dtype=int), np.asarray(ends, dtype=int)


def peaks_per_half_cycle(
    traj: Trajectory,
    period: float | None = None,
    prominence: float = PEAK_PROMINENCE,
    min_half_cycles: int = 10,
    min_agreement: float = 0.8,
) -> int:
    """Modal number of p_x maxima per positive half cycle."""
    if period is not None and traj.t_end - traj.t0 < 0.5 * min_half_cycles * period:
        raise ValueError("trajectory too short for the requested number of half cycles")
    counts, _, _ = half_cycle_peak_counts(traj.px, prominence)
    if counts.size < min_half_cycles:
        raise Inconsistent(f"only {counts.size} half cycles available")
    value, freq = Counter(counts.tolist()).most_common(1)[0]
    if freq / counts.size < min_agreement:
        raise Inconsistent(f"modal count {value} in only {freq}/{counts.size} half cycles")
    return int(value)


def cycle_class_name(n_peaks: int) -> str:
    return {1: "LC1", 2: "LC2"}.get(n_peaks, f"Other({n_peaks})")


# ---------------------------------------------------------------------------
# Periodic orbits

@dataclass(frozen=True)
class PeriodicOrbit:
    anchor: SpinState
    period: float
    multipliers: np.ndarray
    cycle_class: str
    stable: bool
    residual: float = 0.0
    trace_integral: float = float("nan")
    monodromy: np.ndarray | None = field(default=None, repr=False)

    @property
    def nontrivial_multipliers(self) -> np.ndarray:
        k = int(np.argmin(np.abs(self.multipliers - 1.0)))
        return np.delete(self.multipliers, k)

    @property
    def max_multiplier(self) -> float:
        return float(np.max(np.abs(self.nontrivial_multipliers)))

    @property
    def weakly_unstable(self) -> bool:
        return 1.0 + EPS_FLOQUET < self.max_multiplier < WEAK_INSTABILITY_MAX

    def to_record(self) -> dict:
        return {
            "anchor": list(self.anchor),
            "period": self.period,
            "multipliers": [[float(m.real), float(m.imag)] for m in self.multipliers],
            "cycle_class": self.cycle_class,
            "stable": self.stable,
            "residual": self.residual,
        }


def _steps_for(period: float, h: float) -> int:
    return max(16, int(math.ceil(period / h)))


def monodromy(anchor, period: float, params: DimensionlessParams, h: float = DEFAULT_DT, n_steps: int | None = None):
    """Flow the variational system for one period.

    Returns (end state, monodromy matrix, integral of tr J).
    """
    n = n_steps if n_steps is not None else _steps_for(period, h)
    w, g, r = params.as_tuple()
    x0 = np.asarray(anchor, dtype=float).reshape(3)
    return _kernels.rk4_variational(x0, w, g, r, period / n, n)


def refine_orbit(
    guess_anchor,
    guess_period: float,
    params: DimensionlessParams,
    tol: float = 1e-10,
    max_iter: int = 60,
    h: float = DEFAULT_DT,
    max_step: float = 0.05,
    classify: bool = True,
) -> PeriodicOrbit:
    """Single-shooting Newton for a fixed point of the return map.

    Unknowns are (p_x, p_z) on the section and the period T; the residual
    is Phi_T(x) - x.  Stability is not required.  Newton steps are capped at
    ``max_step`` in norm, which widens the basin for strongly contracting
    orbits.
    """
    px, pz = float(guess_anchor[0]), float(guess_anchor[2])
    T = float(guess_period)
    if not T > 0:
        raise LeftDomain("period guess must be positive")
    n = _steps_for(T, h)
    e0, e2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    res = math.inf
    for _ in range(max_iter):
        x0 = np.array([px, 0.0, pz])
        xT, M, _ = monodromy(x0, T, params, n_steps=n)
        F = xT - x0
        res = float(np.linalg.norm(F))
        if not np.isfinite(res):
            raise LeftDomain("flow map left the finite domain")
        if res <= tol:
            break
        A = np.column_stack([M[:, 0] - e0, M[:, 2] - e2, rhs(xT, params)])
        try:
            d = np.linalg.solve(A, -F)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence("singular shooting Jacobian") from exc
        size = float(np.linalg.norm(d))
        if size > max_step:
            d *= max_step / size
        px, pz, T = px + d[0], pz + d[1], T + d[2]
        if not (0 < T < 10 * guess_period) or px <= 0 or abs(pz) > 1e3:
            raise LeftDomain(f"iterate left the section domain (px={px:.3g}, T={T:.3g})")
    else:
        raise NoConvergence(f"shooting residual {res:.3g} after {max_iter} iterations")

    anchor = SpinState(px, 0.0, pz)
    xT, M, trace_int = monodromy(anchor, T, params, n_steps=n)
    mult = np.linalg.eigvals(M)
    mult = mult[np.argsort(-np.abs(mult))]
    orbit = PeriodicOrbit(
        anchor=anchor,
        period=T,
        multipliers=mult,
        cycle_class="",
        stable=False,
        residual=float(np.linalg.norm(xT - anchor.as_array())),
        trace_integral=float(trace_int),
        monodromy=M,
    )
    stable = orbit.max_multiplier < 1.0 - EPS_FLOQUET
    cls = orbit_cycle_class(anchor, T, params, h=h) if classify else ""
    return replace(orbit, stable=stable, cycle_class=cls)


def orbits_from_returns(
    traj: Trajectory,
    params: DimensionlessParams,
    n_candidates: int = 15,
    tol: float = 1e-10,
    h: float = DEFAULT_DT,
) -> list[PeriodicOrbit]:
    """Periodic orbits seeded by the closest successive section returns of a
    trajectory, typically one wandering among unstable cycles.

    Converged orbits are de-duplicated by anchor; failed seeds are skipped.
    """
    cr = section_crossings(traj)
    if len(cr) < 2:
        raise TooFewCrossings(f"{len(cr)} section crossings")
    gaps = np.linalg.norm(np.diff(cr.states, axis=0), axis=1)
    found: list[PeriodicOrbit] = []
    for i in np.argsort(gaps)[:n_candidates]:
        try:
            orbit = refine_orbit(cr.states[i], cr.times[i + 1] - cr.times[i], params, tol=tol, h=h)
        except (OrbitError, Divergence):
            continue
        if orbit.residual > 100 * tol:
            continue
        if all(np.linalg.norm(orbit.anchor.as_array() - o.anchor.as_array()) > 1e-6 for o in found):
            found.append(orbit)
    return found


def orbit_cycle_class(anchor, period: float, params: DimensionlessParams, h: float = DEFAULT_DT, n_periods: int = 6) -> str:
    """Peak class of a (possibly unstable) orbit from a few periods of
    integration started on it."""
    n = _steps_for(period, h)
    traj = integrate_fixed(anchor, params, dt=period / n, t_end=n_periods * period)
    counts, _, _ = half_cycle_peak_counts(traj.px, lobes="both")
    if counts.size == 0:
        return "Other(0)"
    # first few lobes are the least contaminated by the instability
    value = Counter(counts[: 2 * max(1, n_periods // 2)].tolist()).most_common(1)[0][0]
    return cycle_class_name(int(value))


def floquet_multipliers(
    orbit: PeriodicOrbit,
    params: DimensionlessParams,
    h: float = DEFAULT_DT,
    check_tol: float = 1e-6,
) -> np.ndarray:
    """Eigenvalues of the monodromy matrix, checked against Abel-Liouville:
    det M = exp(integral of tr J over one period)."""
    if orbit.residual > 1e-8:
        raise ValueError(f"orbit residual {orbit.residual:.3g} too large; refine first")
    _, M, trace_int = monodromy(orbit.anchor, orbit.period, params, h=h)
    det = float(np.linalg.det(M))
    expected = math.exp(trace_int)
    if abs(det - expected) > check_tol * abs(expected):
        raise AbelLiouvilleMismatch(f"det M = {det:.6g}, exp(int tr J) = {expected:.6g}")
    mult = np.linalg.eigvals(M)
    return mult[np.argsort(-np.abs(mult))]


# ---------------------------------------------------------------------------
# Lyapunov exponent

def largest_lyapunov(
    params: DimensionlessParams,
    state0,
    t_total: float = 1000.0,
    renorm_every: float = 1.0,
    dt: float = DEFAULT_DT,
    discard: float = 0.2,
    tangent0=(1.0, 1.0, 1.0),
) -> float:
    """Benettin estimate of the largest Lyapunov exponent (units of 1/T2)."""
    if not (t_total > renorm_every > 0):
        raise ValueError("need t_total > renorm_every > 0")
    block = max(1, int(round(renorm_every / dt)))
    n_blocks = max(2, int(round(t_total / (block * dt))))
    n_discard = min(n_blocks - 1, int(discard * n_blocks))
    w, g, r = params.as_tuple()
    lam, _ = _kernels.benettin(
        np.asarray(state0, dtype=float).reshape(3),
        np.asarray(tangent0, dtype=float),
        w, g, r, float(dt), n_blocks, block, n_discard,
    )
    return float(lam)


# ---------------------------------------------------------------------------
# Attractor detection

@dataclass(frozen=True)
class DetectProtocol:
    dt: float = DEFAULT_DT
    t_transient: float = 200.0
    t_analysis: float = 100.0
    max_doublings: int = 2
    delta_fp: float = DELTA_FP
    delta_per: float = DELTA_PER
    eps_lyap: float = EPS_LYAP
    lyap_time: float = 1000.0
    refine: bool = False


@dataclass(frozen=True)
class AttractorVerdict:
    label: str  # FixedPoint | LimitCycle | Chaotic | Undecided
    evidence: dict
    final_state: np.ndarray = field(repr=False)
    cycle_class: str | None = None
    fixed_point: FixedPointReport | None = None
    orbit: PeriodicOrbit | None = None

    @property
    def phase_label(self) -> str:
        """Phase-diagram name: Normal, Bistable, LC1, LC2, Other(n), Chaotic,
        Undecided."""
        if self.label == "FixedPoint":
            if self.fixed_point is not None and self.fixed_point.kind != "Trivial":
                return "Bistable"
            return "Normal"
        if self.label == "LimitCycle":
            return self.cycle_class or "LimitCycle"
        return self.label

    def to_record(self) -> dict:
        rec = {"label": self.label, "phase": self.phase_label, "evidence": dict(self.evidence)}
        if self.cycle_class:
            rec["cycle_class"] = self.cycle_class
        if self.fixed_point is not None:
            rec["fixed_point"] = self.fixed_point.to_record()
        if self.orbit is not None:
            rec["orbit"] = self.orbit.to_record()
        return rec


def detect_attractor(
    params: DimensionlessParams,
    state0,
    protocol: DetectProtocol = DetectProtocol(),
) -> AttractorVerdict:
    """Integrate past a transient, then call FixedPoint, LimitCycle, Chaotic
    or Undecided.  Undecided cases are re-examined with the transient
    doubled (continuing the same run) up to ``max_doublings`` times."""
    p = protocol
    state = np.asarray(state0, dtype=float).reshape(3)
    elapsed = 0.0
    run = p.t_transient
    evidence: dict = {}
    for attempt in range(p.max_doublings + 1):
        try:
            pre = integrate_fixed(state, params, dt=p.dt, t_end=run, t0=elapsed)
            elapsed = pre.t_end
            traj = integrate_fixed(pre.final_state, params, dt=p.dt, t_end=p.t_analysis, t0=elapsed)
        except Divergence as exc:
            return AttractorVerdict("Undecided", {"diverged_at": exc.time}, exc.partial.final_state)
        elapsed = traj.t_end
        state = traj.final_state
        evidence = {"t_elapsed": elapsed, "attempt": attempt}

        speed = float(np.linalg.norm(rhs(state, params)))
        evidence["terminal_speed"] = speed
        if speed <= p.delta_fp:
            try:
                fp = classify_fixed_point(refine_fixed_point(state, params), params)
            except (NewtonError, ValueError):
                fp = None
            if fp is not None and fp.unstable_dim == 0:
                return AttractorVerdict("FixedPoint", evidence, state, fixed_point=fp)
            # parked on an unstable point: nudge off it and keep going
            state = state + 1e-6 * np.array([1.0, 1.0, 0.0])
            run = p.t_transient * 2**attempt
            continue

        try:
            est = estimate_period(traj, tail_fraction=1.0, delta_per=p.delta_per)
        except TooFewCrossings:
            est = None
        if est is not None:
            evidence.update(period=est.period, return_residual=est.residual)
            amplitude = float(np.ptp(traj.px))
            evidence["amplitude"] = amplitude
            # relative test too: a slowly decaying spiral of tiny amplitude
            # has a tiny absolute return residual
            if est.periodic and est.residual <= p.delta_per * amplitude:
                try:
                    n_peaks = peaks_per_half_cycle(traj)
                    cls = cycle_class_name(n_peaks)
                except Inconsistent:
                    cls = "Other(?)"
                orbit = None
                if p.refine:
                    try:
                        orbit = refine_orbit(est.anchor, est.period, params, h=p.dt)
                    except OrbitError:
                        orbit = None
                return AttractorVerdict("LimitCycle", evidence, state, cycle_class=cls, orbit=orbit)

        lam = largest_lyapunov(params, state, t_total=p.lyap_time, dt=p.dt)
        evidence["lyapunov"] = lam
        if lam > p.eps_lyap and (est is None or not est.periodic):
            return AttractorVerdict("Chaotic", evidence, state)
        run = p.t_transient * 2**attempt
    return AttractorVerdict("Undecided", evidence, state)
