"""Trial ensembles, oscillation phases and time-crystal classification.

A trial starts at the trivial fixed point plus a small isotropic Gaussian
kick and runs until its oscillation is steady.  The phase of each trial is
the argument of the fundamental Fourier coefficient of p_x over an integer
number of periods, referenced to tau = 0 (feedback turn-on).  A time crystal
shows phases spread over the whole circle; a trivial limit cycle reached
through a one-dimensional unstable manifold shows two antipodal clusters.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .equilibria import FixedPointReport, classify_fixed_point, trivial_fixed_point
from .integrate import DEFAULT_DT, Divergence, NoiseSpec, Trajectory, integrate_fixed
from .model import DimensionlessParams
from .orbits import DELTA_PER, half_cycle_peak_counts, section_crossings

ALPHA = 0.05
SETTLE_TOL = 1e-3


class CtcError(RuntimeError):
    pass


class NotPeriodic(CtcError):
    pass


class AllTrialsFailed(CtcError):
    pass


# ---------------------------------------------------------------------------
# Records

@dataclass(frozen=True)
class Epoch:
    label: str  # LC1 | LC2 | mixed
    start: float
    end: float

    @property
    def dwell(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class PhaseSample:
    omega0: float
    amplitude: float
    unit_phase: complex
    transient_time: float = float("nan")
    index: int = -1
    seed: int = -1
    epochs: tuple[Epoch, ...] = ()

    def __post_init__(self) -> None:
        if not self.omega0 > 0:
            raise ValueError("omega0 must be positive")
        if abs(abs(self.unit_phase) - 1.0) > 1e-12:
            raise ValueError("unit_phase must have modulus 1")

    @property
    def phase(self) -> float:
        return math.atan2(self.unit_phase.imag, self.unit_phase.real)

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "re": self.unit_phase.real,
            "im": self.unit_phase.imag,
            "omega0": self.omega0,
            "amplitude": self.amplitude,
            "transient_time": self.transient_time,
            "epochs": ";".join(f"{e.label}:{e.start:.6g}-{e.end:.6g}" for e in self.epochs),
        }


@dataclass(frozen=True)
class TrialFailure:
    index: int
    seed: int
    reason: str


@dataclass(frozen=True)
class TrialEnsemble:
    params: DimensionlessParams
    samples: list[PhaseSample]
    failures: list[TrialFailure]
    master_seed: int
    sigma_init: float

    @property
    def n_trials(self) -> int:
        return len(self.samples) + len(self.failures)

    @property
    def unit_phases(self) -> np.ndarray:
        return np.array([s.unit_phase for s in self.samples])

    @property
    def period(self) -> float:
        return float(np.median([2 * math.pi / s.omega0 for s in self.samples]))


@dataclass(frozen=True)
class CircularStats:
    n: int
    resultant: float
    doubled_resultant: float
    rayleigh_p: float
    kuiper_v: float
    kuiper_p: float
    mean_direction: float

    def uniform(self, alpha: float = ALPHA) -> bool:
        return self.rayleigh_p > alpha and self.kuiper_p > alpha

    def to_record(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class TransientDiagnostics:
    dwell_times: np.ndarray
    leading_lc2: np.ndarray
    period: float

    @property
    def dwell_std(self) -> float:
        return float(np.std(self.dwell_times)) if self.dwell_times.size else 0.0

    @property
    def leading_lc2_fraction(self) -> float:
        return float(np.mean(self.leading_lc2)) if self.leading_lc2.size else 0.0

    @property
    def signature(self) -> bool:
        """Type-II signature: most trials open with an LC2-like epoch, and its
        duration scatters by more than one period between trials."""
        return self.leading_lc2_fraction >= 0.5 and self.dwell_std > self.period

    def to_record(self) -> dict:
        return {
            "dwell_mean": float(np.mean(self.dwell_times)) if self.dwell_times.size else None,
            "dwell_std": self.dwell_std,
            "period": self.period,
            "leading_lc2_fraction": self.leading_lc2_fraction,
            "signature": self.signature,
        }


@dataclass(frozen=True)
class CtcVerdict:
    label: str  # TypeI | TypeII | TrivialLC | NotCTC
    stats: CircularStats | None
    mechanism_evidence: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "label": self.label,
            "stats": self.stats.to_record() if self.stats else None,
            "evidence": self.mechanism_evidence,
        }


# ---------------------------------------------------------------------------
# Phase extraction

def extract_phase(
    traj: Trajectory,
    window_periods: int = 20,
    delta_per: float | None = DELTA_PER,
    max_interval_cv: float = 0.1,
    samples_per_period: int = 128,
) -> PhaseSample:
    """Fundamental complex amplitude of p_x over the last ``window_periods``
    full periods.

    The period is the mean section-return time over the window.  With
    ``delta_per`` set, the return-map residual over the window must not
    exceed it; with ``delta_per=None`` (noisy runs) only the regularity of
    the return times is checked.
    """
    cr = section_crossings(traj)
    if len(cr) < window_periods + 1:
        raise NotPeriodic(f"{len(cr)} section crossings, need {window_periods + 1}")
    times = cr.times[-(window_periods + 1):]
    states = cr.states[-(window_periods + 1):]
    intervals = np.diff(times)
    period = float(np.mean(intervals))
    if delta_per is not None:
        residual = float(np.max(np.linalg.norm(np.diff(states, axis=0), axis=1)))
        if residual > delta_per:
            raise NotPeriodic(f"return residual {residual:.3g} exceeds {delta_per:.3g}")
    elif np.std(intervals) > max_interval_cv * period:
        raise NotPeriodic("irregular return times")

    omega0 = 2 * math.pi / period
    t_end = float(times[-1])
    t_start = t_end - window_periods * period
    k0 = max(0, int(math.floor((t_start - traj.t0) / traj.dt)) - 2)
    k1 = min(len(traj), int(math.ceil((t_end - traj.t0) / traj.dt)) + 3)
    seg_t = traj.t0 + traj.dt * np.arange(k0, k1)
    spline = CubicSpline(seg_t, traj.px[k0:k1])
    n = window_periods * samples_per_period
    grid = t_start + (t_end - t_start) * np.arange(n) / n
    coef = 2.0 / n * np.sum(spline(grid) * np.exp(-1j * omega0 * grid))
    amp = abs(coef)
    if amp == 0:
        raise NotPeriodic("zero fundamental amplitude")
    return PhaseSample(omega0=omega0, amplitude=amp, unit_phase=complex(coef / amp))


def settle_time(traj: Trajectory, tol: float = SETTLE_TOL) -> float:
    """Earliest section crossing after which successive returns stay within
    ``tol`` of each other."""
    cr = section_crossings(traj)
    if len(cr) < 2:
        return float("nan")
    d = np.linalg.norm(np.diff(cr.states, axis=0), axis=1)
    bad = np.nonzero(d > tol)[0]
    return float(cr.times[bad[-1] + 1]) if bad.size else float(cr.times[0])


# ---------------------------------------------------------------------------
# Circular statistics

def kuiper_pvalue(v: float, n: int) -> float:
    """Asymptotic Kuiper tail probability with Stephens' small-n correction."""
    lam = (math.sqrt(n) + 0.155 + 0.24 / math.sqrt(n)) * v
    if lam < 0.4:
        return 1.0
    j = np.arange(1, 101)
    terms = 2.0 * (4.0 * j**2 * lam**2 - 1.0) * np.exp(-2.0 * j**2 * lam**2)
    return float(min(1.0, max(0.0, terms.sum())))


def circular_stats(phases) -> CircularStats:
    """Uniformity statistics of angles (radians) or unit complex numbers."""
    ph = np.asarray(phases)
    angles = np.angle(ph) if np.iscomplexobj(ph) else ph.astype(float)
    n = angles.size
    if n < 2:
        raise ValueError("need at least two phases")
    z1 = np.mean(np.exp(1j * angles))
    R = float(min(1.0, abs(z1)))
    R2 = float(min(1.0, abs(np.mean(np.exp(2j * angles)))))
    rayleigh = math.exp(-n * R * R) * (1.0 + (2.0 * n * R**2 - n * n * R**4) / (4.0 * n))
    u = np.sort(np.mod(angles, 2 * math.pi)) / (2 * math.pi)
    i = np.arange(1, n + 1)
    v = float(np.max(i / n - u) + np.max(u - (i - 1) / n))
    return CircularStats(
        n=n,
        resultant=R,
        doubled_resultant=R2,
        rayleigh_p=float(min(1.0, max(0.0, rayleigh))),
        kuiper_v=v,
        kuiper_p=kuiper_pvalue(v, n),
        mean_direction=float(np.angle(z1)),
    )


# ---------------------------------------------------------------------------
# Transient epochs

def transient_profile(
    traj: Trajectory,
    amplitude: float | None = None,
    prominence: float = 0.05,
    window_lobes: int = 4,
) -> list[Epoch]:
    """Label sliding windows of two periods (four lobes of p_x, advanced one
    lobe at a time) as LC1-like, LC2-like or mixed, and merge runs of equal
    labels into epochs.

    Peaks are counted with a prominence threshold relative to ``amplitude``
    (default: peak-to-peak p_x over the last quarter of the trajectory), so
    low-amplitude growth does not register as LC1.
    """
    x = traj.px
    if amplitude is None:
        amplitude = float(np.ptp(x[-max(2, len(x) // 4):]))
    counts, starts, ends = half_cycle_peak_counts(x, prominence, amplitude, lobes="both")
    if counts.size < window_lobes:
        return [Epoch("mixed", traj.t0, traj.t_end)]
    labels, centers = [], []
    half = window_lobes // 2
    for k in range(counts.size - window_lobes + 1):
        w = counts[k : k + window_lobes]
        n2 = int(np.sum(w == 2))
        n1 = int(np.sum(w == 1))
        if 2 * n2 >= window_lobes:
            labels.append("LC2")
        elif 2 * n1 > window_lobes:
            labels.append("LC1")
        else:
            labels.append("mixed")
        centers.append(traj.t0 + traj.dt * starts[k + half])
    epochs: list[Epoch] = []
    start = traj.t0
    for k in range(1, len(labels)):
        if labels[k] != labels[k - 1]:
            boundary = 0.5 * (centers[k - 1] + centers[k])
            epochs.append(Epoch(labels[k - 1], start, boundary))
            start = boundary
    epochs.append(Epoch(labels[-1], start, traj.t_end))
    return epochs


def irregular_dwell(epochs: list[Epoch], period: float) -> tuple[float, bool]:
    """Duration before the final LC1-like epoch, and whether the first epoch
    lasting at least one period is LC2-like."""
    if not epochs:
        return 0.0, False
    settle = epochs[-1].start if epochs[-1].label == "LC1" else epochs[-1].end
    leading = next((e for e in epochs if e.dwell >= period), epochs[0])
    return settle - epochs[0].start, leading.label == "LC2"


def transient_diagnostics(ensemble: TrialEnsemble) -> TransientDiagnostics:
    if not ensemble.samples:
        return TransientDiagnostics(np.empty(0), np.empty(0, dtype=bool), float("nan"))
    period = ensemble.period
    dwell, lead = [], []
    for s in ensemble.samples:
        d, lc2 = irregular_dwell(list(s.epochs), period)
        dwell.append(d)
        lead.append(lc2)
    return TransientDiagnostics(np.array(dwell), np.array(lead, dtype=bool), period)


# ---------------------------------------------------------------------------
# Trials

def trial_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(index)])


@dataclass(frozen=True)
class TrialProtocol:
    horizon: float = 400.0
    max_horizon: float = 6400.0
    dt: float = DEFAULT_DT
    stride: int = 5
    window_periods: int = 20
    delta_per: float | None = DELTA_PER
    profile: bool = False


def _trial_start(params: DimensionlessParams, sigma_init: float, seq: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.default_rng(seq.spawn(1)[0])
    return np.asarray(trivial_fixed_point(params), dtype=float) + sigma_init * rng.standard_normal(3)


def simulate_trial(
    params: DimensionlessParams,
    index: int,
    master_seed: int,
    sigma_init: float,
    noise: NoiseSpec | None = None,
    protocol: TrialProtocol = TrialProtocol(),
    flip: bool = False,
) -> Trajectory:
    """Trajectory of one trial.  Noise-free runs are extended (doubling the
    horizon) until the tail is periodic or ``max_horizon`` is reached.
    ``flip`` negates the (p_x, p_y) part of the kick."""
    seq = trial_seed(master_seed, index)
    x0 = _trial_start(params, sigma_init, seq)
    if flip:
        x0[:2] = -x0[:2]
    if noise is not None:
        noise = NoiseSpec(noise.eta, noise.cutoff, int(seq.generate_state(1)[0]))
    p = protocol
    traj = integrate_fixed(x0, params, dt=p.dt, t_end=p.horizon, noise=noise, stride=p.stride)
    if noise is not None and noise.eta > 0:
        return traj
    parts = [traj.samples]
    while traj.t_end < p.max_horizon and not _tail_periodic(traj, p):
        more = integrate_fixed(
            traj.final_state, params, dt=p.dt, t_end=traj.t_end - traj.t0, stride=p.stride, t0=traj.t_end
        )
        parts.append(more.samples[1:])
        traj = Trajectory(traj.t0, traj.dt, np.concatenate(parts))
        parts = [traj.samples]
    return traj


def _tail_periodic(traj: Trajectory, p: TrialProtocol) -> bool:
    try:
        extract_phase(traj, p.window_periods, p.delta_per if p.delta_per is not None else DELTA_PER)
    except NotPeriodic:
        return False
    return True


def _run_one(args):
    params, index, master_seed, sigma_init, noise, protocol = args
    seed = int(trial_seed(master_seed, index).generate_state(1)[0])
    try:
        traj = simulate_trial(params, index, master_seed, sigma_init, noise, protocol)
        ps = extract_phase(traj, protocol.window_periods, protocol.delta_per)
    except (NotPeriodic, Divergence) as exc:
        return TrialFailure(index, seed, f"{type(exc).__name__}: {exc}")
    epochs: tuple[Epoch, ...] = ()
    if protocol.profile:
        epochs = tuple(transient_profile(traj))
    return PhaseSample(
        omega0=ps.omega0,
        amplitude=ps.amplitude,
        unit_phase=ps.unit_phase,
        transient_time=settle_time(traj),
        index=index,
        seed=seed,
        epochs=epochs,
    )


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def run_trials(
    params: DimensionlessParams,
    n_trials: int,
    sigma_init: float | None = None,
    noise: NoiseSpec | None = None,
    master_seed: int = 0,
    protocol: TrialProtocol = TrialProtocol(),
    workers: int = 1,
) -> TrialEnsemble:
    """Repeat the turn-on experiment ``n_trials`` times.

    Trials that never reach a steady oscillation are reported as failures.
    Raises AllTrialsFailed if none succeeds.
    """
    if n_trials < 2:
        raise ValueError("need at least two trials")
    if sigma_init is None:
        sigma_init = 1e-6 * params.r
    if sigma_init < 0:
        raise ValueError("sigma_init must be non-negative")
    jobs = [(params, i, master_seed, sigma_init, noise, protocol) for i in range(n_trials)]
    results = _map(_run_one, jobs, workers)
    samples = [r for r in results if isinstance(r, PhaseSample)]
    failures = [r for r in results if isinstance(r, TrialFailure)]
    if not samples:
        raise AllTrialsFailed(f"all {n_trials} trials failed; first: {failures[0].reason}")
    return TrialEnsemble(params, samples, failures, master_seed, sigma_init)


# ---------------------------------------------------------------------------
# Classification

def classify_ctc(
    params: DimensionlessParams,
    trial_results: TrialEnsemble | None,
    fp_report: FixedPointReport | None = None,
    transient_diag: TransientDiagnostics | None = None,
    alpha: float = ALPHA,
) -> CtcVerdict:
    if trial_results is None or len(trial_results.samples) < 2:
        return CtcVerdict("NotCTC", None, {"reason": "no steady oscillation"})
    if fp_report is None:
        fp_report = classify_fixed_point(trivial_fixed_point(params), params)
    stats = circular_stats(trial_results.unit_phases)
    evidence = {"unstable_dim": fp_report.unstable_dim, "failures": len(trial_results.failures)}
    if transient_diag is not None:
        evidence["transient"] = transient_diag.to_record()
    if stats.uniform(alpha):
        if fp_report.unstable_dim == 2:
            return CtcVerdict("TypeI", stats, evidence)
        if transient_diag is not None and transient_diag.signature:
            return CtcVerdict("TypeII", stats, evidence)
    elif stats.doubled_resultant >= 0.5:
        return CtcVerdict("TrivialLC", stats, evidence)
    return CtcVerdict("NotCTC", stats, evidence)


# ---------------------------------------------------------------------------
# Noise robustness

@dataclass(frozen=True)
class NoiseCell:
    cutoff: float
    eta: float
    mean_frequency: float
    std_frequency: float
    mean_amplitude: float
    n_ok: int
    n_lost: int
    rel_shift: float = float("nan")
    amplitude_ratio: float = float("nan")

    @property
    def periodic(self) -> bool:
        return self.n_ok > 0


@dataclass(frozen=True)
class NoiseTable:
    params: DimensionlessParams
    baseline: NoiseCell
    cells: list[NoiseCell]

    def cell(self, cutoff: float, eta: float) -> NoiseCell:
        for c in self.cells:
            if math.isclose(c.cutoff, cutoff) and math.isclose(c.eta, eta):
                return c
        raise KeyError((cutoff, eta))

    def rows(self) -> list[tuple]:
        out = []
        for c in [self.baseline, *self.cells]:
            out.append((c.cutoff, c.eta, c.mean_frequency, c.std_frequency, c.mean_amplitude,
                        c.rel_shift, c.amplitude_ratio, c.n_ok, c.n_lost))
        return out

    HEADER = ("cutoff", "eta", "mean_frequency", "std_frequency", "mean_amplitude",
              "rel_shift", "amplitude_ratio", "n_ok", "n_lost")


def _noise_cell(params, cutoff, eta, n_trials, master_seed, sigma_init, protocol, workers, baseline=None):
    noise = None if eta == 0 else NoiseSpec(eta, cutoff)
    proto = protocol if eta == 0 else TrialProtocol(
        horizon=protocol.horizon, max_horizon=protocol.horizon, dt=protocol.dt,
        stride=protocol.stride, window_periods=protocol.window_periods, delta_per=None,
    )
    jobs = [(params, i, master_seed, sigma_init, noise, proto) for i in range(n_trials)]
    results = _map(_run_one, jobs, workers)
    ok = [r for r in results if isinstance(r, PhaseSample)]
    freq = np.array([s.omega0 / (2 * math.pi) for s in ok])
    amp = np.array([s.amplitude for s in ok])
    mf = float(freq.mean()) if ok else float("nan")
    ma = float(amp.mean()) if ok else float("nan")
    cell = NoiseCell(cutoff, eta, mf, float(freq.std()) if ok else float("nan"), ma, len(ok), len(results) - len(ok))
    if baseline is not None and ok:
        cell = NoiseCell(*list(cell.__dict__.values())[:7],
                         rel_shift=(mf - baseline.mean_frequency) / baseline.mean_frequency,
                         amplitude_ratio=ma / baseline.mean_amplitude)
    return cell


def noise_robustness(
    params: DimensionlessParams,
    bandwidths,
    intensities,
    n_trials: int = 10,
    master_seed: int = 0,
    sigma_init: float | None = None,
    protocol: TrialProtocol = TrialProtocol(),
    workers: int = 1,
) -> NoiseTable:
    """Frequency and amplitude of the steady oscillation under OU pump noise
    on a (bandwidth, intensity) grid, plus the noise-free baseline."""
    if any(not 0 <= eta < 1 for eta in intensities):
        raise ValueError("intensities must lie in [0, 1)")
    if sigma_init is None:
        sigma_init = 1e-6 * params.r
    base = _noise_cell(params, float("nan"), 0.0, n_trials, master_seed, sigma_init, protocol, workers)
    base = NoiseCell(*list(base.__dict__.values())[:7], rel_shift=0.0, amplitude_ratio=1.0)
    cells = []
    for fc in bandwidths:
        for eta in intensities:
            if eta == 0:
                cells.append(NoiseCell(float(fc), 0.0, *list(base.__dict__.values())[2:]))
                continue
            cells.append(_noise_cell(params, float(fc), float(eta), n_trials, master_seed, sigma_init,
                                     protocol, workers, baseline=base))
    return NoiseTable(params, base, cells)
