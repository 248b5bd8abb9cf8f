"""Parameter-grid sweeps: dynamical phase diagram and time-crystal map.

Rows of the grid run along the omega axis, columns along g.  Every cell gets
its own seed derived from (master_seed, cell index), so results do not
depend on execution order or on the number of worker processes.  Completed
rows are checkpointed atomically and a restarted sweep resumes from them.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_json
from .ctc import TrialProtocol, classify_ctc, run_trials, transient_diagnostics, AllTrialsFailed
from .equilibria import all_fixed_points, bisect, trivial_fixed_point, unstable_dim_trivial
from .model import DEFAULT_GAMMA_T2, DimensionlessParams
from .orbits import DetectProtocol, detect_attractor

ATTRACTOR_KINDS = ("Normal", "Bistable", "LC1", "LC2", "Chaotic")


def _increasing(name: str, axis) -> tuple[float, ...]:
    a = tuple(float(v) for v in axis)
    if not a:
        raise ValueError(f"{name} must be non-empty")
    if any(not math.isfinite(v) for v in a):
        raise ValueError(f"{name} must be finite")
    if any(b <= a_ for a_, b in zip(a, a[1:])):
        raise ValueError(f"{name} must be strictly increasing")
    return a


@dataclass(frozen=True)
class GridSpec:
    omega_axis: tuple[float, ...]
    g_axis: tuple[float, ...]
    r: float = 1.0
    n_init: int = 3
    master_seed: int = 0
    kick: float = 1e-6
    protocol: DetectProtocol = DetectProtocol()

    def __post_init__(self) -> None:
        object.__setattr__(self, "omega_axis", _increasing("omega_axis", self.omega_axis))
        object.__setattr__(self, "g_axis", _increasing("g_axis", self.g_axis))
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if not self.r > 0:
            raise ValueError("r must be positive")
        if any(w <= 0 for w in self.omega_axis) or any(g < 0 for g in self.g_axis):
            raise ValueError("omega must be positive and g non-negative")

    @classmethod
    def from_field(cls, B0_axis, feedback_axis, gamma_T2: float = DEFAULT_GAMMA_T2, **kw) -> "GridSpec":
        return cls(tuple(gamma_T2 * b for b in B0_axis), tuple(feedback_axis), **kw)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.omega_axis), len(self.g_axis)

    def params(self, i: int, j: int) -> DimensionlessParams:
        return DimensionlessParams(self.omega_axis[i], self.g_axis[j], self.r)

    def cell_index(self, i: int, j: int) -> int:
        return i * len(self.g_axis) + j

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PhaseCell:
    omega: float
    g: float
    labels: tuple[str, ...]
    p0_label: str
    unstable_dim: int
    n_stable_fixed_points: int
    diagnostics: tuple[dict, ...] = field(default=(), repr=False)
    ctc: str | None = None

    @property
    def coexistence(self) -> bool:
        return len(set(self.labels) - {"Undecided"}) > 1

    def to_record(self) -> dict:
        return {
            "omega": self.omega,
            "g": self.g,
            "labels": list(self.labels),
            "p0_label": self.p0_label,
            "unstable_dim": self.unstable_dim,
            "n_stable_fixed_points": self.n_stable_fixed_points,
            "diagnostics": list(self.diagnostics),
            "ctc": self.ctc,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PhaseCell":
        return cls(
            omega=float(rec["omega"]),
            g=float(rec["g"]),
            labels=tuple(rec["labels"]),
            p0_label=rec["p0_label"],
            unstable_dim=int(rec["unstable_dim"]),
            n_stable_fixed_points=int(rec["n_stable_fixed_points"]),
            diagnostics=tuple(rec["diagnostics"]),
            ctc=rec.get("ctc"),
        )


@dataclass(frozen=True)
class PhaseGrid:
    spec: GridSpec
    cells: list[list[PhaseCell]]
    complete: bool = True

    HEADER = ("omega", "g", "p0_label", "labels", "coexistence", "unstable_dim", "n_stable_fp", "ctc")

    def p0_labels(self) -> np.ndarray:
        return np.array([[c.p0_label for c in row] for row in self.cells], dtype=object)

    def column(self, i: int) -> list[PhaseCell]:
        return self.cells[i]

    def rows(self) -> list[tuple]:
        return [
            (c.omega, c.g, c.p0_label, ";".join(c.labels), int(c.coexistence), c.unstable_dim,
             c.n_stable_fixed_points, c.ctc or "")
            for row in self.cells
            for c in row
        ]

    def records(self) -> list[list[dict]]:
        return [[c.to_record() for c in row] for row in self.cells]


# ---------------------------------------------------------------------------
# Cells

def initial_states(params: DimensionlessParams, n_init: int, seed: np.random.SeedSequence, kick: float) -> np.ndarray:
    """P0 plus an isotropic kick, then n_init - 1 states uniform in the box
    |px|, |py| <= 2r, pz in [-r, 2r]."""
    rng = np.random.default_rng(seed)
    r = params.r
    out = np.empty((n_init, 3))
    out[0] = np.asarray(trivial_fixed_point(params)) + kick * r * rng.standard_normal(3)
    if n_init > 1:
        lo = np.array([-2 * r, -2 * r, -r])
        hi = np.array([2 * r, 2 * r, 2 * r])
        out[1:] = rng.uniform(lo, hi, size=(n_init - 1, 3))
    return out


def _diag(verdict) -> dict:
    rec = {"label": verdict.label, "phase": verdict.phase_label}
    rec.update({k: float(v) for k, v in verdict.evidence.items()})
    return rec


def compute_cell(spec: GridSpec, i: int, j: int) -> PhaseCell:
    params = spec.params(i, j)
    seed = np.random.SeedSequence([spec.master_seed, spec.cell_index(i, j)])
    fps = all_fixed_points(params)
    diags = []
    labels = []
    for x0 in initial_states(params, spec.n_init, seed, spec.kick):
        try:
            v = detect_attractor(params, x0, spec.protocol)
            diags.append(_diag(v))
            labels.append(v.phase_label)
        except Exception as exc:  # recorded, never aborts the sweep
            diags.append({"label": "Undecided", "phase": "Undecided", "error": f"{type(exc).__name__}: {exc}"})
            labels.append("Undecided")
    return PhaseCell(
        omega=params.omega,
        g=params.g,
        labels=tuple(sorted(set(labels))),
        p0_label=labels[0],
        unstable_dim=fps[0].unstable_dim,
        n_stable_fixed_points=sum(fp.stable for fp in fps),
        diagnostics=tuple(diags),
    )


def _cell_job(args) -> dict:
    spec, i, j = args
    # normalize through the record so fresh and resumed cells compare equal
    return json.loads(json.dumps(compute_cell(spec, i, j).to_record()))


# ---------------------------------------------------------------------------
# Phase diagram

def _load_checkpoint(path: Path, spec: GridSpec) -> dict[int, list[dict]]:
    if not path.exists():
        return {}
    data = json.loads(path.read_text())
    if data.get("fingerprint") != spec.fingerprint():
        raise ValueError(f"checkpoint {path} belongs to a different grid")
    return {int(k): v for k, v in data["rows"].items()}


def phase_diagram(
    spec: GridSpec,
    workers: int = 1,
    checkpoint: str | Path | None = None,
    max_rows: int | None = None,
) -> PhaseGrid:
    """Classify every cell of the grid.

    With ``checkpoint`` set, finished rows are saved after each row and
    reused on restart.  ``max_rows`` stops after that many newly computed
    rows (the returned grid then has ``complete=False``).
    """
    n_rows, n_cols = spec.shape
    path = Path(checkpoint) if checkpoint is not None else None
    done = _load_checkpoint(path, spec) if path else {}
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    computed = 0
    try:
        for i in range(n_rows):
            if i in done:
                continue
            if max_rows is not None and computed >= max_rows:
                break
            jobs = [(spec, i, j) for j in range(n_cols)]
            row = list(pool.map(_cell_job, jobs)) if pool else [_cell_job(job) for job in jobs]
            done[i] = row
            computed += 1
            if path:
                atomic_write_json(path, {"fingerprint": spec.fingerprint(), "rows": {str(k): v for k, v in sorted(done.items())}})
    finally:
        if pool:
            pool.shutdown()
    complete = len(done) == n_rows
    cells = [[PhaseCell.from_record(rec) for rec in done[i]] for i in sorted(done)]
    return PhaseGrid(spec, cells, complete)


def boundary_refinement(grid: PhaseGrid, factor: int = 4) -> list[PhaseCell]:
    """Extra cells at ``factor``-fold g resolution between neighbouring cells
    whose P0 verdicts differ."""
    spec = grid.spec
    extra = []
    for i, row in enumerate(grid.cells):
        for j in range(len(row) - 1):
            if row[j].p0_label == row[j + 1].p0_label:
                continue
            g_lo, g_hi = row[j].g, row[j + 1].g
            sub = tuple(g_lo + (g_hi - g_lo) * k / factor for k in range(1, factor))
            sub_spec = GridSpec((spec.omega_axis[i],), sub, spec.r, spec.n_init,
                                spec.master_seed + 1 + spec.cell_index(i, j), spec.kick, spec.protocol)
            extra.extend(compute_cell(sub_spec, 0, k) for k in range(len(sub)))
    return extra


# ---------------------------------------------------------------------------
# Time-crystal map

@dataclass(frozen=True)
class CtcGrid:
    spec: GridSpec
    labels: list[list[str]]
    verdicts: dict = field(default_factory=dict, repr=False)

    HEADER = ("omega", "g", "ctc")

    def rows(self) -> list[tuple]:
        return [
            (self.spec.omega_axis[i], self.spec.g_axis[j], lab)
            for i, row in enumerate(self.labels)
            for j, lab in enumerate(row)
        ]


def ctc_cell(params: DimensionlessParams, trial_budget: int, master_seed: int, protocol: TrialProtocol) -> tuple[str, dict]:
    try:
        ens = run_trials(params, trial_budget, master_seed=master_seed, protocol=protocol)
    except AllTrialsFailed as exc:
        return "Undecided", {"error": str(exc)}
    diag = transient_diagnostics(ens) if protocol.profile else None
    verdict = classify_ctc(params, ens, transient_diag=diag)
    return verdict.label, verdict.to_record()


def ctc_map(
    spec: GridSpec,
    trial_budget: int = 20,
    grid: PhaseGrid | None = None,
    protocol: TrialProtocol = TrialProtocol(profile=True),
    workers: int = 1,
) -> CtcGrid:
    """Run the time-crystal classifier on cells whose P0 verdict is an
    oscillation; other cells are labelled NotCTC."""
    if grid is None:
        grid = phase_diagram(spec, workers=workers)
    labels, verdicts = [], {}
    for i, row in enumerate(grid.cells):
        out = []
        for j, cell in enumerate(row):
            if not cell.p0_label.startswith(("LC", "Other")):
                out.append("NotCTC")
                continue
            seed = int(np.random.SeedSequence([spec.master_seed, spec.cell_index(i, j)]).generate_state(1)[0])
            lab, rec = ctc_cell(spec.params(i, j), trial_budget, seed, protocol)
            out.append(lab)
            verdicts[(i, j)] = rec
        labels.append(out)
    return CtcGrid(spec, labels, verdicts)


# ---------------------------------------------------------------------------
# Onset of oscillation

def oscillates(params: DimensionlessParams, kick: float = 1e-4, protocol: DetectProtocol | None = None) -> bool:
    """Simulation verdict: a run kicked off P0 does not relax back to P0.

    Above the first instability of P0 at omega > 1 the run ends on a limit
    cycle (or, at larger g, on another attractor), never on P0 itself.
    """
    protocol = protocol or DetectProtocol(max_doublings=4)
    x0 = np.asarray(trivial_fixed_point(params)) + kick * params.r * np.array([1.0, 0.0, 0.0])
    v = detect_attractor(params, x0, protocol)
    return not (v.label == "FixedPoint" and v.fixed_point.kind == "Trivial")


def oscillation_onset(
    omega: float,
    r: float = 1.0,
    lo: float | None = None,
    hi: float | None = None,
    rel_tol: float = 1e-3,
    protocol: DetectProtocol | None = None,
) -> float:
    """Feedback gain at which oscillation sets in, by bisection on
    ``oscillates`` over [lo, hi] (default [0.5/r, 4/r])."""
    lo = 0.5 / r if lo is None else lo
    hi = 4.0 / r if hi is None else hi
    return bisect(lambda g: oscillates(DimensionlessParams(omega, g, r), protocol=protocol), lo, hi, rel_tol * hi)


def manifold_dimension_scan(omega: float, g_axis, r: float = 1.0) -> np.ndarray:
    return np.array([unstable_dim_trivial(DimensionlessParams(omega, g, r)) for g in g_axis])
