"""Evaluation: baseline visible energy, rank matching and summary tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .eventgen import DecompositionHypothesis
from .physics import DEFAULT_CONSTANTS, HADRONS, ParticleKinematics, ParticleType, range_from_ke

# values given to the missing side of an unmatched pair
DEFAULT_KE = 0.0
DEFAULT_THETA = 90.0
DEFAULT_PHI = 180.0

LENGTH_BINS = (0.0, 2.0, 5.0, 10.0, 20.0, 40.0)    # mm, true track length


class UnphysicalRegime(ValueError):
    """The single-track quenching correction has a non-positive denominator."""


@dataclass(frozen=True)
class BaselineInputs:
    e_loss_pe: float
    delta_x: float
    c_cali: float = DEFAULT_CONSTANTS.calib
    c_b: float = DEFAULT_CONSTANTS.birks_kB

    def __post_init__(self):
        if not self.e_loss_pe >= 0:
            raise ValueError("e_loss_pe must be non-negative")
        if not self.delta_x > 0:
            raise ValueError("delta_x must be positive")


def standard_vise(b: BaselineInputs) -> float:
    """Visible energy assuming one proton of length ``delta_x`` carries it all.

    ``e / (1 - c_b * e / delta_x)`` with ``e = e_loss_pe / c_cali``.
    """
    e = b.e_loss_pe / b.c_cali
    den = 1.0 - b.c_b * e / b.delta_x
    if not den > 0:
        raise UnphysicalRegime(f"quenching denominator {den:.4g} <= 0 (e={e:.4g} MeV, dx={b.delta_x:.4g} mm)")
    return e / den


def image_track_length(pe: np.ndarray, grid, vertex, threshold_pe: float = 50.0) -> float:
    """Largest vertex-to-voxel-center distance among voxels above threshold.

    A reconstruction-only stand-in for the true longest-proton length; the
    muon should be subtracted from ``pe`` first.
    """
    c = grid.centers().reshape(-1, 3)
    lit = np.asarray(pe).reshape(-1) >= threshold_pe
    if not lit.any():
        return 0.5 * grid.pitch
    d = np.linalg.norm(c[lit] - np.asarray(vertex), axis=1)
    return float(max(d.max(), 0.5 * grid.pitch))


# ---------------------------------------------------------------- matching

@dataclass
class ParticlePair:
    kind: str                       # "match", "fp" or "fn"
    truth: ParticleKinematics
    reco: ParticleKinematics
    truth_length: float = 0.0       # mm; 0 for false positives

    @property
    def d_ke(self) -> float:
        return self.reco.ke - self.truth.ke

    @property
    def d_theta(self) -> float:
        return self.reco.theta - self.truth.theta

    @property
    def d_phi(self) -> float:
        return (self.reco.phi - self.truth.phi + 180.0) % 360.0 - 180.0


def _default(ptype, start) -> ParticleKinematics:
    return ParticleKinematics(ptype, DEFAULT_KE, DEFAULT_THETA, DEFAULT_PHI, start)


def _length(p, consts):
    return range_from_ke(p.ptype, p.ke, consts) if p.ke > 0 else 0.0


def match_and_score(truth: DecompositionHypothesis, reco: DecompositionHypothesis,
                    consts=DEFAULT_CONSTANTS) -> list[ParticlePair]:
    """Pair KE-sorted lists by rank; leftovers become FP or FN pairs."""
    t = sorted(truth.particles, key=lambda p: -p.ke)
    r = sorted(reco.particles, key=lambda p: -p.ke)
    pairs = []
    for i in range(max(len(t), len(r))):
        if i < len(t) and i < len(r):
            pairs.append(ParticlePair("match", t[i], r[i], _length(t[i], consts)))
        elif i < len(t):
            pairs.append(ParticlePair("fn", t[i], _default(t[i].ptype, reco.vertex), _length(t[i], consts)))
        else:
            pairs.append(ParticlePair("fp", _default(r[i].ptype, truth.vertex), r[i], 0.0))
    return pairs


@dataclass
class EventScore:
    event_id: int
    n_true: int
    n_reco: int
    pairs: list
    vertex_distance: float
    vise_true: float
    vise_fit: float
    vise_std: float | None          # None when the baseline is unphysical
    muon_ke: float = 0.0

    @property
    def n_fp(self) -> int:
        return sum(p.kind == "fp" for p in self.pairs)

    @property
    def n_fn(self) -> int:
        return sum(p.kind == "fn" for p in self.pairs)


def score_event(event_id: int, truth: DecompositionHypothesis, reco: DecompositionHypothesis,
                e_loss_pe: float, delta_x: float, muon_ke: float = 0.0,
                consts=DEFAULT_CONSTANTS) -> EventScore:
    """Score one reconstruction, including the single-track baseline."""
    pairs = match_and_score(truth, reco, consts)
    try:
        std = standard_vise(BaselineInputs(e_loss_pe, delta_x, consts.calib, consts.birks_kB))
    except UnphysicalRegime:
        std = None
    return EventScore(
        event_id=event_id,
        n_true=len(truth.particles),
        n_reco=len(reco.particles),
        pairs=pairs,
        vertex_distance=float(np.linalg.norm(np.asarray(reco.vertex) - np.asarray(truth.vertex))),
        vise_true=float(sum(p.ke for p in truth.particles)),
        vise_fit=float(sum(p.ke for p in reco.particles)),
        vise_std=std,
        muon_ke=muon_ke,
    )


# ---------------------------------------------------------------- summary

def _rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x))) if x.size else math.nan


def _normalize(m, axis):
    s = m.sum(axis=axis, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, m / np.where(s > 0, s, 1), 0.0)


@dataclass
class MetricsReport:
    n_events: int
    confusion: np.ndarray                 # rows: reco multiplicity, columns: true multiplicity
    accuracy: float
    accuracy_pm1: float
    ke_residuals: dict                    # multiplicity -> {"all": [...], "matched": [...]}
    angle_table: list                     # rows of (bin_lo, bin_hi, n, theta_rms, phi_rms)
    vertex_quartiles: dict                # multiplicity -> (q25, q50, q75)
    vise_table: list                      # visible-energy comparison, one row per true multiplicity
    pid_confusion: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=int))
    n_baseline_excluded: int = 0

    @property
    def recall(self) -> np.ndarray:
        return _normalize(self.confusion, 0)

    @property
    def precision(self) -> np.ndarray:
        return _normalize(self.confusion, 1)

    def to_dict(self) -> dict:
        return {
            "n_events": self.n_events,
            "confusion": self.confusion.tolist(),
            "recall": self.recall.tolist(),
            "precision": self.precision.tolist(),
            "accuracy": self.accuracy,
            "accuracy_pm1": self.accuracy_pm1,
            "ke_rms": {str(k): {kk: _rms(vv) for kk, vv in v.items()} for k, v in self.ke_residuals.items()},
            "angle_table": self.angle_table,
            "vertex_quartiles": {str(k): list(v) for k, v in self.vertex_quartiles.items()},
            "vise_table": self.vise_table,
            "pid_confusion": self.pid_confusion.tolist(),
            "n_baseline_excluded": self.n_baseline_excluded,
        }


def summarize(events: list[EventScore]) -> MetricsReport:
    if not events:
        raise ValueError("no events to summarize")
    size = max(max(e.n_true for e in events), max(e.n_reco for e in events)) + 1
    conf = np.zeros((size, size), dtype=int)
    for e in events:
        conf[e.n_reco, e.n_true] += 1
    acc = float(np.mean([e.n_reco == e.n_true for e in events]))
    acc1 = float(np.mean([abs(e.n_reco - e.n_true) <= 1 for e in events]))

    ke = {}
    vq = {}
    for k in sorted({e.n_true for e in events}):
        sel = [e for e in events if e.n_true == k]
        ke[k] = {
            "all": [p.d_ke for e in sel for p in e.pairs],
            "matched": [p.d_ke for e in sel for p in e.pairs if p.kind == "match"],
        }
        vq[k] = tuple(float(q) for q in np.percentile([e.vertex_distance for e in sel], [25, 50, 75]))

    angle_rows = []
    matched = [p for e in events for p in e.pairs if p.kind == "match"]
    for lo, hi in zip(LENGTH_BINS[:-1], LENGTH_BINS[1:]):
        b = [p for p in matched if lo <= p.truth_length < hi]
        angle_rows.append((lo, hi, len(b), _rms([p.d_theta for p in b]), _rms([p.d_phi for p in b])))

    pid = np.zeros((3, 3), dtype=int)
    for p in matched:
        if p.truth.ptype in HADRONS and p.reco.ptype in HADRONS:
            pid[HADRONS.index(p.truth.ptype), HADRONS.index(p.reco.ptype)] += 1

    return MetricsReport(
        n_events=len(events),
        confusion=conf,
        accuracy=acc,
        accuracy_pm1=acc1,
        ke_residuals=ke,
        angle_table=angle_rows,
        vertex_quartiles=vq,
        vise_table=vise_table(events),
        pid_confusion=pid,
        n_baseline_excluded=sum(e.vise_std is None for e in events),
    )


def vise_table(events: list[EventScore]) -> list[dict]:
    """Visible-energy comparison rows per true multiplicity.

    Resolutions are ``(true - reco) / true``.  The whole-event variant adds
    the muon's true kinetic energy to the denominator, which is the same
    as adding it to both the true and the reconstructed energy.  Events
    where the baseline is unphysical count in ``events`` but are excluded
    from every baseline-vs-fit column so both sides use the same events.
    """
    rows = []
    for k in sorted({e.n_true for e in events}):
        sel = [e for e in events if e.n_true == k]
        ok = [e for e in sel if e.vise_std is not None]
        t = np.array([e.vise_true for e in ok])
        f = np.array([e.vise_fit for e in ok])
        s = np.array([e.vise_std for e in ok], dtype=np.float64)
        mu = np.array([e.muon_ke for e in ok])
        rows.append({
            "multiplicity": k,
            "events": len(sel),
            "reco_protons_pct": 100.0 * float(np.mean([e.n_reco == e.n_true for e in sel])),
            "rmse_std": _rms(s - t),
            "rmse_fit": _rms(f - t),
            "res_va_std": _rms((t - s) / t) if len(ok) else math.nan,
            "res_va_fit": _rms((t - f) / t) if len(ok) else math.nan,
            "res_event_std": _rms((t - s) / (t + mu)) if len(ok) else math.nan,
            "res_event_fit": _rms((t - f) / (t + mu)) if len(ok) else math.nan,
        })
    return rows


# ---------------------------------------------------------------- CSV

def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def csv_tables(report: MetricsReport) -> dict[str, str]:
    """Named CSV documents mirroring the summary figures and table."""
    n = report.confusion.shape[0]
    out = {}
    out["multiplicity_confusion.csv"] = _csv(
        [[r] + report.confusion[r].tolist() for r in range(n)],
        ["reco\\true"] + [str(c) for c in range(n)])
    out["multiplicity_recall.csv"] = _csv(
        [[r] + [float(x) for x in report.recall[r]] for r in range(n)],
        ["reco\\true"] + [str(c) for c in range(n)])
    out["multiplicity_precision.csv"] = _csv(
        [[r] + [float(x) for x in report.precision[r]] for r in range(n)],
        ["reco\\true"] + [str(c) for c in range(n)])
    out["ke_residuals.csv"] = _csv(
        [[k, kind, float(x)] for k, d in report.ke_residuals.items() for kind, xs in d.items() for x in xs],
        ["multiplicity", "set", "d_ke_mev"])
    out["angle_vs_length.csv"] = _csv(
        [[float(a), float(b), n_, float(t), float(p)] for a, b, n_, t, p in report.angle_table],
        ["length_lo_mm", "length_hi_mm", "pairs", "theta_rms_deg", "phi_rms_deg"])
    out["vertex_quartiles.csv"] = _csv(
        [[k, *[float(q) for q in v]] for k, v in report.vertex_quartiles.items()],
        ["multiplicity", "q25_mm", "q50_mm", "q75_mm"])
    cols = ["multiplicity", "events", "reco_protons_pct", "rmse_std", "rmse_fit",
            "res_va_std", "res_va_fit", "res_event_std", "res_event_fit"]
    out["vise_table.csv"] = _csv([[r[c] for c in cols] for r in report.vise_table], cols)
    out["pid_confusion.csv"] = _csv(
        [[t.value] + report.pid_confusion[i].tolist() for i, t in enumerate(HADRONS)],
        ["true\\reco"] + [t.value for t in HADRONS])
    return out


__all__ = [
    "BaselineInputs",
    "EventScore",
    "MetricsReport",
    "ParticlePair",
    "ParticleType",
    "UnphysicalRegime",
    "csv_tables",
    "image_track_length",
    "match_and_score",
    "score_event",
    "standard_vise",
    "summarize",
    "vise_table",
]
