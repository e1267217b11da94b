"""Parametric charged-particle transport in plastic scintillator.

Hadrons follow a Bragg-Kleeman range-energy law ``R = alpha * E**p`` (scaled
for heavier ions), muons lose energy at a constant minimum-ionizing rate.
Tracks are straight lines cut into fixed steps; each step's visible light is
Birks-quenched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class ParticleType(str, Enum):
    MUON = "muon"
    PROTON = "proton"
    DEUTERIUM = "deuterium"
    TRITIUM = "tritium"


HADRONS = (ParticleType.PROTON, ParticleType.DEUTERIUM, ParticleType.TRITIUM)

# (mass number, charge) of the power-law species
ION_AZ = {
    ParticleType.PROTON: (1, 1),
    ParticleType.DEUTERIUM: (2, 1),
    ParticleType.TRITIUM: (3, 1),
}

# generation ranges of kinetic energy, MeV
KE_RANGE = {
    ParticleType.MUON: (300.0, 1000.0),
    ParticleType.PROTON: (5.0, 60.0),
    ParticleType.DEUTERIUM: (10.0, 60.0),
    ParticleType.TRITIUM: (10.0, 60.0),
}


class InvalidParticleType(ValueError):
    pass


def as_ptype(ptype) -> ParticleType:
    try:
        return ParticleType(ptype)
    except ValueError:
        raise InvalidParticleType(f"unknown particle type: {ptype!r}") from None


@dataclass(frozen=True)
class PhysicsConstants:
    """Material and detector constants. Lengths in mm, energies in MeV."""

    birks_kB: float = 0.126
    calib: float = 100.0
    crosstalk_frac: float = 0.03
    bragg_alpha: float = 0.019
    bragg_p: float = 1.8
    muon_dEdx: float = 0.2
    step_len: float = 0.05

    def __post_init__(self):
        if not self.birks_kB > 0:
            raise ValueError("birks_kB must be positive")
        if not self.calib > 0:
            raise ValueError("calib must be positive")
        if not 0 <= self.crosstalk_frac < 1 / 6:
            raise ValueError("crosstalk_frac must lie in [0, 1/6)")
        if not self.bragg_alpha > 0:
            raise ValueError("bragg_alpha must be positive")
        if not self.bragg_p > 1:
            raise ValueError("bragg_p must exceed 1")
        if not self.muon_dEdx > 0:
            raise ValueError("muon_dEdx must be positive")
        if not self.step_len > 0:
            raise ValueError("step_len must be positive")


DEFAULT_CONSTANTS = PhysicsConstants()


def direction(theta: float, phi: float) -> np.ndarray:
    """Unit vector for polar/azimuth angles given in degrees."""
    t = math.radians(theta)
    p = math.radians(phi)
    return np.array([math.sin(t) * math.cos(p), math.sin(t) * math.sin(p), math.cos(t)])


def angles(u) -> tuple[float, float]:
    """Inverse of :func:`direction`; theta in [0, 180], phi in [0, 360)."""
    u = np.asarray(u, dtype=np.float64)
    u = u / np.linalg.norm(u)
    theta = math.degrees(math.atan2(math.hypot(u[0], u[1]), u[2]))
    phi = math.degrees(math.atan2(u[1], u[0])) % 360.0
    if phi >= 360.0:
        phi = 0.0
    return theta, phi


@dataclass
class ParticleKinematics:
    ptype: ParticleType
    ke: float
    theta: float
    phi: float
    start: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.ptype = as_ptype(self.ptype)
        self.ke = float(self.ke)
        self.theta = float(self.theta)
        self.phi = float(self.phi)
        self.start = np.asarray(self.start, dtype=np.float64).reshape(3)

    @property
    def direction(self) -> np.ndarray:
        return direction(self.theta, self.phi)

    def to_dict(self) -> dict:
        return {
            "ptype": self.ptype.value,
            "ke": self.ke,
            "theta": self.theta,
            "phi": self.phi,
            "start": [float(x) for x in self.start],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParticleKinematics":
        return cls(d["ptype"], d["ke"], d["theta"], d["phi"], d.get("start", (0.0, 0.0, 0.0)))


@dataclass
class TrackDeposit:
    """Straight-track segments: midpoints (N, 3) mm, lengths mm, light MeV.

    ``energy`` keeps the unquenched loss per segment for bookkeeping.
    """

    midpoints: np.ndarray
    lengths: np.ndarray
    light: np.ndarray
    energy: np.ndarray

    def __len__(self):
        return len(self.lengths)

    def scaled(self, a: float) -> "TrackDeposit":
        return TrackDeposit(self.midpoints, self.lengths, a * self.light, a * self.energy)

    @staticmethod
    def concat(*tds: "TrackDeposit") -> "TrackDeposit":
        return TrackDeposit(
            np.concatenate([t.midpoints for t in tds]).reshape(-1, 3),
            np.concatenate([t.lengths for t in tds]),
            np.concatenate([t.light for t in tds]),
            np.concatenate([t.energy for t in tds]),
        )


def _range_coeff(ptype: ParticleType, consts: PhysicsConstants) -> float:
    # R_ion(E) = (A / z^2) * alpha * (E / A)^p
    a, z = ION_AZ[ptype]
    return consts.bragg_alpha * a ** (1.0 - consts.bragg_p) / z**2


def range_from_ke(ptype, ke: float, consts: PhysicsConstants = DEFAULT_CONSTANTS) -> float:
    """CSDA range in mm of a particle with kinetic energy ``ke`` MeV."""
    ptype = as_ptype(ptype)
    if not ke > 0:
        raise ValueError("ke must be positive")
    if ptype is ParticleType.MUON:
        return ke / consts.muon_dEdx
    return _range_coeff(ptype, consts) * ke**consts.bragg_p


def ke_from_range(ptype, r, consts: PhysicsConstants = DEFAULT_CONSTANTS):
    """Kinetic energy that leaves exactly residual range ``r``; vectorized."""
    ptype = as_ptype(ptype)
    r = np.maximum(np.asarray(r, dtype=np.float64), 0.0)
    if ptype is ParticleType.MUON:
        return consts.muon_dEdx * r
    return (r / _range_coeff(ptype, consts)) ** (1.0 / consts.bragg_p)


def dedx_at_residual_range(ptype, r: float, consts: PhysicsConstants = DEFAULT_CONSTANTS) -> float:
    """Stopping power in MeV/mm at residual range ``r`` mm."""
    ptype = as_ptype(ptype)
    if not r > 0:
        raise ValueError("residual range must be positive")
    if ptype is ParticleType.MUON:
        return consts.muon_dEdx
    return float(ke_from_range(ptype, r, consts)) / (consts.bragg_p * r)


def birks_quench(dE, dx, kB: float = DEFAULT_CONSTANTS.birks_kB):
    """Birks-quenched light ``dE / (1 + kB dE/dx)``."""
    dE = np.asarray(dE, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    if np.any(dx <= 0):
        raise ValueError("dx must be positive")
    out = dE * dx / (dx + kB * dE)
    return float(out) if out.ndim == 0 else out


def exit_distance(start, u, half_extent: float) -> float:
    """Path length from ``start`` along ``u`` to the faces of a centered cube."""
    start = np.asarray(start, dtype=np.float64)
    t = math.inf
    for a in range(3):
        if abs(start[a]) > half_extent:
            return 0.0
        if u[a] > 1e-12:
            t = min(t, (half_extent - start[a]) / u[a])
        elif u[a] < -1e-12:
            t = min(t, (-half_extent - start[a]) / u[a])
    return t


@dataclass
class Segments:
    """Path-parameterized segments of one track.

    ``mid`` is the distance of each midpoint from the start.  With gradients
    requested, ``dlight_dke`` and ``dmid_dke`` hold derivatives in ke.
    """

    mid: np.ndarray
    length: np.ndarray
    energy: np.ndarray
    light: np.ndarray
    dlight_dke: np.ndarray | None = None
    dmid_dke: np.ndarray | None = None


def track_segments(ptype, ke: float, consts: PhysicsConstants = DEFAULT_CONSTANTS,
                   max_path: float = math.inf, with_grad: bool = False) -> Segments:
    """Cut a track of ``ke`` MeV into ``step_len`` steps, stopping at
    ``max_path`` if that comes before the particle ranges out.

    Step edges sit at whole multiples of ``step_len`` in residual range, so
    the one partial step is the first one, where dE/dx is smallest.  This
    keeps the light pattern Lipschitz in ``ke``.  Step energies come from
    differences of the range-energy relation; a contained track deposits
    exactly ``ke``.
    """
    ptype = as_ptype(ptype)
    R = range_from_ke(ptype, ke, consts)
    ds = consts.step_len
    if not max_path > 0:
        z = np.zeros(0)
        return Segments(z, z, z, z, z if with_grad else None, z if with_grad else None)
    r_end = max(R - max_path, 0.0)        # residual range where the track is cut
    truncated = r_end > 0.0
    k_lo = int(math.floor(r_end / ds))
    k_hi = int(math.ceil(R / ds))
    edges = ds * np.arange(k_lo, k_hi + 1, dtype=np.float64)
    edges[0] = r_end
    edges[-1] = R
    if len(edges) > 2 and edges[1] - edges[0] <= 1e-12 * ds:
        edges = np.delete(edges, 1)
    if len(edges) > 2 and edges[-1] - edges[-2] <= 1e-12 * ds:
        edges = np.delete(edges, -2)
    # walk from the start: residual range decreasing
    r_hi = edges[:0:-1]
    r_lo = edges[-2::-1]
    dx = r_hi - r_lo
    E_hi = ke_from_range(ptype, r_hi, consts)
    E_lo = ke_from_range(ptype, r_lo, consts)
    E_hi[0] = ke
    dE = E_hi - E_lo
    kB = consts.birks_kB
    den = dx + kB * dE
    light = dE * dx / den
    mid = R - 0.5 * (r_hi + r_lo)
    seg = Segments(mid, dx, dE, light)
    if not with_grad or len(dx) == 0:
        if with_grad:
            seg.dlight_dke = np.zeros(0)
            seg.dmid_dke = np.zeros(0)
        return seg

    # derivatives in R, chained through dR/dke
    if ptype is ParticleType.MUON:
        dE_dr_hi = np.full_like(r_hi, consts.muon_dEdx)
        dE_dr_lo = np.full_like(r_lo, consts.muon_dEdx)
        dR_dke = 1.0 / consts.muon_dEdx
    else:
        p = consts.bragg_p
        dE_dr_hi = E_hi / (p * r_hi)
        safe = np.where(r_lo > 0, r_lo, 1.0)
        dE_dr_lo = np.where(r_lo > 0, E_lo / (p * safe), 0.0)
        dR_dke = p * R / ke
    dhi = np.zeros_like(dx)
    dlo = np.zeros_like(dx)
    dhi[0] = 1.0                 # first edge is R itself
    if truncated:
        dlo[-1] = 1.0            # cut point moves with R
    ddE = dE_dr_hi * dhi - dE_dr_lo * dlo
    ddx = dhi - dlo
    dl_dE = dx * dx / (den * den)
    dl_dx = kB * dE * dE / (den * den)
    seg.dlight_dke = (dl_dE * ddE + dl_dx * ddx) * dR_dke
    seg.dmid_dke = (1.0 - 0.5 * (dhi + dlo)) * dR_dke
    return seg


def simulate_track(kin: ParticleKinematics, consts: PhysicsConstants = DEFAULT_CONSTANTS,
                   half_extent: float = 45.0) -> TrackDeposit:
    """Straight-line transport of one particle from ``kin.start``.

    The track is cut where it leaves the cube of half-width ``half_extent``
    centered on the origin (default: the 9x9x9 cm volume).
    """
    u = kin.direction
    t_exit = exit_distance(kin.start, u, half_extent)
    if t_exit <= 0.0:
        z = np.zeros(0)
        return TrackDeposit(np.zeros((0, 3)), z, z, z)
    seg = track_segments(kin.ptype, kin.ke, consts, max_path=t_exit)
    midpoints = kin.start[None, :] + seg.mid[:, None] * u[None, :]
    return TrackDeposit(midpoints, seg.length, seg.light, seg.energy)
