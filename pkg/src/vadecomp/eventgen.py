"""Multi-particle vertex-activity events.

All particles of an event start in one 0.2 mm sub-voxel of the central voxel.
Each is simulated on the 9x9x9 grid, the voxel charges are summed, the event
is shifted by up to one voxel per axis and the outer shell is cropped away,
leaving a 7x7x7 target whose vertex lies in the central 3x3x3 voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import (
    CROP_GRID,
    SIM_GRID,
    GridSpec,
    VoxelImage,
    apply_crosstalk,
    crop,
    poisson_smear,
    shift_image,
    voxelize,
)
from .physics import (
    DEFAULT_CONSTANTS,
    KE_RANGE,
    ParticleKinematics,
    ParticleType,
    PhysicsConstants,
    angles,
    range_from_ke,
    simulate_track,
)
from . import rng as crng

SUBVOXEL = 0.2  # mm
MAX_HADRONS = 6


@dataclass
class DecompositionHypothesis:
    vertex: np.ndarray
    particles: list = field(default_factory=list)

    def __post_init__(self):
        self.vertex = np.asarray(self.vertex, dtype=np.float64).reshape(3)

    def sorted(self) -> "DecompositionHypothesis":
        ps = sorted(self.particles, key=lambda p: -p.ke)
        return DecompositionHypothesis(self.vertex.copy(), ps)

    def to_dict(self) -> dict:
        return {
            "vertex": [float(x) for x in self.vertex],
            "particles": [p.to_dict() for p in self.particles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecompositionHypothesis":
        return cls(d["vertex"], [ParticleKinematics.from_dict(p) for p in d["particles"]])


@dataclass
class EventRecord:
    target: VoxelImage
    muon: ParticleKinematics
    truth: DecompositionHypothesis
    seeds: tuple
    shift: tuple
    hadron_pe: float = 0.0          # sum of hadron-only p.e. in the target frame
    longest_track_mm: float = 0.0   # true length of the longest proton


def event_rng(master_seed: int, event_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(event_index)]))


def isotropic(rng: np.random.Generator) -> tuple[float, float]:
    cos_t = rng.uniform(-1.0, 1.0)
    phi = rng.uniform(0.0, 360.0)
    return float(np.degrees(np.arccos(cos_t))), float(phi)


def hadron_counts(scenario: int, rng: np.random.Generator, n_protons: int | None = None) -> dict:
    """Particle counts per type.  ``n_protons`` fixes the Scenario-1 count."""
    if scenario == 1:
        if n_protons is not None:
            if not 1 <= n_protons <= MAX_HADRONS:
                raise ValueError(f"n_protons must lie in [1, {MAX_HADRONS}]")
            return {ParticleType.PROTON: int(n_protons)}
        return {ParticleType.PROTON: int(rng.integers(1, 6))}
    if scenario == 2:
        while True:
            c = {
                ParticleType.PROTON: int(rng.integers(0, 5)),
                ParticleType.DEUTERIUM: int(rng.integers(0, 2)),
                ParticleType.TRITIUM: int(rng.integers(0, 2)),
            }
            if sum(c.values()) > 0:
                return c
    raise ValueError(f"unknown scenario {scenario!r}")


def sample_scenario(scenario: int, rng: np.random.Generator, spread: bool = False,
                    n_protons: int | None = None):
    """Draw the hadrons and the muon of one event.

    Returns ``(hadrons, muon)``.  All start points share one sub-voxel; by
    default they coincide exactly, with ``spread=True`` each particle gets
    its own uniform point inside the sub-voxel.
    """
    counts = hadron_counts(scenario, rng, n_protons)
    # pick a sub-voxel of the central 10 mm voxel, then a point inside it
    ncell = int(round(SIM_GRID.pitch / SUBVOXEL))
    cell = rng.integers(0, ncell, size=3)
    corner = -0.5 * SIM_GRID.pitch + cell * SUBVOXEL

    common = corner + rng.uniform(0.0, SUBVOXEL, size=3)

    def start():
        return corner + rng.uniform(0.0, SUBVOXEL, size=3) if spread else common.copy()

    hadrons = []
    for ptype in (ParticleType.PROTON, ParticleType.DEUTERIUM, ParticleType.TRITIUM):
        for _ in range(counts.get(ptype, 0)):
            ke = rng.uniform(*KE_RANGE[ptype])
            th, ph = isotropic(rng)
            hadrons.append(ParticleKinematics(ptype, ke, th, ph, start()))
    th, ph = isotropic(rng)
    muon = ParticleKinematics(ParticleType.MUON, rng.uniform(*KE_RANGE[ParticleType.MUON]), th, ph, start())
    return hadrons, muon


# margin so that the 9x9x9 image is an exact cut-out of an unbounded detector
_SIM_MARGIN = 2


def particle_image_sim(kin: ParticleKinematics, consts: PhysicsConstants = DEFAULT_CONSTANTS,
                       grid: GridSpec = SIM_GRID) -> np.ndarray:
    """Calibrated expected p.e. of one particle on the simulation grid."""
    padded = grid.padded(_SIM_MARGIN)
    td = simulate_track(kin, consts, half_extent=padded.half_extent)
    light = voxelize(td, padded, "soft")
    light = apply_crosstalk(light, consts.crosstalk_frac)
    return consts.calib * crop(light.pe, _SIM_MARGIN)


def compose_event(hadrons, muon: ParticleKinematics, rng: np.random.Generator,
                  consts: PhysicsConstants = DEFAULT_CONSTANTS, noise: bool = False,
                  seeds: tuple = (0, 0), shift=None) -> EventRecord:
    """Sum single-particle images, shift by up to one voxel, crop to 7x7x7."""
    if len(hadrons) < 1:
        raise ValueError("an event needs at least one hadron")
    if shift is None:
        shift = tuple(int(s) for s in rng.integers(-1, 2, size=3))
    shift = tuple(int(s) for s in shift)
    margin = (SIM_GRID.n - CROP_GRID.n) // 2
    had = np.zeros((SIM_GRID.n,) * 3)
    for h in hadrons:
        had += particle_image_sim(h, consts)
    mu = particle_image_sim(muon, consts)
    had7 = crop(shift_image(had, shift), margin)
    total7 = crop(shift_image(had + mu, shift), margin)
    target = VoxelImage(CROP_GRID, total7)
    if noise:
        target = VoxelImage(CROP_GRID, poisson_smear(total7, crng.derive_seed(seeds[0], seeds[1], 0x5EED)))
    offset = CROP_GRID.pitch * np.asarray(shift, dtype=np.float64)
    vertex = np.mean([h.start for h in hadrons], axis=0) + offset

    def moved(p):
        return ParticleKinematics(p.ptype, p.ke, p.theta, p.phi, p.start + offset)

    truth = DecompositionHypothesis(vertex, [moved(h) for h in hadrons]).sorted()
    protons = [h for h in hadrons if h.ptype is ParticleType.PROTON]
    longest = max((range_from_ke(h.ptype, h.ke, consts) for h in protons), default=0.0)
    return EventRecord(
        target=target,
        muon=moved(muon),
        truth=truth,
        seeds=tuple(int(s) for s in seeds),
        shift=shift,
        hadron_pe=float(had7.sum()),
        longest_track_mm=float(longest),
    )


def make_event(master_seed: int, event_index: int, scenario: int = 1,
               consts: PhysicsConstants = DEFAULT_CONSTANTS, noise: bool = False,
               spread: bool = False, n_protons: int | None = None) -> EventRecord:
    """Event fully determined by ``(master_seed, event_index)`` and options."""
    rng = event_rng(master_seed, event_index)
    hadrons, muon = sample_scenario(scenario, rng, spread=spread, n_protons=n_protons)
    return compose_event(hadrons, muon, rng, consts, noise=noise, seeds=(master_seed, event_index))


def reangle(p: ParticleKinematics, u) -> ParticleKinematics:
    th, ph = angles(u)
    return ParticleKinematics(p.ptype, p.ke, th, ph, p.start)
