"""Peeling seeder: vertex estimate, then greedy matched subtraction.

Each pass scans a fixed grid of directions from the vertex, takes the ray
whose one-voxel-radius cylinder holds the most residual charge, sizes a
single-particle template to that charge by bisection on kinetic energy, and
subtracts the template.  Passes stop once the residual falls below a charge
threshold.  Candidates come out sorted by kinetic energy, highest first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .eventgen import DecompositionHypothesis
from .fitter import polish
from .forward import ForwardModel, neg2_log_likelihood_grad
from .imaging import VoxelImage
from .physics import (
    DEFAULT_CONSTANTS,
    HADRONS,
    KE_RANGE,
    ParticleKinematics,
    ParticleType,
    PhysicsConstants,
    angles,
    range_from_ke,
)

N_POLAR = 16
N_AZIMUTH = 32
STOP_THRESHOLD_PE = 150.0
BISECT_ITERS = 40
REFINE_ITERS = 200
RESTARTS = 4
VERTEX_STEP = 3.0     # mm a single refit may move the vertex


@dataclass
class VertexEstimate:
    position: np.ndarray
    low_confidence: bool = False


@dataclass
class SeedResult:
    vertex: np.ndarray
    particles: list = field(default_factory=list)    # ParticleKinematics
    type_probs: list = field(default_factory=list)   # dict ptype -> prob, per particle
    residual_pe: float = 0.0
    low_confidence: bool = False

    def hypothesis(self) -> DecompositionHypothesis:
        return DecompositionHypothesis(self.vertex.copy(), list(self.particles))


def direction_grid(n_polar: int = N_POLAR, n_azimuth: int = N_AZIMUTH) -> np.ndarray:
    th = np.radians((np.arange(n_polar) + 0.5) * 180.0 / n_polar)
    ph = np.radians(np.arange(n_azimuth) * 360.0 / n_azimuth)
    T, P = np.meshgrid(th, ph, indexing="ij")
    return np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)


def _central_box(grid) -> float:
    return 1.5 * grid.pitch


def _centroid(res: np.ndarray, grid, peak) -> np.ndarray:
    n = grid.n
    lo = [max(0, p - 1) for p in peak]
    hi = [min(n, p + 2) for p in peak]
    w = res[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    c = grid.centers()[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    return (w[..., None] * c).sum(axis=(0, 1, 2)) / w.sum()


def estimate_vertex(target: VoxelImage, muon: ParticleKinematics | None,
                    consts: PhysicsConstants = DEFAULT_CONSTANTS, model: ForwardModel | None = None,
                    iterations: int = 3) -> VertexEstimate:
    """Vertex from the charge-weighted centroid around the residual peak.

    The muon image depends on the vertex, so the estimate is iterated from
    the brightest voxel of the central region.
    """
    grid = target.grid
    pe = target.pe
    if not pe.sum() > 0:
        raise ValueError("empty target image")
    model = model or ForwardModel(muon, consts, grid)
    box = _central_box(grid)
    centers = grid.centers()
    inner = np.all(np.abs(centers) <= box + 1e-9, axis=-1)
    v = centers[np.unravel_index(np.argmax(np.where(inner, pe, -1.0)), pe.shape)]
    for _ in range(iterations):
        res = np.maximum(pe - model.muon_image(v), 0.0) if muon is not None else pe
        if not res.sum() > 1e-9 * pe.sum():
            return VertexEstimate(_muon_origin(pe, grid, muon, box), True)
        peak = np.unravel_index(np.argmax(res), res.shape)
        v = np.clip(_centroid(res, grid, peak), -box, box)
    return VertexEstimate(v, False)


def _muon_origin(pe, grid, muon, box):
    # earliest lit point along the muon line through the charge centroid
    c = grid.centers().reshape(-1, 3)
    w = pe.reshape(-1)
    lit = w > 0
    centroid = (w[:, None] * c).sum(axis=0) / w.sum()
    u = muon.direction if muon is not None else np.zeros(3)
    t = (c[lit] - centroid) @ u
    return np.clip(centroid + u * t.min(), -box, box)


class _Peeler:
    def __init__(self, target, muon, consts, model=None):
        self.grid = target.grid
        self.consts = consts
        self.model = model or ForwardModel(muon, consts, self.grid)
        self.dirs = direction_grid()

    def cylinders(self, v, length):
        c = self.grid.centers().reshape(-1, 3) - v
        t = c @ self.dirs.T
        d2 = np.sum(c * c, axis=1)[:, None] - t * t
        p = self.grid.pitch
        return (d2 <= p * p + 1e-9) & (t >= -0.5 * p) & (t <= length)

    def template(self, v, ptype, ke, u):
        return self.model.expectation(v, [ptype], [ke], [u], include_muon=False).reshape(-1)

    def fit_ke(self, v, ptype, u, cyl, obs_in_cyl):
        """Bisection for the ke whose template charge in ``cyl`` matches."""
        lo, hi = KE_RANGE[ptype]

        def charge(ke):
            return self.template(v, ptype, ke, u)[cyl].sum()

        if charge(lo) > obs_in_cyl:
            return None
        if charge(hi) <= obs_in_cyl:
            return hi
        for _ in range(BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            if charge(mid) > obs_in_cyl:
                hi = mid
            else:
                lo = mid
        return 0.5 * (lo + hi)


def classify_type(peeler: _Peeler, v, u, cyl, residual_flat, ptypes=HADRONS):
    """Type probabilities from cylinder-restricted likelihoods.

    Returns ``(probs, kes)``; types that cannot bracket the charge get
    probability 0.
    """
    obs = residual_flat[cyl]
    ells = {}
    kes = {}
    for t in ptypes:
        ke = peeler.fit_ke(v, t, u, cyl, obs.sum())
        if ke is None:
            continue
        exp = peeler.template(v, t, ke, u)[cyl]
        ells[t] = neg2_log_likelihood_grad(obs, exp)[0]
        kes[t] = ke
    return type_probabilities(ells, ptypes), kes


def type_probabilities(ells: dict, ptypes=HADRONS) -> dict:
    """Normalized ``exp(-(l_t - min l) / 2)`` over the given -2lnL values."""
    if not ells:
        return {t: 1.0 / len(ptypes) for t in ptypes}
    m = min(ells.values())
    w = {t: np.exp(-(ells[t] - m) / 2.0) if t in ells else 0.0 for t in ptypes}
    s = sum(w.values())
    return {t: float(w[t] / s) for t in ptypes}


def _excess(obs, model, allowance):
    """Charge above the model, ignoring ``allowance`` Poisson sigmas."""
    return np.maximum(obs - model - allowance * np.sqrt(np.maximum(model, 0.0)), 0.0)


def _refit(peeler, target, v, found, box, min_pe, allowance):
    """Joint polish of vertex and candidates; drops candidates that end up
    carrying less than ``min_pe``.  Returns ``(vertex, found, residual)``."""
    hyp = DecompositionHypothesis(v, [f[0] for f in found])
    hyp, _ = polish(peeler.model, hyp, target.pe, maxiter=REFINE_ITERS, vertex_box=box,
                    ke_max={t: KE_RANGE[t][1] for t in HADRONS}, vertex_step=VERTEX_STEP)
    v = hyp.vertex
    kept, images = [], []
    for p, f in zip(hyp.particles, found):
        img = peeler.template(v, p.ptype, p.ke, p.direction)
        if img.sum() >= min_pe:
            kept.append((p, f[1]))
            images.append(img)
    model = peeler.model.muon_image(v).reshape(-1) if peeler.model.muon is not None else 0.0
    model = model + sum(images, np.zeros(target.pe.size))
    return v, kept, _excess(target.pe.reshape(-1), model, allowance)


def _peel_from(peeler, target, v, ptypes, max_particles, stop_threshold_pe, identify, refine, allowance):
    box = _central_box(target.grid)
    mu = peeler.model.muon_image(v).reshape(-1) if peeler.model.muon is not None else 0.0
    residual = _excess(target.pe.reshape(-1), mu, allowance)
    reach = max(range_from_ke(t, KE_RANGE[t][1], peeler.consts) for t in ptypes) + 0.5 * target.grid.pitch
    incyl = peeler.cylinders(v, reach)

    found = []
    passes = 0
    while (len(found) < max_particles and residual.sum() >= stop_threshold_pe
           and passes < 2 * max_particles):
        passes += 1
        scores = residual @ incyl
        j = int(np.argmax(scores))
        cyl = incyl[:, j]
        u = peeler.dirs[j]
        if identify:
            probs, kes = classify_type(peeler, v, u, cyl, residual, ptypes)
            if not kes:
                break
            ptype = max(kes, key=lambda t: probs[t])
            ke = kes[ptype]
        else:
            ptype = ParticleType.PROTON
            ke = peeler.fit_ke(v, ptype, u, cyl, residual[cyl].sum())
            if ke is None:
                break
            probs = {t: float(t is ptype) for t in HADRONS}
        th, ph = angles(u)
        found.append((ParticleKinematics(ptype, ke, th, ph, v.copy()), probs))
        plain = np.maximum(residual - peeler.template(v, ptype, ke, u), 0.0)
        if refine:
            v_new, kept, refit = _refit(peeler, target, v, found, box, stop_threshold_pe, allowance)
            # the refit is taken only when it explains at least as much charge
            if refit.sum() <= plain.sum():
                v, found, residual = v_new, kept, refit
                incyl = peeler.cylinders(v, reach)
                continue
        residual = plain

    found.sort(key=lambda f: -f[0].ke)
    return v, found, float(residual.sum())


def _restart_points(target, est, n):
    """Centers of the brightest central voxels, skipping the first estimate."""
    grid = target.grid
    centers = grid.centers().reshape(-1, 3)
    inner = np.all(np.abs(centers) <= _central_box(grid) + 1e-9, axis=1)
    order = np.argsort(-np.where(inner, target.pe.reshape(-1), -1.0), kind="stable")
    out = []
    for i in order[:n + 1]:
        if np.linalg.norm(centers[i] - est) > 0.5 * grid.pitch:
            out.append(centers[i])
    return out[:n]


def peel(target: VoxelImage, muon: ParticleKinematics | None,
         consts: PhysicsConstants = DEFAULT_CONSTANTS, max_particles: int = 6,
         stop_threshold_pe: float = STOP_THRESHOLD_PE, identify: bool = False,
         vertex=None, refine: bool = True, restarts: int = RESTARTS,
         noise_allowance: float = 0.0) -> SeedResult:
    """Propose an ordered particle list for ``target``.

    ``identify`` turns on proton/deuterium/tritium classification; otherwise
    every candidate is a proton.  With ``refine`` the vertex and all
    accepted candidates are re-fitted jointly after each pass and the
    residual is recomputed from the refitted model, so grid-quantized
    directions do not leave spurious charge behind.

    If peeling from the estimated vertex ends with the residual still above
    threshold, it is repeated from up to ``restarts`` other bright central
    voxels.  The first run that gets below threshold wins; failing that, the
    run with the smallest residual.

    For Poisson-smeared targets, ``noise_allowance`` (in sigmas) keeps
    ordinary fluctuations above the model out of the residual.
    """
    peeler = _Peeler(target, muon, consts)
    if vertex is None:
        est = estimate_vertex(target, muon, consts, peeler.model)
    else:
        est = VertexEstimate(np.asarray(vertex, dtype=np.float64))
    ptypes = HADRONS if identify else (ParticleType.PROTON,)
    args = (ptypes, max_particles, stop_threshold_pe, identify, refine, noise_allowance)

    best = _peel_from(peeler, target, est.position, *args)
    if best[2] >= stop_threshold_pe and refine and vertex is None:
        for v0 in _restart_points(target, est.position, restarts):
            run = _peel_from(peeler, target, v0, *args)
            if run[2] < best[2]:
                best = run
            if best[2] < stop_threshold_pe:
                break
    v, found, residual_pe = best
    return SeedResult(
        vertex=v.copy(),
        particles=[f[0] for f in found],
        type_probs=[f[1] for f in found],
        residual_pe=residual_pe,
        low_confidence=est.low_confidence,
    )
