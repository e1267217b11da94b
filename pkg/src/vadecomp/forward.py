"""Differentiable image generator.

Maps a vertex plus per-particle (ke, direction) to the expected 7x7x7 p.e.
image, including the known muon, and back-propagates image-space gradients
to every continuous parameter with hand-written adjoints:

    positions = vertex + u * mid(ke)       light = light(ke)
    pe = calib * crop(crosstalk(scatter(positions, light)))

Crosstalk is symmetric, so its adjoint is itself; the adjoint of the
trilinear scatter is trilinear interpolation.  The image is rendered on a
grid padded by two voxels and cropped, which makes the 7x7x7 frame an exact
cut-out of an unbounded detector (the same convention the event generator
uses), so a noiseless event is reproduced bit-for-bit up to rounding.

Sampled images add ``sqrt(pe) * g`` with ``g`` a standard normal keyed by
``(z, voxel)``, clamped at zero; at fixed ``z`` this is differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import rng as crng
from .eventgen import DecompositionHypothesis
from .imaging import CROP_GRID, GridSpec, VoxelImage, crop
from .physics import (
    DEFAULT_CONSTANTS,
    ParticleKinematics,
    ParticleType,
    PhysicsConstants,
    as_ptype,
    direction,
    exit_distance,
    track_segments,
)

MARGIN = 2
LL_EPS = 1e-9


def param_vector(hyp: DecompositionHypothesis) -> np.ndarray:
    """``[x, y, z, ke_0, theta_0, phi_0, ke_1, ...]`` (mm, MeV, degrees)."""
    out = list(hyp.vertex)
    for p in hyp.particles:
        out += [p.ke, p.theta, p.phi]
    return np.asarray(out, dtype=np.float64)


def from_param_vector(vec, like: DecompositionHypothesis) -> DecompositionHypothesis:
    vec = np.asarray(vec, dtype=np.float64)
    if len(vec) != 3 + 3 * len(like.particles):
        raise ValueError("parameter vector length does not match hypothesis")
    v = vec[:3].copy()
    ps = []
    for j, p in enumerate(like.particles):
        ke, th, ph = vec[3 + 3 * j: 6 + 3 * j]
        ps.append(ParticleKinematics(p.ptype, ke, th, ph, v))
    return DecompositionHypothesis(v, ps)


def param_names(hyp: DecompositionHypothesis) -> list[str]:
    names = ["x", "y", "z"]
    for j in range(len(hyp.particles)):
        names += [f"ke{j}", f"theta{j}", f"phi{j}"]
    return names


# ---------------------------------------------------------------- losses

def mse(img, target):
    d = img - target
    return float(np.mean(d * d)), 2.0 * d / d.size


def neg2_log_likelihood_grad(obs, exp):
    """-2 ln L of Poisson likelihood ratios and its gradient in ``exp``."""
    obs = np.asarray(obs, dtype=np.float64)
    exp = np.asarray(exp, dtype=np.float64)
    e = np.maximum(exp, LL_EPS)
    pos = obs > 0
    t = e - obs
    t[pos] += obs[pos] * (np.log(obs[pos]) - np.log(e[pos]))
    grad = 2.0 * (1.0 - obs / e)
    grad[exp < LL_EPS] = 0.0
    return 2.0 * float(np.sum(t)), grad


LOSSES = {"mse": mse, "neg2ll": lambda img, tgt: neg2_log_likelihood_grad(tgt, img)}


# ---------------------------------------------------------------- model

@dataclass
class Gradient:
    vertex: np.ndarray      # (3,)
    ke: np.ndarray          # (k,)
    u: np.ndarray           # (k, 3), w.r.t. direction components as free variables


class ForwardModel:
    """Generator bound to one event's muon, constants and output grid."""

    def __init__(self, muon: ParticleKinematics | None, consts: PhysicsConstants = DEFAULT_CONSTANTS,
                 grid: GridSpec = CROP_GRID, margin: int = MARGIN):
        self.consts = consts
        self.grid = grid
        self.margin = margin
        self.padded = grid.padded(margin)
        self.muon = muon
        if muon is not None:
            chord = 2.0 * math.sqrt(3.0) * self.padded.half_extent
            self._mu_u = muon.direction
            self._mu_seg = track_segments(muon.ptype, muon.ke, consts, max_path=chord)

    # -- segment assembly

    def _muon_positions(self, vertex):
        t_exit = exit_distance(vertex, self._mu_u, self.padded.half_extent)
        k = int(np.searchsorted(self._mu_seg.mid, t_exit))
        mid = self._mu_seg.mid[:k]
        return vertex[None, :] + mid[:, None] * self._mu_u[None, :], self._mu_seg.light[:k]

    def _assemble(self, vertex, ptypes, kes, us, with_grad, include_muon=True):
        pos, light, segs = [], [], []
        for pt, ke, u in zip(ptypes, kes, us):
            if not ke > 0:
                raise ValueError("kinetic energy must be positive")
            t_exit = exit_distance(vertex, u, self.padded.half_extent)
            # cut at the padded box; anything past it cannot reach the frame
            s = track_segments(pt, ke, self.consts, max_path=t_exit, with_grad=with_grad)
            pos.append(vertex[None, :] + s.mid[:, None] * u[None, :])
            light.append(s.light)
            segs.append(s)
        if include_muon and self.muon is not None:
            mp, ml = self._muon_positions(vertex)
            pos.append(mp)
            light.append(ml)
        if pos:
            pos = np.concatenate(pos).reshape(-1, 3)
            light = np.concatenate(light)
        else:
            pos = np.zeros((0, 3))
            light = np.zeros(0)
        return pos, light, segs

    def _expectation_from(self, pos, light):
        q = self.padded.to_index(pos)
        img = kernels.scatter_trilinear(q, light, self.padded.n)
        img = kernels.crosstalk(img, self.consts.crosstalk_frac)
        return self.consts.calib * crop(img, self.margin), q

    # -- public surface

    def expectation(self, vertex, ptypes, kes, us, include_muon=True) -> np.ndarray:
        vertex = np.asarray(vertex, dtype=np.float64)
        pos, light, _ = self._assemble(vertex, ptypes, kes, us, False, include_muon)
        return self._expectation_from(pos, light)[0]

    def muon_image(self, vertex) -> np.ndarray:
        return self.expectation(vertex, [], [], [], include_muon=True)

    def sample(self, pe, z: int) -> np.ndarray:
        g = crng.normal(z, np.arange(pe.size)).reshape(pe.shape)
        return np.maximum(pe + np.sqrt(np.maximum(pe, 0.0)) * g, 0.0)

    def template(self, pe, keys) -> np.ndarray:
        """Mean of sampled images over noise ``keys``; fixed reduction order."""
        out, _ = _draw_mean(pe.reshape(-1), keys, want_grad=False)
        return out.reshape(pe.shape)

    def value_and_grad(self, vertex, ptypes, kes, us, target, loss="neg2ll", keys=None):
        """Loss against ``target`` and its gradient.

        ``keys=None`` uses the expectation image; otherwise the image is the
        mean of sampled images over the given noise keys (one key = one
        fixed-seed sample).
        """
        vertex = np.asarray(vertex, dtype=np.float64)
        pos, light, segs = self._assemble(vertex, ptypes, kes, us, True)
        pe, q = self._expectation_from(pos, light)
        if keys is None:
            img = pe
            dimg_dpe = None
        else:
            img, dimg_dpe = _draw_mean(pe.reshape(-1), keys, want_grad=True)
            img = img.reshape(pe.shape)
            dimg_dpe = dimg_dpe.reshape(pe.shape)
        value, dimg = LOSSES[loss](img, np.asarray(target, dtype=np.float64))
        dpe = dimg if dimg_dpe is None else dimg * dimg_dpe

        # adjoint of calib * crop(crosstalk(scatter(.)))
        m = self.margin
        G = np.zeros((self.padded.n,) * 3)
        G[m:m + self.grid.n, m:m + self.grid.n, m:m + self.grid.n] = self.consts.calib * dpe
        H = kernels.crosstalk(G, self.consts.crosstalk_frac)
        val, gq = kernels.gather_trilinear(H, q)
        dpos = light[:, None] * gq / self.grid.pitch

        g_vertex = dpos.sum(axis=0)
        k = len(segs)
        g_ke = np.zeros(k)
        g_u = np.zeros((k, 3))
        off = 0
        for j, s in enumerate(segs):
            sl = slice(off, off + len(s.mid))
            off += len(s.mid)
            dp = dpos[sl]
            g_u[j] = dp.T @ s.mid
            dmid = dp @ us[j]
            g_ke[j] = float(val[sl] @ s.dlight_dke + dmid @ s.dmid_dke)
        return value, Gradient(g_vertex, g_ke, g_u), img


def _draw_mean(pe_flat, keys, want_grad):
    keys = list(keys)
    n = len(keys)
    idx = np.arange(pe_flat.size)
    root = np.sqrt(np.maximum(pe_flat, 0.0))
    G = np.stack([crng.normal(z, idx) for z in keys])
    S = pe_flat[None, :] + root[None, :] * G
    live = S > 0
    img = np.where(live, S, 0.0).sum(axis=0) / n
    if not want_grad:
        return img, None
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(live & (root > 0)[None, :], 1.0 + G / (2.0 * np.where(root > 0, root, 1.0)), 0.0)
    return img, d.sum(axis=0) / n


def _unpack(hyp: DecompositionHypothesis):
    ptypes = [as_ptype(p.ptype) for p in hyp.particles]
    kes = [p.ke for p in hyp.particles]
    us = [direction(p.theta, p.phi) for p in hyp.particles]
    return ptypes, kes, us


def direction_jacobian(theta: float, phi: float) -> np.ndarray:
    """d(unit vector)/d(theta, phi) per degree, shape (3, 2)."""
    t = math.radians(theta)
    p = math.radians(phi)
    k = math.pi / 180.0
    return k * np.array([
        [math.cos(t) * math.cos(p), -math.sin(t) * math.sin(p)],
        [math.cos(t) * math.sin(p), math.sin(t) * math.cos(p)],
        [-math.sin(t), 0.0],
    ])


def gradient_to_params(hyp: DecompositionHypothesis, g: Gradient) -> np.ndarray:
    out = [*g.vertex]
    for j, p in enumerate(hyp.particles):
        dth, dph = g.u[j] @ direction_jacobian(p.theta, p.phi)
        out += [g.ke[j], dth, dph]
    return np.asarray(out, dtype=np.float64)


def generate(hyp: DecompositionHypothesis, muon: ParticleKinematics | None,
             consts: PhysicsConstants = DEFAULT_CONSTANTS, grid: GridSpec = CROP_GRID,
             mode: str = "expectation", z: int | None = None) -> VoxelImage:
    """Expected image of a hypothesis plus the muon, or one sampled image.

    Every particle starts at ``hyp.vertex`` whatever its own ``start``.
    """
    fm = ForwardModel(muon, consts, grid)
    pe = fm.expectation(hyp.vertex, *_unpack(hyp))
    if mode == "sample":
        if z is None:
            raise ValueError("sample mode needs a noise seed z")
        pe = fm.sample(pe, z)
    elif mode != "expectation":
        raise ValueError(f"unknown mode {mode!r}")
    return VoxelImage(grid, pe)


def loss_and_gradient(hyp: DecompositionHypothesis, muon: ParticleKinematics | None,
                      target: VoxelImage, loss: str = "mse", mode: str = "expectation",
                      z: int | None = None, consts: PhysicsConstants = DEFAULT_CONSTANTS):
    """Scalar loss of ``generate(hyp)`` against ``target`` and its gradient
    with respect to :func:`param_vector` (mm, MeV, degrees)."""
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    fm = ForwardModel(muon, consts, target.grid)
    keys = None
    if mode == "sample":
        if z is None:
            raise ValueError("sample mode needs a noise seed z")
        keys = [z]
    elif mode != "expectation":
        raise ValueError(f"unknown mode {mode!r}")
    value, g, _ = fm.value_and_grad(hyp.vertex, *_unpack(hyp), target.pe, loss, keys)
    return value, gradient_to_params(hyp, g)


__all__ = [
    "ForwardModel",
    "Gradient",
    "ParticleType",
    "from_param_vector",
    "generate",
    "gradient_to_params",
    "loss_and_gradient",
    "param_names",
    "param_vector",
]
