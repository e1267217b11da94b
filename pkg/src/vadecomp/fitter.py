"""Gradient-descent refinement of decomposition hypotheses.

Two drivers share one Adam loop:

* :func:`fit_best_image` runs ``n`` independent descents, each against a
  generator image drawn with its own fixed noise seed, minimizing MSE, and
  keeps the single best parameter set seen anywhere.
* :func:`fit_likelihood` runs one descent whose template is the mean of
  ``n`` freshly drawn images per iteration (or the exact expectation),
  minimizing the Poisson ``-2 ln L``.

The optimizer works in scaled internal coordinates (see
:class:`Parameterization`); the learning rates apply to those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import rng as crng
from .eventgen import DecompositionHypothesis
from .forward import (
    ForwardModel,
    direction_jacobian,
    neg2_log_likelihood_grad,
    param_names,
    param_vector,
)
from .imaging import VoxelImage
from .physics import (
    DEFAULT_CONSTANTS,
    KE_RANGE,
    ParticleKinematics,
    PhysicsConstants,
    angles,
    as_ptype,
    direction,
)

VERTEX_SCALE = 35.0     # mm per internal unit: half extent of the 7x7x7 frame
KE_SCALE = 10.0         # MeV per internal unit
KE_FLOOR = 0.5          # MeV; the model needs a positive range


def neg2_log_likelihood(obs: VoxelImage, exp: VoxelImage) -> float:
    """Poisson ``-2 ln L`` of ``obs`` given expectation ``exp``.

    ``2 * sum(obs * ln(obs / exp) + exp - obs)``, where voxels with
    ``obs = 0`` contribute ``2 * exp`` and ``exp`` is floored at 1e-9.
    """
    obs.check_same_grid(exp)
    return neg2_log_likelihood_grad(obs.pe, exp.pe)[0]


# ---------------------------------------------------------------- parameters

def _tangent_basis(u):
    a = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


class Parameterization:
    """Unconstrained internal coordinates around a reference hypothesis.

    ``x = [vertex / VERTEX_SCALE, ke_j / KE_SCALE, a_j, b_j, ...]`` where the
    direction of particle ``j`` is ``normalize(d_j + a_j e1_j + b_j e2_j)``
    for its reference direction ``d_j`` and a fixed tangent basis.  The
    direction map has no wrap-around, and its sensitivity drops as the
    offsets grow, which damps late oscillation.  Kinetic energies are
    clamped to ``[KE_FLOOR, KE_RANGE max]`` of their type; the gradient is
    zero on a clamped side.
    """

    def __init__(self, ref: DecompositionHypothesis, vertex_scale=VERTEX_SCALE, ke_scale=KE_SCALE):
        self.ref = ref
        self.ptypes = [as_ptype(p.ptype) for p in ref.particles]
        self.d0 = [direction(p.theta, p.phi) for p in ref.particles]
        self.basis = [_tangent_basis(d) for d in self.d0]
        self.sv = float(vertex_scale)
        self.sk = float(ke_scale)
        self.ke_cap = [KE_RANGE[t][1] for t in self.ptypes]

    @property
    def size(self) -> int:
        return 3 + 3 * len(self.ptypes)

    def groups(self) -> np.ndarray:
        """0 = vertex, 1 = ke, 2 = direction, per internal coordinate."""
        return np.array([0, 0, 0] + [1, 2, 2] * len(self.ptypes))

    def initial(self, hyp: DecompositionHypothesis | None = None) -> np.ndarray:
        hyp = hyp or self.ref
        x = np.zeros(self.size)
        x[:3] = hyp.vertex / self.sv
        for j, p in enumerate(hyp.particles):
            x[3 + 3 * j] = p.ke / self.sk
            u = direction(p.theta, p.phi)
            # central projection onto the tangent plane of d0
            c = float(u @ self.d0[j])
            if c > 1e-6:
                w = u / c - self.d0[j]
                x[4 + 3 * j] = w @ self.basis[j][0]
                x[5 + 3 * j] = w @ self.basis[j][1]
        return x

    def decode(self, x):
        """``(vertex, kes, us, ws)`` with ``ws`` the unnormalized directions."""
        x = np.asarray(x, dtype=np.float64)
        vertex = x[:3] * self.sv
        kes, us, ws = [], [], []
        for j in range(len(self.ptypes)):
            kes.append(min(max(self.sk * x[3 + 3 * j], KE_FLOOR), self.ke_cap[j]))
            e1, e2 = self.basis[j]
            w = self.d0[j] + x[4 + 3 * j] * e1 + x[5 + 3 * j] * e2
            ws.append(w)
            us.append(w / np.linalg.norm(w))
        return vertex, kes, us, ws

    def hypothesis(self, x) -> DecompositionHypothesis:
        vertex, kes, us, _ = self.decode(x)
        ps = []
        for pt, ke, u in zip(self.ptypes, kes, us):
            th, ph = angles(u)
            ps.append(ParticleKinematics(pt, ke, th, ph, vertex.copy()))
        return DecompositionHypothesis(vertex, ps)

    def pullback(self, x, g) -> np.ndarray:
        """Chain a model :class:`~vadecomp.forward.Gradient` back to ``x``."""
        _, kes, us, ws = self.decode(x)
        out = np.zeros(self.size)
        out[:3] = g.vertex * self.sv
        for j in range(len(self.ptypes)):
            live = KE_FLOOR < self.sk * x[3 + 3 * j] <= self.ke_cap[j]
            out[3 + 3 * j] = g.ke[j] * self.sk if live else 0.0
            u = us[j]
            gw = (g.u[j] - u * (g.u[j] @ u)) / np.linalg.norm(ws[j])
            out[4 + 3 * j] = gw @ self.basis[j][0]
            out[5 + 3 * j] = gw @ self.basis[j][1]
        return out


class Objective:
    """Loss of a parameterized hypothesis against a fixed target."""

    def __init__(self, model: ForwardModel, par: Parameterization, target: np.ndarray, loss: str):
        self.model = model
        self.par = par
        self.target = np.asarray(target, dtype=np.float64)
        self.loss = loss
        self.calls = 0

    def __call__(self, x, keys=None):
        self.calls += 1
        vertex, kes, us, _ = self.par.decode(x)
        value, g, _ = self.model.value_and_grad(vertex, self.par.ptypes, kes, us, self.target, self.loss, keys)
        return value, self.par.pullback(x, g)


def polish(model: ForwardModel, hyp: DecompositionHypothesis, target: np.ndarray,
           loss: str = "neg2ll", maxiter: int = 200, vertex_box: float | None = None,
           ke_max: dict | None = None, vertex_step: float | None = None, gtol: float = 1e-5):
    """Quasi-Newton refinement on the expectation image.

    Returns ``(hypothesis, loss)``.  ``vertex_box`` bounds each vertex
    coordinate to ``[-box, box]``, ``vertex_step`` bounds its move away
    from the start, and ``ke_max`` maps particle types to an upper kinetic
    energy.  Used by the seeder between peeling passes; not
    part of either descent algorithm.
    """
    par = Parameterization(hyp)
    obj = Objective(model, par, target, loss)
    x0 = par.initial()
    bounds = [(None, None)] * par.size
    lo = np.full(3, -np.inf)
    hi = np.full(3, np.inf)
    if vertex_box is not None:
        lo[:], hi[:] = -vertex_box / par.sv, vertex_box / par.sv
        x0[:3] = np.clip(x0[:3], lo, hi)
    if vertex_step is not None:
        lo = np.maximum(lo, x0[:3] - vertex_step / par.sv)
        hi = np.minimum(hi, x0[:3] + vertex_step / par.sv)
    bounds[:3] = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b) for a, b in zip(lo, hi)]
    for j, pt in enumerate(par.ptypes):
        hi = None if ke_max is None else ke_max[pt] / par.sk
        bounds[3 + 3 * j] = (KE_FLOOR / par.sk, hi)
        if hi is not None:
            x0[3 + 3 * j] = min(x0[3 + 3 * j], hi)
    res = minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-12 if gtol < 1e-5 else 2.2e-9})
    return par.hypothesis(res.x), float(res.fun)


# ---------------------------------------------------------------- optimizer

@dataclass
class Adam:
    """Adam with a per-coordinate learning rate vector."""

    lr: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, x, g):
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return x - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class FitConfig:
    n: int = 200
    m_factor: int = 50
    lr_vertex: float = 0.005
    lr_ke: float = 0.05
    lr_dir: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    vertex_unit_mm: float = VERTEX_SCALE
    ke_unit_mev: float = KE_SCALE
    polish_iters: int = 1000       # L-BFGS-B finish of the expectation-template fit; 0 disables

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.m_factor < 1:
            raise ValueError("m_factor must be >= 1")
        if min(self.lr_vertex, self.lr_ke, self.lr_dir) <= 0:
            raise ValueError("learning rates must be positive")
        if not (self.vertex_unit_mm > 0 and self.ke_unit_mev > 0):
            raise ValueError("parameter units must be positive")
        if self.polish_iters < 0:
            raise ValueError("polish_iters must be >= 0")

    def iterations(self, n_particles: int) -> int:
        return self.m_factor * max(n_particles, 1)

    def optimizer(self, par: Parameterization) -> Adam:
        lr = np.array([self.lr_vertex, self.lr_ke, self.lr_dir])[par.groups()]
        return Adam(lr, self.adam_beta1, self.adam_beta2, self.adam_eps)


@dataclass
class FitResult:
    hypothesis: DecompositionHypothesis
    best_loss: float
    loss_history: list = field(default_factory=list)    # best-so-far per iteration
    per_run_losses: list = field(default_factory=list)  # best-image fit only
    best_run: int = 0
    iterations: int = 0
    algorithm: str = ""
    ci: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "hypothesis": self.hypothesis.to_dict(),
            "best_loss": self.best_loss,
            "best_run": self.best_run,
            "iterations": self.iterations,
            "loss_history": list(self.loss_history),
            "per_run_losses": list(self.per_run_losses),
            "ci": self.ci,
        }


def _descend(obj: Objective, par: Parameterization, cfg: FitConfig, iters: int, keys_for):
    """Adam loop; returns ``(x_best, best, history)``.

    The loss is recorded before each update, so iteration 0 scores the
    starting point and the best-so-far can never be worse than the seed.
    """
    x = par.initial()
    opt = cfg.optimizer(par)
    best = math.inf
    x_best = x.copy()
    history = []
    for it in range(iters):
        value, g = obj(x, keys_for(it))
        if value < best:
            best = value
            x_best = x.copy()
        history.append(best)
        x = opt.step(x, g)
    return x_best, best, history


def _par(seed_hyp, cfg):
    return Parameterization(seed_hyp, cfg.vertex_unit_mm, cfg.ke_unit_mev)


def run_seeds(cfg: FitConfig, count: int) -> list[int]:
    """The noise seeds ``z_i`` used by the runs of :func:`fit_best_image`."""
    return [crng.derive_seed(cfg.seed, i) for i in range(count)]


def fit_best_image(target: VoxelImage, seed_hyp: DecompositionHypothesis,
                   muon: ParticleKinematics | None, cfg: FitConfig = FitConfig(),
                   consts: PhysicsConstants = DEFAULT_CONSTANTS, noise_seeds=None) -> FitResult:
    """Best-fit image search over independent noise seeds.

    Run ``i`` compares the generator sampled with fixed noise ``z_i``
    against ``target`` under MSE for ``m_factor * k`` Adam iterations.  The
    returned hypothesis is the lowest-loss point over all runs and
    iterations.  ``noise_seeds`` overrides the seeds derived from
    ``cfg.seed``.
    """
    zs = list(noise_seeds) if noise_seeds is not None else run_seeds(cfg, cfg.n)
    if not zs:
        raise ValueError("need at least one noise seed")
    model = ForwardModel(muon, consts, target.grid)
    par = _par(seed_hyp, cfg)
    obj = Objective(model, par, target.pe, "mse")
    iters = cfg.iterations(len(seed_hyp.particles))
    best, best_x, best_run, best_hist = math.inf, par.initial(), 0, []
    per_run = []
    for i, z in enumerate(zs):
        x, loss, hist = _descend(obj, par, cfg, iters, lambda it, z=z: [z])
        per_run.append(loss)
        # strict improvement keeps the earliest run on ties
        if loss < best:
            best, best_x, best_run, best_hist = loss, x, i, hist
    return FitResult(par.hypothesis(best_x), best, best_hist, per_run, best_run, iters, "best_image")


def fit_likelihood(target: VoxelImage, seed_hyp: DecompositionHypothesis,
                   muon: ParticleKinematics | None, cfg: FitConfig = FitConfig(),
                   consts: PhysicsConstants = DEFAULT_CONSTANTS, expectation: bool = False) -> FitResult:
    """Likelihood descent against an averaged generator template.

    Each iteration averages ``cfg.n`` sampled images drawn with fresh noise
    seeds and scores the Poisson ``-2 ln L`` of ``target``.  With
    ``expectation=True`` the exact expected image replaces the average;
    that objective is deterministic, so the best Adam point is finished
    with up to ``cfg.polish_iters`` L-BFGS-B iterations, kept only if it
    lowers the loss.
    """
    model = ForwardModel(muon, consts, target.grid)
    par = _par(seed_hyp, cfg)
    obj = Objective(model, par, target.pe, "neg2ll")
    iters = cfg.iterations(len(seed_hyp.particles))

    def keys_for(it):
        if expectation:
            return None
        return [crng.derive_seed(cfg.seed, it, i) for i in range(cfg.n)]

    x, best, hist = _descend(obj, par, cfg, iters, keys_for)
    hyp = par.hypothesis(x)
    if expectation and cfg.polish_iters > 0:
        refined, loss = polish(model, hyp, target.pe, "neg2ll", cfg.polish_iters,
                               vertex_box=target.grid.half_extent,
                               ke_max={t: r[1] for t, r in KE_RANGE.items()}, gtol=1e-9)
        if loss < best:
            hyp, best = refined, loss
            hist.append(best)
    name = "likelihood_expectation" if expectation else "likelihood"
    return FitResult(hyp, best, hist, [], 0, iters, name)


# ---------------------------------------------------------------- profiling

@dataclass
class ProfileResult:
    param: str
    grid: list
    values: list                # profiled -2 ln L at each grid value
    best: float                 # reference minimum the deltas are taken from
    lo: float
    hi: float
    open_lo: bool               # True when the curve never rose by 1 below the minimum
    open_hi: bool
    theta_star: float = math.nan

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    def to_dict(self) -> dict:
        return {
            "param": self.param,
            "grid": [float(g) for g in self.grid],
            "values": [float(v) for v in self.values],
            "best": self.best,
            "ci": [self.lo, self.hi],
            "open": [self.open_lo, self.open_hi],
            "theta_star": self.theta_star,
        }


def _minimize_fixed(fun_grad, x0, index, value, bounds, maxiter):
    b = list(bounds) if bounds is not None else [(None, None)] * len(x0)
    b[index] = (value, value)
    x0 = np.array(x0, dtype=np.float64)
    x0[index] = value
    for i, (lo, hi) in enumerate(b):
        x0[i] = np.clip(x0[i], -np.inf if lo is None else lo, np.inf if hi is None else hi)
    res = minimize(fun_grad, x0, jac=True, method="L-BFGS-B", bounds=b, options={"maxiter": maxiter})
    return float(res.fun), res.x


def profile_curve(fun_grad, x_star, index: int, grid, bounds=None, maxiter: int = 200):
    """Profile of ``fun_grad`` in coordinate ``index`` over ``grid``.

    ``fun_grad(x) -> (value, gradient)``.  Every other coordinate is
    re-minimized at each grid value from two starts, the neighbouring
    solution (walking outward from the point nearest ``x_star``) and
    ``x_star`` itself, keeping the lower.  Returns ``(values, solutions)``
    aligned with ``grid``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    values = np.empty(len(grid))
    sols = [None] * len(grid)
    start = int(np.argmin(np.abs(grid - x_star[index])))
    for order in (range(start, len(grid)), range(start - 1, -1, -1)):
        x = x_star
        for i in order:
            values[i], sols[i] = _minimize_fixed(fun_grad, x, index, grid[i], bounds, maxiter)
            if x is not x_star:
                f2, x2 = _minimize_fixed(fun_grad, x_star, index, grid[i], bounds, maxiter)
                if f2 < values[i]:
                    values[i], sols[i] = f2, x2
            x = sols[i]
    return values, sols


def interval_from_curve(grid, values, best: float | None = None, level: float = 1.0):
    """Interval where ``values - best <= level`` around the curve minimum.

    Crossings are linearly interpolated between grid points.  Returns
    ``(lo, hi, open_lo, open_hi)``; an open side reports the grid end.
    """
    grid = np.asarray(grid, dtype=np.float64)
    d = np.asarray(values, dtype=np.float64) - (min(values) if best is None else best)
    k = int(np.argmin(d))

    def cross(i_in, i_out):
        a, b = d[i_in], d[i_out]
        return grid[i_in] + (level - a) / (b - a) * (grid[i_out] - grid[i_in])

    lo, open_lo = grid[0], True
    for i in range(k, 0, -1):
        if d[i - 1] > level:
            lo, open_lo = cross(i, i - 1), False
            break
    hi, open_hi = grid[-1], True
    for i in range(k, len(grid) - 1):
        if d[i + 1] > level:
            hi, open_hi = cross(i, i + 1), False
            break
    return float(lo), float(hi), open_lo, open_hi


def _refine_crossing(f, a, b, level, fa, fb, iters=30, tol=1e-7):
    """Bisection on ``f(x) = level`` inside a bracket ``[a, b]``."""
    for _ in range(iters):
        if abs(b - a) <= tol * max(1.0, abs(a)):
            break
        m = 0.5 * (a + b)
        fm = f(m)
        if (fm > level) == (fa > level):
            a, fa = m, fm
        else:
            b, fb = m, fm
    # final linear step inside the bracket
    return a + (level - fa) / (fb - fa) * (b - a) if fb != fa else 0.5 * (a + b)


def profile_interval(fun_grad, x_star, index: int, grid, bounds=None, best: float | None = None,
                     refine: bool = True, level: float = 1.0, maxiter: int = 200):
    """Profile curve plus the ``level`` crossing interval.

    With ``refine`` each bracketed crossing is bisected on the profile
    itself instead of interpolated.  Returns ``(values, lo, hi, open_lo,
    open_hi, best)``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    values, sols = profile_curve(fun_grad, x_star, index, grid, bounds, maxiter)
    f_star = float(fun_grad(np.asarray(x_star, dtype=np.float64))[0])
    ref = min(float(values.min()), f_star) if best is None else best
    lo, hi, open_lo, open_hi = interval_from_curve(grid, values, ref, level)
    if refine:
        d = values - ref
        k = int(np.argmin(d))

        def prof(x, warm):
            return _minimize_fixed(fun_grad, warm, index, x, bounds, maxiter)[0] - ref

        if not open_lo:
            i = max(j for j in range(k) if d[j] > level)
            lo = _refine_crossing(lambda x: prof(x, sols[i + 1]), grid[i + 1], grid[i], level, d[i + 1], d[i])
        if not open_hi:
            i = min(j for j in range(k + 1, len(grid)) if d[j] > level)
            hi = _refine_crossing(lambda x: prof(x, sols[i - 1]), grid[i - 1], grid[i], level, d[i - 1], d[i])
    return values, float(lo), float(hi), open_lo, open_hi, ref


def likelihood_function(target: VoxelImage, like: DecompositionHypothesis, muon,
                        consts: PhysicsConstants = DEFAULT_CONSTANTS):
    """``-2 ln L`` of the expected image as a function of :func:`param_vector`."""
    model = ForwardModel(muon, consts, target.grid)
    ptypes = [as_ptype(p.ptype) for p in like.particles]
    k = len(ptypes)

    def fun_grad(vec):
        vec = np.asarray(vec, dtype=np.float64)
        kes = [vec[3 + 3 * j] for j in range(k)]
        if min(kes, default=1.0) <= 0:
            return math.inf, np.zeros_like(vec)
        angs = [(vec[4 + 3 * j], vec[5 + 3 * j]) for j in range(k)]
        us = [direction(t, p) for t, p in angs]
        value, g, _ = model.value_and_grad(vec[:3], ptypes, kes, us, target.pe, "neg2ll")
        out = np.empty_like(vec)
        out[:3] = g.vertex
        for j, (t, p) in enumerate(angs):
            out[3 + 3 * j] = g.ke[j]
            out[4 + 3 * j: 6 + 3 * j] = g.u[j] @ direction_jacobian(t, p)
        return value, out

    return fun_grad


def profile_parameter(target: VoxelImage, theta_star: DecompositionHypothesis, muon,
                      param: str, grid, consts: PhysicsConstants = DEFAULT_CONSTANTS,
                      refine: bool = True) -> ProfileResult:
    """Profiled ``-2 ln L`` for one named parameter (see ``param_names``).

    The other parameters are nuisances re-minimized at every grid value.
    The 68% interval is where the profile stays within 1 of its minimum.
    """
    names = param_names(theta_star)
    if param not in names:
        raise ValueError(f"unknown parameter {param!r}; expected one of {names}")
    index = names.index(param)
    fun_grad = likelihood_function(target, theta_star, muon, consts)
    x_star = param_vector(theta_star)
    bounds = [(None, None)] * len(x_star)
    for j, p in enumerate(theta_star.particles):
        bounds[3 + 3 * j] = (KE_FLOOR, max(KE_RANGE[as_ptype(p.ptype)][1], p.ke))
    values, lo, hi, olo, ohi, ref = profile_interval(fun_grad, x_star, index, grid, bounds, refine=refine)
    return ProfileResult(param, [float(g) for g in grid], [float(v) for v in values], ref,
                         lo, hi, olo, ohi, float(x_star[index]))
