"""Adjoint-gradient topology optimisation.

Stage 1 evolves continuous densities ``p`` through a cone filter and a tanh
projection whose sharpness follows a schedule; each step is projected gradient
descent with a Barzilai-Borwein trial step and Armijo backtracking.

Stage 2 thresholds the design and evolves a signed-distance level set on the
binary geometry: boundary cells move along the negative fill gradient, the
minimum feature is enforced by morphological opening/closing after every move,
and the level set is reinitialised every ``reinit_every`` iterations.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import objectives
from .design import (ConeFilter, DesignRegion, check_min_feature, enforce_min_feature,
                     fill_to_eps, project, project_grad, signed_distance)
from .errors import ConfigurationError, OptimizationDiverged
from .fdfd import PermittivityMap, _map_ordered, eps_at, simulate, solve
from .layout import Layout

log = logging.getLogger(__name__)

DEFAULT_SHARPNESS = ((0, 1.0), (15, 2.0), (25, 4.0), (35, 8.0), (45, 16.0), (52, 32.0))


@dataclass
class OptimizationConfig:
    wavelengths: tuple = (1550e-9,)
    objective: str = "mbs"
    targets: dict | None = None
    continuous_iters: int = 60
    levelset_iters: int = 20
    min_feature: float = 80e-9
    filter_radius: float | None = None
    sharpness: tuple = DEFAULT_SHARPNESS
    armijo_c: float = 1e-4
    initial_step: float = 0.2  # max |dp| of the first trial step
    max_step: float = 0.5
    max_backtracks: int = 6
    gtol: float = 1e-7
    reinit_every: int = 10
    divergence_factor: float = 10.0
    init_noise: float = 0.05
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.wavelengths = tuple(float(w) for w in self.wavelengths)
        if not self.wavelengths:
            raise ConfigurationError("wavelengths must be non-empty")
        if any(w <= 0 for w in self.wavelengths):
            raise ConfigurationError("wavelengths must be positive")
        if self.continuous_iters < 0 or self.levelset_iters < 0:
            raise ConfigurationError("iteration counts must be >= 0")
        if self.min_feature <= 0:
            raise ConfigurationError("min_feature must be positive")
        self.sharpness = tuple((int(i), float(b)) for i, b in self.sharpness)
        self.build_objective()

    @property
    def total_iters(self) -> int:
        return self.continuous_iters + self.levelset_iters

    def validate_for(self, dx: float) -> None:
        # the structuring disk must span >= 2 cells
        if round(self.min_feature / dx) < 2:
            raise ConfigurationError(
                f"min_feature={self.min_feature * 1e9:.0f} nm resolves to fewer than 2 cells "
                f"at dx={dx * 1e9:.0f} nm")

    def radius(self, dx: float) -> float:
        r = self.filter_radius if self.filter_radius is not None else self.min_feature
        return max(r, dx)

    def sharpness_at(self, iteration: int) -> float:
        beta = self.sharpness[0][1] if self.sharpness else 0.0
        for start, b in self.sharpness:
            if iteration >= start:
                beta = b
        return beta

    def build_objective(self):
        kind = self.objective
        if kind == "mbs":
            return objectives.mbs(self.wavelengths)
        if kind == "mdm":
            return objectives.mdm(self.wavelengths)
        if kind == "tritter":
            return objectives.tritter(self.wavelengths)
        if kind == "general":
            if not self.targets:
                raise ConfigurationError("objective 'general' needs targets")
            return objectives.general(self.targets, self.wavelengths)
        raise ConfigurationError(f"unknown objective {kind!r}")


@dataclass
class TraceRecord:
    iteration: int
    stage: str
    f: float
    max_residual: float
    wall_ms: float
    sharpness: float = 0.0
    accepted: bool = True


@dataclass
class OptimizationTrace:
    records: list[TraceRecord] = field(default_factory=list)
    converged: bool = False

    def append(self, record: TraceRecord) -> None:
        if not np.isfinite(record.f):
            raise OptimizationDiverged(f"non-finite objective at iteration {record.iteration}", self)
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    @property
    def f(self) -> np.ndarray:
        return np.array([r.f for r in self.records])


@dataclass
class Evaluation:
    f: float
    smatrices: list
    grad_fill: np.ndarray | None  # d f / d fill over the design region
    residuals: np.ndarray


class DesignProblem:
    """Binds a layout to an objective; evaluates f and its fill gradient."""

    def __init__(self, layout: Layout, config: OptimizationConfig, objective=None):
        self.layout = layout
        self.config = config
        self.objective = objective if objective is not None else config.build_objective()
        config.validate_for(layout.grid.dx)
        self.filter = ConeFilter(layout.region.shape, config.radius(layout.grid.dx) / layout.grid.dx)

    # -- parameter maps -------------------------------------------------------
    def fill_from_p(self, p: np.ndarray, sharpness: float) -> np.ndarray:
        region = self.layout.region
        return np.where(region.frozen, p, project(self.filter(p), sharpness))

    def p_grad(self, p: np.ndarray, sharpness: float, grad_fill: np.ndarray) -> np.ndarray:
        region = self.layout.region
        g = np.where(region.frozen, 0.0, grad_fill) * project_grad(self.filter(p), sharpness)
        return np.where(region.frozen, 0.0, self.filter.adjoint(g))

    def eps_map(self, fill: np.ndarray) -> PermittivityMap:
        return fill_to_eps(self.layout.region, fill)

    # -- simulation -----------------------------------------------------------
    def evaluate(self, fill: np.ndarray, gradient: bool = True) -> Evaluation:
        lay = self.layout
        eps_map = self.eps_map(fill)
        wls = list(self.objective.wavelengths)
        sims = _map_ordered(
            lambda wl: simulate(eps_map, lay.ports, wl, lay.pml, lay.materials),
            wls, self.config.threads)
        smatrices = [s.smatrix for s in sims]
        f, derivs = self.objective.evaluate(smatrices)
        residuals = self.objective.residuals(smatrices)
        if not gradient:
            return Evaluation(f, smatrices, None, residuals)

        def grad_one(args):
            sim, deriv = args
            return self._adjoint(sim, deriv)

        parts = _map_ordered(grad_one, list(zip(sims, derivs)), self.config.threads)
        grad = np.zeros(lay.region.shape)
        for part in parts:  # fixed order keeps runs bit-reproducible
            grad += part
        return Evaluation(f, smatrices, grad, residuals)

    def _adjoint(self, sim, deriv: np.ndarray) -> np.ndarray:
        lay = self.layout
        system = sim.system
        k0 = system.k0
        eps_lam = eps_at(lay.base, system.wavelength, lay.materials)
        d_eps_d_fill = eps_lam.eps_core - eps_lam.eps_clad
        g_eps = np.zeros(lay.grid.size)
        for j, e_fwd in enumerate(sim.fields):
            rhs = np.zeros(lay.grid.size, dtype=complex)
            for i, g in enumerate(sim.functionals):
                if deriv[i, j] != 0:
                    rhs += deriv[i, j] * g
            if not np.any(rhs):
                continue
            lam = solve(system, rhs, transpose=True)
            g_eps += -k0**2 * np.real(lam * e_fwd)
        return (g_eps.reshape(lay.grid.shape) * d_eps_d_fill)[lay.region.slices]


def adjoint_gradient(region: DesignRegion, config: OptimizationConfig, layout: Layout,
                     sharpness: float | None = None, objective=None) -> tuple[float, np.ndarray]:
    """Objective and ``df/dp`` at ``region.p`` (zero on frozen cells)."""
    lay = replace(layout, region=region)
    problem = DesignProblem(lay, config, objective)
    beta = config.sharpness_at(0) if sharpness is None else sharpness
    ev = problem.evaluate(problem.fill_from_p(region.p, beta))
    return ev.f, problem.p_grad(region.p, beta, ev.grad_fill)


def objective_value(region: DesignRegion, config: OptimizationConfig, layout: Layout,
                    sharpness: float | None = None, objective=None) -> float:
    lay = replace(layout, region=region)
    problem = DesignProblem(lay, config, objective)
    beta = config.sharpness_at(0) if sharpness is None else sharpness
    return problem.evaluate(problem.fill_from_p(region.p, beta), gradient=False).f


def initial_region(layout: Layout, config: OptimizationConfig) -> DesignRegion:
    region = layout.region
    rng = np.random.default_rng(config.seed)
    noise = config.init_noise * rng.uniform(-1.0, 1.0, size=region.shape)
    return region.with_p(region.p + noise)


@dataclass
class OptimizationResult:
    region: DesignRegion
    trace: OptimizationTrace
    eps_map: PermittivityMap
    smatrices: list
    f: float

    def __iter__(self):
        return iter((self.region, self.trace))


def run_optimization(layout: Layout, config: OptimizationConfig,
                     region: DesignRegion | None = None, objective=None) -> OptimizationResult:
    """Two-stage optimisation of ``region`` (default: the seeded initial design)."""
    region = initial_region(layout, config) if region is None else region
    problem = DesignProblem(replace(layout, region=region), config, objective)
    trace = OptimizationTrace()
    t0 = time.perf_counter()
    if config.total_iters == 0:
        # nothing to do: the design is returned as given
        return OptimizationResult(region, trace, problem.eps_map(region.p), [], float("nan"))

    state = _Stage1(problem, region, trace, t0).run()
    if config.levelset_iters > 0:
        return _Stage2(problem, state, trace, t0).run()
    beta = config.sharpness_at(config.continuous_iters)
    fill = problem.fill_from_p(state.p, beta)
    ev = problem.evaluate(fill, gradient=False)
    final = region.with_p(state.p)
    return OptimizationResult(final, trace, problem.eps_map(fill), ev.smatrices, ev.f)


class _Stage1:
    def __init__(self, problem: DesignProblem, region: DesignRegion, trace, t0):
        self.problem = problem
        self.region = region
        self.trace = trace
        self.t0 = t0
        self.p = region.p.copy()

    def _record(self, it, f, res, beta, accepted=True, stage="continuous"):
        self.trace.append(TraceRecord(it, stage, f, float(np.max(np.abs(res))),
                                      (time.perf_counter() - self.t0) * 1e3, beta, accepted))

    def run(self):
        cfg = self.problem.config
        pb = self.problem
        free = self.region.free
        f0 = None
        alpha = None
        prev = None  # (p, grad) for the BB step
        beta_prev = None
        for it in range(cfg.continuous_iters):
            beta = cfg.sharpness_at(it)
            if beta != beta_prev:
                ev = pb.evaluate(pb.fill_from_p(self.p, beta))
                grad = pb.p_grad(self.p, beta, ev.grad_fill)
                f = ev.f
                prev = None
                alpha = None
                beta_prev = beta
            if f0 is None:
                f0 = f
            gmax = float(np.max(np.abs(grad[free]))) if free.any() else 0.0
            if gmax < cfg.gtol:
                self.trace.converged = True
                self._record(it + 1, f, ev.residuals, beta)
                break
            if prev is not None:
                s = (self.p - prev[0])[free]
                y = (grad - prev[1])[free]
                sy = float(s @ y)
                alpha = float(s @ s) / sy if sy > 0 else alpha
            elif alpha is None:
                alpha = cfg.initial_step / gmax
            alpha = min(alpha, cfg.max_step / gmax)
            accepted = False
            for _ in range(cfg.max_backtracks + 1):
                trial = np.where(free, np.clip(self.p - alpha * grad, 0.0, 1.0), self.p)
                step = trial - self.p
                decrease = float(np.sum(grad * step))
                ev_t = pb.evaluate(pb.fill_from_p(trial, beta))
                if ev_t.f <= f + cfg.armijo_c * decrease and decrease < 0:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                prev = (self.p, grad)
                self.p = trial
                ev = ev_t
                grad = pb.p_grad(self.p, beta, ev.grad_fill)
                f = ev.f
            else:
                prev = None
            self._record(it + 1, f, ev.residuals, beta, accepted)
            log.info("iter %3d  continuous  beta=%5.1f  f=%.6f%s", it + 1, beta, f,
                     "" if accepted else "  (rejected)")
            if f > cfg.divergence_factor * f0:
                raise OptimizationDiverged(f"objective diverged at iteration {it + 1}", self.trace)
        self.beta = cfg.sharpness_at(max(cfg.continuous_iters - 1, 0))
        return self


class _Stage2:
    def __init__(self, problem: DesignProblem, stage1: _Stage1, trace, t0):
        self.problem = problem
        self.region = stage1.region
        self.trace = trace
        self.t0 = t0
        self.start_iter = len(trace.records)
        region = stage1.region
        lay = problem.layout
        fill = problem.fill_from_p(stage1.p, stage1.beta)
        full = lay.base.fill > 0.5
        full[region.slices] = fill > 0.5
        self.editable = np.zeros(lay.grid.shape, dtype=bool)
        self.editable[region.slices] = region.free
        self.solid = self._enforce(full)
        self.phi = signed_distance(self.solid)[region.slices]

    def _enforce(self, full_solid):
        cfg = self.problem.config
        return enforce_min_feature(full_solid, self.editable, cfg.min_feature,
                                   self.problem.layout.grid.dx)

    def _fill(self, solid):
        return solid[self.region.slices].astype(float)

    def _try_move(self, gv, g, band, editable, ev):
        """First Armijo-accepted level-set move along ``-gv``, or None."""
        pb = self.problem
        sl = self.region.slices
        # predicted decrease from flipping each cell; only positive ones can move
        benefit = np.where(self.solid[sl], gv, -gv)
        useful = band & (benefit > 0)
        if not useful.any():
            return None
        velocity = np.where(band, -gv / float(np.max(benefit[useful])), 0.0)
        for t in (2.0, 1.0, 0.75, 0.6, 0.52):
            phi_t = self.phi + t * velocity
            full = self.solid.copy()
            full[sl] = np.where(editable, phi_t > 0, self.solid[sl])
            full = self._enforce(full)
            if np.array_equal(full, self.solid):
                continue
            decrease = float(np.sum(g * (self._fill(full) - self._fill(self.solid))))
            if decrease >= 0:
                continue
            ev_t = pb.evaluate(self._fill(full))
            if ev_t.f <= ev.f + pb.config.armijo_c * decrease:
                return full, phi_t, ev_t
        return None

    def run(self):
        pb = self.problem
        cfg = pb.config
        sl = self.region.slices
        ev = pb.evaluate(self._fill(self.solid))
        f0 = ev.f
        it0 = self.start_iter
        since_reinit = 0
        for k in range(cfg.levelset_iters):
            it = it0 + k + 1
            g = ev.grad_fill
            editable = self.editable[sl]
            band = editable & (np.abs(self.phi) <= 1.5)
            accepted = False
            # the filter-smoothed velocity moves whole features, the raw one single cells
            for gv in (pb.filter(g), g):
                trial = self._try_move(gv, g, band, editable, ev)
                if trial is not None:
                    accepted = True
                    full, phi_t, ev = trial
                    changed = not np.array_equal(full[sl] & editable, (phi_t > 0) & editable)
                    self.solid = full
                    since_reinit += 1
                    if changed or since_reinit >= cfg.reinit_every:
                        self.phi = signed_distance(self.solid)[sl]
                        since_reinit = 0
                    else:
                        self.phi = phi_t
                    break
            self.trace.append(TraceRecord(
                it, "levelset", ev.f, float(np.max(np.abs(ev.residuals))),
                (time.perf_counter() - self.t0) * 1e3, float("inf"), accepted))
            log.info("iter %3d  levelset  f=%.6f%s", it, ev.f, "" if accepted else "  (no move)")
            if ev.f > cfg.divergence_factor * f0:
                raise OptimizationDiverged(f"objective diverged at iteration {it}", self.trace)
            if not accepted:
                # reinitialise and retry once from a clean distance field
                if since_reinit == 0:
                    self.trace.converged = True
                    break
                self.phi = signed_distance(self.solid)[sl]
                since_reinit = 0

        fill = self._fill(self.solid)
        final = self.region.with_p(np.where(self.region.frozen, self.region.p, fill))
        report = check_min_feature(self.solid, cfg.min_feature, pb.layout.grid.dx)
        if not report.passed:
            log.warning("final design has %d minimum-feature violations", len(report))
        return OptimizationResult(final, self.trace, pb.eps_map(fill), ev.smatrices, ev.f)


@dataclass
class GradientCheck:
    """Adjoint versus central-difference derivatives on sampled cells."""

    cells: np.ndarray  # (k, 2) region indices
    adjoint: np.ndarray
    finite_difference: np.ndarray
    step: float
    f: float

    @property
    def rel_error(self) -> np.ndarray:
        fd = self.finite_difference
        return np.abs(self.adjoint - fd) / np.maximum(np.abs(fd), 1e-12)

    @property
    def max_error(self) -> float:
        return float(np.max(self.rel_error)) if len(self.cells) else 0.0

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_error <= tol


def validate_gradient(layout: Layout, config: OptimizationConfig, samples: int = 20,
                      step: float = 1e-4, sharpness: float = 4.0, seed: int = 0,
                      objective=None) -> GradientCheck:
    """Compare ``df/dp`` from one adjoint evaluation with central differences.

    ``p`` is drawn uniformly from [0.1, 0.9] so that ``p +- step`` stays
    inside the box; ``samples`` distinct free cells are checked.
    """
    rng = np.random.default_rng(seed)
    region = layout.region
    region = region.with_p(np.where(region.frozen, region.p, rng.uniform(0.1, 0.9, region.shape)))
    f, grad = adjoint_gradient(region, config, layout, sharpness, objective)
    free = np.argwhere(region.free)
    pick = rng.choice(len(free), size=min(samples, len(free)), replace=False)
    cells = free[np.sort(pick)]
    fd = np.zeros(len(cells))
    for k, (i, j) in enumerate(cells):
        p = region.p.copy()
        p[i, j] += step
        fp = objective_value(region.with_p(p), config, layout, sharpness, objective)
        p[i, j] -= 2 * step
        fm = objective_value(region.with_p(p), config, layout, sharpness, objective)
        fd[k] = (fp - fm) / (2 * step)
    adj = np.array([grad[i, j] for i, j in cells])
    return GradientCheck(cells, adj, fd, step, f)
