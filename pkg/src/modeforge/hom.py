"""Two-photon interference on a general beamsplitter.

The transfer matrix relates input fields ``E1, E2`` to outputs ``E3, E4``::

    E3 = t1 E1 + r2 exp(i theta2) E2
    E4 = r1 exp(i theta1) E1 + t2 exp(i theta3) E2

and the coincidence rate at delay ``tau`` is

    P(tau) = r1^2 r2^2 + t1^2 t2^2 + 2 r1 r2 t1 t2 cos(alpha) I(tau)

with ``alpha = theta1 + theta2 - theta3``. The module also generates synthetic
coincidence scans with Poisson counts and fits a triangular dip to them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import ConfigurationError, FitError, UndefinedQuantityError
from .fdfd import ScatteringMatrix

PASSIVITY_TOL = 1e-6
DEFAULT_WIDTH = 2.3e-12
# narrowest dip the fit may use, as a fraction of the scanned delay range
MIN_WIDTH_FRACTION = 0.1


def wrap_phase(a):
    """Reduce to (-pi, pi]."""
    a = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2 * np.pi)
    return float(a) if np.ndim(a) == 0 else a


def phase_distance(a, b) -> float:
    """Smallest absolute angular difference between ``a`` and ``b``."""
    return abs(float(np.angle(np.exp(1j * (a - b)))))


@dataclass(frozen=True)
class BeamsplitterMatrix:
    t1: float
    t2: float
    r1: float
    r2: float
    theta1: float = 0.0
    theta2: float = 0.0
    theta3: float = 0.0

    def __post_init__(self):
        vals = (self.t1, self.t2, self.r1, self.r2, self.theta1, self.theta2, self.theta3)
        if not all(np.isfinite(v) for v in vals):
            raise ConfigurationError("beamsplitter parameters must be finite")
        for name in ("t1", "t2", "r1", "r2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0 + PASSIVITY_TOL:
                raise ConfigurationError(f"{name}={v} outside [0, 1]")
        for t, r, i in ((self.t1, self.r1, 1), (self.t2, self.r2, 2)):
            if t * t + r * r > 1.0 + PASSIVITY_TOL:
                raise ConfigurationError(f"t{i}^2 + r{i}^2 = {t * t + r * r:.8f} exceeds 1")

    @classmethod
    def from_eta(cls, eta: float, alpha: float = np.pi) -> "BeamsplitterMatrix":
        """Symmetric lossless splitter with splitting ratio ``eta`` and phase ``alpha``."""
        if not 0.0 <= eta <= 1.0:
            raise ConfigurationError(f"eta={eta} outside [0, 1]")
        t, r = np.sqrt(eta), np.sqrt(1.0 - eta)
        return cls(t, t, r, r, float(alpha), 0.0, 0.0)

    @classmethod
    def from_complex(cls, s31, s41, s32, s42) -> "BeamsplitterMatrix":
        """Magnitudes and relative phases, with the global phase making ``s31`` real."""
        s = np.array([s31, s41, s32, s42], dtype=complex)
        ref = np.angle(s[0]) if s[0] != 0 else 0.0
        rot = s * np.exp(-1j * ref)
        mags = np.abs(s)
        phases = [float(np.angle(z)) if abs(z) > 0 else 0.0 for z in rot]
        return cls(float(mags[0]), float(mags[3]), float(mags[1]), float(mags[2]),
                   phases[1], phases[2], phases[3])

    @property
    def alpha(self) -> float:
        a = wrap_phase(self.theta1 + self.theta2 - self.theta3)
        # keep the lossless value on the pi side of the branch cut
        return np.pi if a <= -np.pi + 1e-12 else a

    @property
    def t0(self) -> float:
        return float(np.sqrt(self.t1 * self.t2))

    @property
    def r0(self) -> float:
        return float(np.sqrt(self.r1 * self.r2))

    @property
    def eta_eff(self) -> float:
        return effective_splitting_ratio(self)

    @property
    def matrix(self) -> np.ndarray:
        """2x2 transfer matrix, rows = outputs (3, 4), columns = inputs (1, 2)."""
        return np.array([
            [self.t1, self.r2 * np.exp(1j * self.theta2)],
            [self.r1 * np.exp(1j * self.theta1), self.t2 * np.exp(1j * self.theta3)],
        ])

    @property
    def p_inf(self) -> float:
        """Coincidence probability for distinguishable photons."""
        return (self.r1 * self.r2) ** 2 + (self.t1 * self.t2) ** 2


def from_smatrix(s: ScatteringMatrix, sources=(1, 2), monitors=(3, 4),
                 tol: float = PASSIVITY_TOL) -> BeamsplitterMatrix:
    """Map a two-mode S-matrix onto :class:`BeamsplitterMatrix`.

    ``t1 = |S31|``, ``r1 exp(i theta1) = S41``, ``r2 exp(i theta2) = S32`` and
    ``t2 exp(i theta3) = S42`` after rotating the global phase so that ``S31``
    is real and positive. Port ids default to the beamsplitter layout.
    """
    s1, s2 = sources
    m3, m4 = monitors
    for src in sources:
        power = abs(s[m3, src]) ** 2 + abs(s[m4, src]) ** 2
        if power > 1.0 + tol:
            raise ConfigurationError(
                f"source {src} carries power {power:.8f} > 1 at "
                f"{s.wavelength * 1e9:.1f} nm; not a passive device")
    return BeamsplitterMatrix.from_complex(s[m3, s1], s[m4, s1], s[m3, s2], s[m4, s2])


def effective_splitting_ratio(bs: BeamsplitterMatrix) -> float:
    """``t0^2 / (r0^2 + t0^2)``."""
    t0sq = bs.t1 * bs.t2
    r0sq = bs.r1 * bs.r2
    if t0sq + r0sq <= 0:
        raise UndefinedQuantityError("splitting ratio undefined: t1 t2 + r1 r2 = 0")
    return float(t0sq / (t0sq + r0sq))


@dataclass(frozen=True)
class OverlapModel:
    """Two-photon overlap versus delay; ``width`` in seconds."""

    kind: str = "triangular"
    peak: float = 1.0
    width: float = DEFAULT_WIDTH

    def __post_init__(self):
        if self.kind not in ("triangular", "gaussian"):
            raise ConfigurationError(f"unknown overlap kind {self.kind!r}")
        if not 0.0 <= self.peak <= 1.0:
            raise ConfigurationError(f"overlap peak {self.peak} outside [0, 1]")
        if not self.width > 0:
            raise ConfigurationError("overlap width must be positive")

    def __call__(self, tau):
        return overlap_value(self, tau)


def overlap_value(model: OverlapModel, tau):
    tau = np.asarray(tau, dtype=float)
    if model.kind == "triangular":
        out = model.peak * np.maximum(0.0, 1.0 - np.abs(tau) / model.width)
    else:
        out = model.peak * np.exp(-tau**2 / (2.0 * model.width**2))
    return float(out) if out.ndim == 0 else out


def coincidence_probability(bs: BeamsplitterMatrix, overlap: OverlapModel, tau):
    """Coincidence probability at delay ``tau`` (scalar or array, seconds)."""
    cross = 2.0 * bs.r1 * bs.r2 * bs.t1 * bs.t2 * np.cos(bs.alpha)
    p = bs.p_inf + cross * np.asarray(overlap_value(overlap, tau))
    # rounding can push an exact zero slightly negative
    p = np.clip(p, 0.0, 1.0)
    return float(p) if np.ndim(p) == 0 else p


def visibility(eta: float, alpha: float, i0: float) -> float:
    """``-2 eta (1 - eta) cos(alpha) I0 / (1 - 2 eta + 2 eta^2)``."""
    denom = 1.0 - 2.0 * eta + 2.0 * eta * eta
    if denom <= 0:
        raise UndefinedQuantityError("visibility undefined")
    return float(-2.0 * eta * (1.0 - eta) * np.cos(alpha) * i0 / denom)


def predict_visibility(bs: BeamsplitterMatrix, i0: float) -> float:
    """Dip visibility ``(P_inf - P_0) / P_inf`` in closed form."""
    if bs.p_inf <= 0:
        raise UndefinedQuantityError("visibility undefined: P_inf = 0")
    return visibility(effective_splitting_ratio(bs), bs.alpha, i0)


# -- coincidence scans ------------------------------------------------------------


@dataclass(frozen=True)
class CoincidenceScan:
    """Coincidence counts versus delay. Delays are stored in picoseconds so that
    the text format round-trips exactly."""

    tau_ps: np.ndarray
    counts: np.ndarray
    integration_s: float = 1.0
    window_ns: float = 2.0

    def __post_init__(self):
        tau = np.array(self.tau_ps, dtype=float)
        counts = np.array(self.counts)
        if tau.ndim != 1 or tau.shape != counts.shape:
            raise ConfigurationError("tau and counts must be 1D arrays of equal length")
        if not np.all(np.isfinite(tau)):
            raise ConfigurationError("delays must be finite")
        if np.any(np.diff(tau) <= 0):
            raise ConfigurationError("delays must be strictly increasing")
        if counts.size and (np.any(counts < 0) or np.any(counts != np.round(counts))):
            raise ConfigurationError("counts must be non-negative integers")
        if self.integration_s < 0 or self.window_ns <= 0:
            raise ConfigurationError("integration time must be >= 0 and window > 0")
        counts = counts.astype(np.int64)
        tau.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "tau_ps", tau)
        object.__setattr__(self, "counts", counts)

    @property
    def tau(self) -> np.ndarray:
        return self.tau_ps * 1e-12

    @property
    def integration_time(self) -> float:
        return self.integration_s

    @property
    def coincidence_window(self) -> float:
        return self.window_ns * 1e-9

    @property
    def points(self):
        return list(zip(self.tau.tolist(), self.counts.tolist()))

    def __len__(self):
        return len(self.tau_ps)

    def __eq__(self, other):
        if not isinstance(other, CoincidenceScan):
            return NotImplemented
        return (np.array_equal(self.tau_ps, other.tau_ps)
                and np.array_equal(self.counts, other.counts)
                and self.integration_s == other.integration_s
                and self.window_ns == other.window_ns)


@dataclass(frozen=True)
class ScanProtocol:
    """Delay schedule: coarse steps over ``+-half_range`` with a fine cluster
    of ``fine_points`` evenly spaced over ``+-fine_half`` (all in ps)."""

    half_range_ps: float = 5.0
    coarse_step_ps: float = 0.1
    fine_half_ps: float = 0.2
    fine_points: int = 13
    integration_s: float = 1.0
    window_ns: float = 2.0

    def __post_init__(self):
        if self.coarse_step_ps <= 0 or self.half_range_ps <= 0:
            raise ConfigurationError("scan range and step must be positive")
        if self.fine_points < 0 or self.fine_half_ps < 0 or self.fine_half_ps >= self.half_range_ps:
            raise ConfigurationError("fine cluster must lie inside the scan range")
        if self.integration_s < 0:
            raise ConfigurationError("integration time must be >= 0")

    def delays_ps(self) -> np.ndarray:
        n = int(round(self.half_range_ps / self.coarse_step_ps))
        coarse = np.round(np.arange(-n, n + 1) * self.coarse_step_ps, 9)
        if self.fine_points == 0:
            return coarse
        fine = np.linspace(-self.fine_half_ps, self.fine_half_ps, self.fine_points)
        keep = np.abs(coarse) > self.fine_half_ps + 1e-9
        return np.sort(np.concatenate([coarse[keep], fine]))


def rate_for_baseline(bs: BeamsplitterMatrix, baseline: float, integration_s: float = 1.0) -> float:
    """Detected pair rate giving ``baseline`` mean counts per bin outside the dip."""
    if bs.p_inf <= 0 or integration_s <= 0:
        raise UndefinedQuantityError("baseline undefined for P_inf = 0 or zero integration")
    return baseline / (integration_s * bs.p_inf)


def simulate_scan(bs: BeamsplitterMatrix, overlap: OverlapModel,
                  protocol: ScanProtocol = ScanProtocol(), rate: float = 7000.0,
                  seed: int = 0) -> CoincidenceScan:
    """Poisson counts with mean ``rate * integration_s * P(tau)`` at every delay.

    ``rate`` is an effective detected-pair rate (losses folded in), so the
    baseline mean is ``rate * integration_s * P_inf``. Uses numpy's PCG64
    generator seeded with ``seed``.
    """
    if not rate > 0:
        raise ConfigurationError("rate must be positive")
    tau_ps = protocol.delays_ps()
    mean = rate * protocol.integration_s * coincidence_probability(bs, overlap, tau_ps * 1e-12)
    rng = np.random.default_rng(seed)
    counts = rng.poisson(mean)
    return CoincidenceScan(tau_ps, counts, protocol.integration_s, protocol.window_ns)


# -- dip fitting ----------------------------------------------------------------------


@dataclass
class DipFit:
    """Triangular-dip fit; ``tau0`` and ``width`` in seconds."""

    baseline: float
    visibility: float
    tau0: float
    width: float
    errors: dict = field(default_factory=dict)  # standard errors, same keys
    chi2: float = 0.0
    dof: int = 0
    iterations: int = 0
    flag: str = "ok"

    @property
    def sigma_v(self) -> float:
        return self.errors.get("visibility", float("nan"))

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else float("nan")

    def model(self, tau):
        return dip_model(np.asarray(tau, dtype=float) * 1e12, self.baseline, self.visibility,
                         self.tau0 * 1e12, self.width * 1e12)


def dip_model(tau_ps, baseline, vis, tau0_ps, width_ps):
    return baseline * (1.0 - vis * np.maximum(0.0, 1.0 - np.abs(tau_ps - tau0_ps) / width_ps))


def _dip_jacobian(tau_ps, params):
    nbar, vis, t0, w = params
    u = tau_ps - t0
    tri = np.maximum(0.0, 1.0 - np.abs(u) / w)
    inside = np.abs(u) < w
    jac = np.zeros((tau_ps.size, 4))
    jac[:, 0] = 1.0 - vis * tri
    jac[:, 1] = -nbar * tri
    # one-sided derivative at the apex keeps the kink harmless
    jac[:, 2] = np.where(inside, -nbar * vis * np.sign(u) / w, 0.0)
    jac[:, 3] = np.where(inside, -nbar * vis * np.abs(u) / w**2, 0.0)
    return jac


def _start_values(tau, counts):
    n = tau.size
    order = np.argsort(np.abs(tau - 0.5 * (tau[0] + tau[-1])))
    outer = order[int(np.ceil(0.8 * n)):]
    nbar = float(np.mean(counts[outer]))
    k = int(np.argmin(counts))
    t0 = float(tau[k])
    vis = float(np.clip(1.0 - counts[k] / nbar, -0.99, 0.99)) if nbar > 0 else 0.0
    half = nbar * (1.0 - 0.5 * vis)
    # half-width at half-depth, walking outward from the minimum
    right = next((tau[j] for j in range(k, n) if counts[j] >= half), tau[-1])
    left = next((tau[j] for j in range(k, -1, -1) if counts[j] >= half), tau[0])
    hwhd = 0.5 * (right - left)
    return np.array([nbar, vis, t0, max(2.0 * hwhd, 3.0 * np.min(np.diff(tau)))])


def fit_dip(scan: CoincidenceScan, min_width_ps: float | None = None, max_rounds: int = 50,
            rtol: float = 1e-9) -> DipFit:
    """Poisson-weighted least-squares fit of ``N (1 - V max(0, 1 - |tau - tau0| / w))``.

    Weights ``1 / model`` are refreshed from the current model until the
    parameters settle (iteratively reweighted least squares, whose fixed point
    is the Poisson maximum-likelihood estimate). Standard errors come from the
    inverse Fisher information at the solution.
    """
    tau = scan.tau_ps
    counts = scan.counts.astype(float)
    if tau.size < 10:
        raise FitError("need at least 10 points to fit a dip", {"points": int(tau.size)})
    dof = tau.size - 4
    if np.all(counts == counts[0]):
        big = float("inf")
        return DipFit(float(counts[0]), 0.0, float(np.mean(tau)) * 1e-12,
                      float(tau[-1] - tau[0]) * 1e-12,
                      {"baseline": 0.0, "visibility": big, "tau0": big, "width": big},
                      0.0, dof, 0, "degenerate")
    if np.all(counts == 0):
        raise FitError("all counts are zero")

    span = float(tau[-1] - tau[0])
    if min_width_ps is None:
        min_width_ps = MIN_WIDTH_FRACTION * span
    lo = np.array([1e-9, -1.0, tau[0], float(min_width_ps)])
    hi = np.array([np.inf, 1.0, tau[-1], span])
    params = np.clip(_start_values(tau, counts), lo, hi)
    weights = 1.0 / np.maximum(counts, 1.0)
    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        sw = np.sqrt(weights)

        def resid(p):
            return sw * (dip_model(tau, *p) - counts)

        def jac(p):
            return sw[:, None] * _dip_jacobian(tau, p)

        sol = least_squares(resid, params, jac=jac, bounds=(lo, hi), method="trf",
                            x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        if not np.all(np.isfinite(sol.x)):
            raise FitError("fit produced non-finite parameters", {"status": sol.status})
        params = sol.x
        model = np.maximum(dip_model(tau, *params), 1e-12)
        # converge on the fitted curve: tau0 and w are unidentifiable when V ~ 0
        step = float(np.max(np.abs(1.0 / model - weights) / weights))
        weights = 1.0 / model
        if step < rtol and rounds > 1:
            converged = True
            break
    flag = "ok" if converged else "slow"
    if not converged and step > 1e-6:
        raise FitError("reweighted fit did not converge",
                       {"rounds": rounds, "params": params.tolist(), "status": int(sol.status)})

    model = dip_model(tau, *params)
    jac_m = _dip_jacobian(tau, params)
    fisher = jac_m.T @ (jac_m / np.maximum(model, 1e-12)[:, None])
    cov = np.linalg.pinv(fisher)
    err = np.sqrt(np.maximum(np.diag(cov), 0.0))
    chi2 = float(np.sum((counts - model) ** 2 / np.maximum(model, 1e-12)))
    nbar, vis, t0, w = params
    return DipFit(float(nbar), float(vis), float(t0) * 1e-12, float(w) * 1e-12,
                  {"baseline": float(err[0]), "visibility": float(err[1]),
                   "tau0": float(err[2]) * 1e-12, "width": float(err[3]) * 1e-12},
                  chi2, dof, rounds, flag)


def ingest_scan(path):
    from .io import read_scan

    return read_scan(path)
