"""1D transverse eigenmode solver for the scalar (out-of-plane field) Helmholtz
equation, plus the effective-index reduction of the 220 nm SOI stack.

Modes are normalised in the discrete L2 sense, ``sum(field**2) * dx == 1``.
The power carried by a mode of unit L2 norm is proportional to ``power_norm``
(``n_eff`` in the continuum; the FDFD solver substitutes the exact discrete
flux weight of its own propagation stencil).
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import ConfigurationError, NoGuidedModeError, PreconditionError

N_SI = 3.476
N_SIO2 = 1.444
N_PMMA = 1.48

SLAB_THICKNESS = 220e-9
# Sample pitch for the vertical slab solve; second-order error is ~6e-7 in n_eff.
SLAB_DX = 0.25e-9
SLAB_PAD = 3.0e-6

WAVELENGTH_RANGE = (1.4e-6, 1.7e-6)


@dataclass(frozen=True)
class IndexProfile1D:
    """Piecewise-constant refractive index sampled at ``x0 + (k + 0.5) * dx``."""

    n: np.ndarray
    dx: float
    x0: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float)
        object.__setattr__(self, "n", n)
        if n.ndim != 1 or n.size < 3:
            raise ConfigurationError("index profile must be 1D with >= 3 samples")
        if self.dx <= 0:
            raise ConfigurationError("dx must be positive")
        if np.any(n < 1.0) or not np.all(np.isfinite(n)):
            raise ConfigurationError("refractive index must be finite and >= 1")

    @property
    def extent(self) -> float:
        return self.n.size * self.dx

    @property
    def x(self) -> np.ndarray:
        return self.x0 + (np.arange(self.n.size) + 0.5) * self.dx

    @classmethod
    def layers(cls, thicknesses, indices, dx, pad, n_below, n_above):
        """Stack of layers with semi-infinite claddings truncated at ``pad``."""
        core = float(np.sum(thicknesses))
        count = int(round((core + 2 * pad) / dx))
        x = (np.arange(count) + 0.5) * dx - pad
        n = np.full(count, float(n_below))
        n[x >= core] = n_above
        edge = 0.0
        for t, idx in zip(thicknesses, indices):
            n[(x >= edge) & (x < edge + t)] = idx
            edge += t
        return cls(n=n, dx=dx, x0=-pad)


@dataclass(frozen=True)
class ModeProfile:
    mode_order: int
    n_eff: float
    field: np.ndarray
    dx: float
    wavelength: float
    power_norm: float = field(default=0.0)
    x0: float = 0.0

    def __post_init__(self):
        if not self.power_norm:
            object.__setattr__(self, "power_norm", float(self.n_eff))

    @property
    def beta_sq(self) -> float:
        k0 = 2 * np.pi / self.wavelength
        return (k0 * self.n_eff) ** 2

    @property
    def x(self) -> np.ndarray:
        return self.x0 + (np.arange(self.field.size) + 0.5) * self.dx


def sign_changes(values, rel_tol=1e-6) -> int:
    v = np.asarray(values).real
    v = v[np.abs(v) > rel_tol * np.max(np.abs(v))]
    return int(np.count_nonzero(np.diff(np.sign(v)) != 0))


def _tridiagonal(n, dx, k0):
    diag = -2.0 / dx**2 + (k0 * n) ** 2
    off = np.full(n.size - 1, 1.0 / dx**2)
    return diag, off


def solve_slab_modes(profile: IndexProfile1D, wavelength: float, count: int = 2,
                     resolution: float = 20.0) -> list[ModeProfile]:
    """Guided modes of ``profile`` sorted by descending effective index.

    Discretises ``E'' + k0^2 n^2 E = beta^2 E`` with a three-point stencil and
    zero field one sample beyond each end of the window.

    Parameters
    ----------
    profile : IndexProfile1D
    wavelength : float
        Free-space wavelength in metres.
    count : int
        Maximum number of modes to return.
    resolution : float
        Minimum samples per material wavelength; ``dx <= wavelength / (resolution * n_max)``.

    Returns
    -------
    list of ModeProfile
        Possibly fewer than ``count``. Raises :class:`NoGuidedModeError` when
        the profile guides nothing.
    """
    if count < 1:
        raise PreconditionError("count must be >= 1")
    if wavelength <= 0:
        raise PreconditionError("wavelength must be positive")
    n = profile.n
    n_max = float(n.max())
    if profile.dx > wavelength / (resolution * n_max) * (1 + 1e-12):
        raise ConfigurationError(
            f"dx={profile.dx:.3e} m exceeds the resolution guard "
            f"lambda/({resolution:g} n_max)={wavelength / (resolution * n_max):.3e} m")
    if n_max <= n.min():
        raise NoGuidedModeError("uniform index profile cannot guide")

    k0 = 2 * np.pi / wavelength
    size = n.size
    count = min(count, size)
    diag, off = _tridiagonal(n, profile.dx, k0)
    vals, vecs = eigh_tridiagonal(diag, off, select="i",
                                  select_range=(size - count, size - 1))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]

    n_clad = max(n[0], n[-1])
    modes = []
    for j, beta_sq in enumerate(vals):
        if beta_sq <= (k0 * n_clad) ** 2:
            break
        v = vecs[:, j] / np.sqrt(profile.dx)
        # Deterministic sign: first significant sample positive.
        first = np.flatnonzero(np.abs(v) > 1e-3 * np.abs(v).max())[0]
        if v[first] < 0:
            v = -v
        modes.append(ModeProfile(
            mode_order=j, n_eff=float(np.sqrt(beta_sq) / k0), field=v,
            dx=profile.dx, wavelength=wavelength, x0=profile.x0))
    if not modes:
        raise NoGuidedModeError(
            f"no guided mode at wavelength {wavelength * 1e9:.1f} nm")
    return modes


def eigen_residual(profile: IndexProfile1D, mode: ModeProfile) -> float:
    """Relative residual of the discrete eigenproblem for ``mode``."""
    k0 = 2 * np.pi / mode.wavelength
    diag, off = _tridiagonal(profile.n, profile.dx, k0)
    v = mode.field
    tv = diag * v
    tv[:-1] += off * v[1:]
    tv[1:] += off * v[:-1]
    lam = mode.beta_sq
    return float(np.linalg.norm(tv - lam * v) / (abs(lam) * np.linalg.norm(v)))


@dataclass(frozen=True)
class Materials:
    """Layer indices of the SOI stack; the defaults are standard 1550 nm values."""

    n_core: float = N_SI
    n_box: float = N_SIO2
    n_top: float = N_PMMA
    thickness: float = SLAB_THICKNESS

    @property
    def eps_clad(self) -> float:
        # etched regions are PMMA-filled
        return self.n_top**2

    def n_core_eff(self, wavelength: float) -> float:
        return effective_core_index(wavelength, self)

    def eps_core(self, wavelength: float) -> float:
        return self.n_core_eff(wavelength) ** 2


DEFAULT_MATERIALS = Materials()


def effective_core_index(wavelength: float, materials: Materials = DEFAULT_MATERIALS,
                         dx: float = SLAB_DX) -> float:
    """Fundamental TE effective index of the silicon slab at ``wavelength``."""
    lo, hi = WAVELENGTH_RANGE
    if not lo <= wavelength <= hi:
        raise ConfigurationError(
            f"wavelength {wavelength * 1e9:.1f} nm outside tabulated range "
            f"{lo * 1e9:.0f}-{hi * 1e9:.0f} nm")
    return _effective_core_index(round(wavelength, 15), materials, dx)


@functools.lru_cache(maxsize=256)
def _effective_core_index(wavelength, materials, dx):
    if materials.n_box == materials.n_core and materials.n_top == materials.n_core:
        return float(materials.n_core)
    profile = IndexProfile1D.layers(
        [materials.thickness], [materials.n_core], dx, SLAB_PAD,
        materials.n_box, materials.n_top)
    return solve_slab_modes(profile, wavelength, count=1)[0].n_eff
