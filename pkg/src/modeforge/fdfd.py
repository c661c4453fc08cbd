"""2D finite-difference frequency-domain solver for the out-of-plane field.

The discretised operator is

    A = Sx^-1 Dxb Sxh^-1 Dxf + Sy^-1 Dyb Syh^-1 Dyf + k0^2 diag(eps)

on a uniform node grid with cell-centred permittivity samples (node ``(i, j)``
sits at ``origin + (i, j) * dx``) and stretched-coordinate PML factors
``s = 1 + i sigma_max (depth / thickness)**order`` on all four sides. Fields
carry ``exp(-i omega t)``, so ``exp(+i k x)`` travels toward +x.

Port modes are eigenvectors of the same discrete transverse operator, injected
with a two-plane one-sided source and measured with a two-plane forward/backward
decomposition. S-parameters are ratios of power-normalised amplitudes.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, NoGuidedModeError, PreconditionError, SolverError
from .modes import IndexProfile1D, Materials, ModeProfile, solve_slab_modes

RESIDUAL_TARGET = 1e-8
RESOLUTION_CELLS = 10.0


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    dx: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ConfigurationError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if not self.dx > 0:
            raise ConfigurationError("dx must be positive")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def check_resolution(self, wavelength: float, n_max: float) -> None:
        limit = wavelength / (RESOLUTION_CELLS * n_max)
        if self.dx > limit * (1 + 1e-12):
            raise ConfigurationError(
                f"dx={self.dx * 1e9:.2f} nm violates resolution guard "
                f"lambda/(10 n_max)={limit * 1e9:.2f} nm at {wavelength * 1e9:.1f} nm")


@dataclass(frozen=True)
class PermittivityMap:
    """Relative permittivity per cell, ``eps[ix, iy]``.

    ``eps_clad`` and ``eps_core`` are the two material endpoints; a map whose
    cells all sit on an endpoint is *binarised*.
    """

    grid: Grid2D
    eps: np.ndarray
    eps_core: float
    eps_clad: float = 1.0

    def __post_init__(self):
        eps = np.array(self.eps, dtype=float)
        eps.setflags(write=False)
        object.__setattr__(self, "eps", eps)
        if eps.shape != self.grid.shape:
            raise ConfigurationError(f"eps shape {eps.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(eps)):
            raise ConfigurationError("permittivity contains NaN or Inf")
        tol = 1e-9 * self.eps_core
        if eps.min() < 1.0 - tol or eps.max() > self.eps_core + tol:
            raise ConfigurationError(
                f"permittivity outside [1, eps_core={self.eps_core:.4f}]: "
                f"[{eps.min():.4f}, {eps.max():.4f}]")
        if not 1.0 <= self.eps_clad <= self.eps_core:
            raise ConfigurationError("need 1 <= eps_clad <= eps_core")

    @property
    def fill(self) -> np.ndarray:
        """Material fraction per cell (0 = cladding, 1 = core)."""
        return (self.eps - self.eps_clad) / (self.eps_core - self.eps_clad)

    def is_binary(self, tol: float = 0.01) -> bool:
        f = self.fill
        return bool(np.all((np.abs(f) <= tol) | (np.abs(f - 1) <= tol)))

    def with_fill(self, fill: np.ndarray) -> "PermittivityMap":
        fill = np.clip(fill, 0.0, 1.0)
        eps = self.eps_clad + (self.eps_core - self.eps_clad) * fill
        return replace(self, eps=eps)

    def rescaled(self, eps_core: float, eps_clad: float | None = None) -> "PermittivityMap":
        """Same geometry with new material endpoints (dispersion)."""
        eps_clad = self.eps_clad if eps_clad is None else eps_clad
        if eps_core == self.eps_core and eps_clad == self.eps_clad:
            return self
        eps = eps_clad + (eps_core - eps_clad) * self.fill
        return PermittivityMap(self.grid, eps, eps_core, eps_clad)


@dataclass(frozen=True)
class PmlSpec:
    thickness: int = 12
    sigma_max: float = 3.0
    order: float = 2.0

    def __post_init__(self):
        if self.thickness < 8:
            raise ConfigurationError("PML thickness must be >= 8 cells")
        if not self.sigma_max > 0:
            raise ConfigurationError("PML sigma_max must be positive")
        if not 2 <= self.order <= 4:
            raise ConfigurationError("PML grading order must lie in [2, 4]")

    def stretch(self, n: int, positions: np.ndarray) -> np.ndarray:
        t = self.thickness
        depth = np.maximum(np.maximum(t - positions, positions - (n - 1 - t)), 0.0) / t
        return 1.0 + 1j * self.sigma_max * depth**self.order


@dataclass(frozen=True)
class Port:
    """Mode port on the line ``axis = index`` spanning cells ``span[0]:span[1]``.

    ``direction`` is the propagation sense the port launches (as a source) and
    measures (as a monitor). ``role`` is ``"source"`` or ``"monitor"``.
    """

    id: int
    axis: str
    index: int
    span: tuple[int, int]
    direction: int
    mode_order: int = 0
    role: str = "monitor"

    def __post_init__(self):
        if self.axis not in ("x", "y"):
            raise ConfigurationError("port axis must be 'x' or 'y'")
        if self.direction not in (1, -1):
            raise ConfigurationError("port direction must be +1 or -1")
        if self.role not in ("source", "monitor"):
            raise ConfigurationError("port role must be 'source' or 'monitor'")
        if self.mode_order < 0:
            raise ConfigurationError("mode_order must be >= 0")
        object.__setattr__(self, "span", (int(self.span[0]), int(self.span[1])))

    def reversed(self, role: str | None = None) -> "Port":
        flip = {"source": "monitor", "monitor": "source"}
        return replace(self, direction=-self.direction, role=role or flip[self.role])

    def validate(self, grid: Grid2D, pml: PmlSpec) -> None:
        n_long, n_trans = (grid.nx, grid.ny) if self.axis == "x" else (grid.ny, grid.nx)
        t = pml.thickness
        lo, hi = self.span
        if not (t < lo and hi <= n_trans - t - 1 and hi - lo >= 3):
            raise ConfigurationError(
                f"port {self.id} span {self.span} not strictly inside the non-PML interior")
        if not (t < self.index - 1 and self.index + 1 < n_long - t - 1):
            raise ConfigurationError(f"port {self.id} plane {self.index} too close to the PML")


@dataclass(frozen=True)
class PortMode:
    """A port's mode on the FDFD grid with its discrete propagation data."""

    port: Port
    profile: ModeProfile
    phase_step: float  # discrete propagation phase per cell, k_d * dx
    flux: float        # discrete power weight sin(k_d dx) / (k0 dx)

    @property
    def field(self) -> np.ndarray:
        return self.profile.field


def _line(arr: np.ndarray, port: Port, index: int) -> np.ndarray:
    lo, hi = port.span
    return arr[index, lo:hi] if port.axis == "x" else arr[lo:hi, index]


def port_mode(eps_map: PermittivityMap, port: Port, wavelength: float) -> PortMode:
    """Solve the port's cross-section on the FDFD grid."""
    grid = eps_map.grid
    line = _line(eps_map.eps, port, port.index)
    profile = IndexProfile1D(np.sqrt(line), grid.dx)
    try:
        modes = solve_slab_modes(profile, wavelength, count=port.mode_order + 1,
                                 resolution=RESOLUTION_CELLS)
    except NoGuidedModeError as exc:
        raise NoGuidedModeError(f"port {port.id}: {exc}") from None
    if len(modes) <= port.mode_order:
        raise NoGuidedModeError(
            f"port {port.id}: mode order {port.mode_order} not guided "
            f"({len(modes)} guided modes)")
    mode = modes[port.mode_order]
    k0 = 2 * np.pi / wavelength
    cos_k = 1.0 - mode.beta_sq * grid.dx**2 / 2.0
    if not -1.0 < cos_k < 1.0:
        raise ConfigurationError(f"port {port.id}: mode is evanescent on this grid")
    step = float(np.arccos(cos_k))
    return PortMode(port, mode, step, float(np.sin(step) / (k0 * grid.dx)))


@dataclass
class LinearSystem:
    """Assembled operator; immutable after construction, factorised once on demand."""

    matrix: sp.csc_matrix
    grid: Grid2D
    wavelength: float
    pml: PmlSpec
    _lu: object = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def k0(self) -> float:
        return 2 * np.pi / self.wavelength

    @property
    def lu(self):
        with self._lock:
            if self._lu is None:
                try:
                    self._lu = spla.splu(self.matrix, permc_spec="COLAMD")
                except RuntimeError as exc:
                    raise SolverError(f"sparse factorisation failed: {exc}",
                                      context={"wavelength_nm": self.wavelength * 1e9}) from exc
            return self._lu


def _second_difference(n: int, dx: float, s_node: np.ndarray, s_half: np.ndarray):
    """``S^-1 Db Sh^-1 Df`` on ``n`` nodes with zero field beyond both ends.

    ``s_half`` holds the ``n + 1`` half-node stretch factors at ``-0.5 .. n - 0.5``.
    """
    fwd = sp.diags([np.ones(n), -np.ones(n)], [0, -1], shape=(n + 1, n)) / dx
    bwd = sp.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1)) / dx
    return sp.diags(1.0 / s_node) @ bwd @ sp.diags(1.0 / s_half) @ fwd


def assemble_system(eps_map: PermittivityMap, wavelength: float,
                    pml: PmlSpec = PmlSpec()) -> LinearSystem:
    if not wavelength > 0:
        raise PreconditionError("wavelength must be positive")
    grid = eps_map.grid
    grid.check_resolution(wavelength, float(np.sqrt(eps_map.eps.max())))
    k0 = 2 * np.pi / wavelength
    nx, ny = grid.shape
    ix = np.arange(nx, dtype=float)
    iy = np.arange(ny, dtype=float)
    hx = np.arange(nx + 1, dtype=float) - 0.5
    hy = np.arange(ny + 1, dtype=float) - 0.5
    dxx = _second_difference(nx, grid.dx, pml.stretch(nx, ix), pml.stretch(nx, hx))
    dyy = _second_difference(ny, grid.dx, pml.stretch(ny, iy), pml.stretch(ny, hy))
    lap = sp.kron(dxx, sp.identity(ny)) + sp.kron(sp.identity(nx), dyy)
    matrix = (lap + sp.diags(k0**2 * eps_map.eps.ravel())).tocsc()
    matrix.sum_duplicates()
    matrix.eliminate_zeros()
    return LinearSystem(matrix, grid, wavelength, pml)


def solve(system: LinearSystem, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Solve ``A x = rhs`` (or ``A^T x = rhs``) with the cached LU factors."""
    rhs = np.asarray(rhs, dtype=complex).ravel()
    if rhs.size != system.matrix.shape[0]:
        raise PreconditionError(
            f"rhs has {rhs.size} entries, system dimension is {system.matrix.shape[0]}")
    norm_b = np.linalg.norm(rhs)
    if norm_b == 0:
        return np.zeros_like(rhs)
    x = system.lu.solve(rhs, trans="T" if transpose else "N")
    mat = system.matrix.T if transpose else system.matrix
    residual = np.linalg.norm(mat @ x - rhs) / norm_b
    if not np.isfinite(residual) or residual > RESIDUAL_TARGET:
        # one step of iterative refinement before giving up
        x = x + system.lu.solve(rhs - mat @ x, trans="T" if transpose else "N")
        residual = np.linalg.norm(mat @ x - rhs) / norm_b
        if not np.isfinite(residual) or residual > RESIDUAL_TARGET:
            raise SolverError("linear solve missed residual target", residual=residual,
                              context={"wavelength_nm": system.wavelength * 1e9})
    return x


def _scatter(grid: Grid2D, port: Port, index: int, values: np.ndarray, out: np.ndarray):
    lo, hi = port.span
    if port.axis == "x":
        out[index, lo:hi] += values
    else:
        out[lo:hi, index] += values


def mode_source(grid: Grid2D, mode: PortMode, amplitude: complex = 1.0) -> np.ndarray:
    """Right-hand side launching ``mode`` along ``port.direction`` with power ``|amplitude|**2``.

    The pattern is the operator applied to a field that equals the forward
    mode on and beyond the port plane and vanishes behind it.
    """
    port = mode.port
    rhs = np.zeros(grid.shape, dtype=complex)
    if amplitude == 0:
        return rhs.ravel()
    n_trans = grid.ny if port.axis == "x" else grid.nx
    if mode.field.size != port.span[1] - port.span[0] or port.span[1] > n_trans:
        raise PreconditionError("mode profile does not match the port span")
    a = amplitude / np.sqrt(mode.flux) / grid.dx**2
    behind = port.index - port.direction
    _scatter(grid, port, behind, a * mode.field, rhs)
    _scatter(grid, port, port.index, -a * np.exp(-1j * mode.phase_step) * mode.field, rhs)
    return rhs.ravel()


def overlap_functional(grid: Grid2D, mode: PortMode) -> np.ndarray:
    """Vector ``g`` with ``g @ field`` = forward power amplitude at the port plane."""
    port = mode.port
    g = np.zeros(grid.shape, dtype=complex)
    k = mode.phase_step
    w = np.sqrt(mode.flux) * grid.dx / (2j * np.sin(k))
    ahead = port.index + port.direction
    _scatter(grid, port, ahead, w * mode.field, g)
    _scatter(grid, port, port.index, -w * np.exp(-1j * k) * mode.field, g)
    return g.ravel()


def measure_overlap(field: np.ndarray, grid: Grid2D, mode: PortMode) -> complex:
    """Complex amplitude of ``mode`` travelling along ``port.direction``.

    ``|amplitude|**2`` is the power that mode carries through the port plane.
    """
    field = np.asarray(field)
    if field.size != grid.size:
        raise PreconditionError("field size does not match grid")
    return complex(overlap_functional(grid, mode) @ field.ravel())


def mode_field(grid: Grid2D, mode: PortMode, amplitude: complex = 1.0) -> np.ndarray:
    """Ideal travelling-wave field of ``mode`` filling the whole grid (test fixture)."""
    port = mode.port
    n_long = grid.nx if port.axis == "x" else grid.ny
    phase = np.exp(1j * mode.phase_step * port.direction * (np.arange(n_long) - port.index))
    out = np.zeros(grid.shape, dtype=complex)
    lo, hi = port.span
    prof = amplitude * mode.field / np.sqrt(mode.flux)
    if port.axis == "x":
        out[:, lo:hi] = phase[:, None] * prof[None, :]
    else:
        out[lo:hi, :] = prof[:, None] * phase[None, :]
    return out


@dataclass(frozen=True)
class ScatteringMatrix:
    """``entries[i, j]`` = S from source ``sources[j]`` into monitor ``monitors[i]``."""

    wavelength: float
    monitors: tuple[int, ...]
    sources: tuple[int, ...]
    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=complex)
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "monitors", tuple(int(m) for m in self.monitors))
        object.__setattr__(self, "sources", tuple(int(s) for s in self.sources))
        if entries.shape != (len(self.monitors), len(self.sources)):
            raise ConfigurationError("entries shape does not match port lists")
        if not np.all(np.isfinite(entries)):
            raise SolverError("non-finite S-parameter", context={"wavelength_nm": self.wavelength * 1e9})

    def __getitem__(self, key) -> complex:
        m, s = key
        try:
            return complex(self.entries[self.monitors.index(m), self.sources.index(s)])
        except ValueError:
            raise KeyError(f"no S entry for monitor {m}, source {s}") from None

    def __contains__(self, key) -> bool:
        m, s = key
        return m in self.monitors and s in self.sources

    def column_power(self) -> np.ndarray:
        return np.sum(np.abs(self.entries) ** 2, axis=0)

    def check_passive(self, tol: float = 1e-6) -> None:
        power = self.column_power()
        if np.any(power > 1 + tol):
            raise SolverError(f"passivity violated: column power {power.max():.8f}",
                              context={"wavelength_nm": self.wavelength * 1e9})


@dataclass
class Simulation:
    """Forward solution data for one wavelength; reused by the adjoint."""

    system: LinearSystem
    sources: list[PortMode]
    monitors: list[PortMode]
    fields: list[np.ndarray]
    functionals: list[np.ndarray]
    smatrix: ScatteringMatrix


def _split_ports(ports):
    sources = [p for p in ports if p.role == "source"]
    monitors = [p for p in ports if p.role == "monitor"]
    if not sources or not monitors:
        raise PreconditionError("need at least one source port and one monitor port")
    return sources, monitors


def eps_at(eps_map: PermittivityMap, wavelength: float, materials: Materials | None):
    if materials is None:
        return eps_map
    return eps_map.rescaled(materials.eps_core(wavelength), materials.eps_clad)


def simulate(eps_map: PermittivityMap, ports, wavelength: float, pml: PmlSpec = PmlSpec(),
             materials: Materials | None = None,
             mode_reference: PermittivityMap | None = None) -> Simulation:
    """One forward solve per source port at a single wavelength.

    With ``materials`` the map geometry is re-evaluated at ``wavelength``.
    Port modes come from ``mode_reference`` when given, else from the map.
    """
    sources, monitors = _split_ports(ports)
    grid = eps_map.grid
    for p in sources + monitors:
        p.validate(grid, pml)
    eps_lam = eps_at(eps_map, wavelength, materials)
    ref = eps_lam if mode_reference is None else eps_at(mode_reference, wavelength, materials)
    src_modes = [port_mode(ref, p, wavelength) for p in sources]
    mon_modes = [port_mode(ref, p, wavelength) for p in monitors]
    system = assemble_system(eps_lam, wavelength, pml)
    functionals = [overlap_functional(grid, m) for m in mon_modes]
    fields = []
    entries = np.zeros((len(monitors), len(sources)), dtype=complex)
    for j, sm in enumerate(src_modes):
        try:
            x = solve(system, mode_source(grid, sm, 1.0))
        except SolverError as exc:
            exc.context.update(source=sm.port.id)
            raise
        fields.append(x)
        for i, g in enumerate(functionals):
            entries[i, j] = g @ x
    smatrix = ScatteringMatrix(wavelength, [p.id for p in monitors], [p.id for p in sources], entries)
    return Simulation(system, src_modes, mon_modes, fields, functionals, smatrix)


def _map_ordered(func, items, threads):
    if threads is None or threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def compute_smatrix(eps_map: PermittivityMap, ports, wavelengths, pml: PmlSpec = PmlSpec(),
                    materials: Materials | None = None,
                    mode_reference: PermittivityMap | None = None,
                    threads: int = 1, check_passivity: bool = True) -> list[ScatteringMatrix]:
    """One :class:`ScatteringMatrix` per wavelength, in input order."""
    wavelengths = [float(w) for w in wavelengths]
    if not wavelengths:
        raise PreconditionError("wavelength list is empty")

    def run(wl):
        sim = simulate(eps_map, ports, wl, pml, materials, mode_reference)
        if check_passivity:
            sim.smatrix.check_passive()
        return sim.smatrix

    return _map_ordered(run, wavelengths, threads)
