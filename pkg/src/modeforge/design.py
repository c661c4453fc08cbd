"""Design-region parameterisation: cone filter, tanh projection, signed
distance, minimum-feature morphology."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .errors import ConfigurationError, PreconditionError
from .fdfd import PermittivityMap


@dataclass
class DesignRegion:
    """Rectangle ``[ix0:ix1, iy0:iy1]`` of ``base`` parameterised by ``p`` in [0, 1].

    Cells flagged in ``frozen`` keep their ``p`` value (waveguide stubs).
    """

    base: PermittivityMap
    bounds: tuple[int, int, int, int]
    p: np.ndarray
    frozen: np.ndarray | None = None

    def __post_init__(self):
        ix0, ix1, iy0, iy1 = (int(b) for b in self.bounds)
        self.bounds = (ix0, ix1, iy0, iy1)
        self.p = np.array(self.p, dtype=float)
        if self.p.shape != self.shape:
            raise ConfigurationError(f"p shape {self.p.shape} != region shape {self.shape}")
        if np.any(self.p < 0) or np.any(self.p > 1) or not np.all(np.isfinite(self.p)):
            raise ConfigurationError("design parameters must lie in [0, 1]")
        if self.frozen is None:
            self.frozen = np.zeros(self.shape, dtype=bool)
        self.frozen = np.asarray(self.frozen, dtype=bool)
        nx, ny = self.base.grid.shape
        if not (0 <= ix0 < ix1 <= nx and 0 <= iy0 < iy1 <= ny):
            raise ConfigurationError("design region outside the grid")

    @property
    def shape(self) -> tuple[int, int]:
        ix0, ix1, iy0, iy1 = self.bounds
        return (ix1 - ix0, iy1 - iy0)

    @property
    def slices(self) -> tuple[slice, slice]:
        ix0, ix1, iy0, iy1 = self.bounds
        return slice(ix0, ix1), slice(iy0, iy1)

    @property
    def eps_lo(self) -> float:
        return self.base.eps_clad

    @property
    def eps_hi(self) -> float:
        return self.base.eps_core

    @property
    def free(self) -> np.ndarray:
        return ~self.frozen

    def with_p(self, p) -> "DesignRegion":
        p = np.where(self.frozen, self.p, np.clip(p, 0.0, 1.0))
        return replace(self, p=p)

    def check_interior(self, pml_thickness: int) -> None:
        ix0, ix1, iy0, iy1 = self.bounds
        nx, ny = self.base.grid.shape
        t = pml_thickness
        if not (ix0 > t and iy0 > t and ix1 < nx - t and iy1 < ny - t):
            raise ConfigurationError("design region overlaps the PML")


def cone_kernel(radius_cells: float) -> np.ndarray:
    r = int(np.floor(radius_cells))
    ii, jj = np.mgrid[-r:r + 1, -r:r + 1]
    return np.maximum(0.0, 1.0 - np.hypot(ii, jj) / radius_cells)


@dataclass(frozen=True)
class ConeFilter:
    """Linear cone filter as an explicit sparse operator over the region.

    Weights are renormalised per row over the in-region footprint, so constant
    designs are preserved; the adjoint is the exact transpose.
    """

    shape: tuple[int, int]
    radius_cells: float
    matrix: sp.csr_matrix = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.radius_cells < 1.0:
            raise ConfigurationError("filter radius must be at least one cell")
        if self.matrix is None:
            object.__setattr__(self, "matrix", self._build())

    def _build(self):
        nx, ny = self.shape
        kernel = cone_kernel(self.radius_cells)
        r = kernel.shape[0] // 2
        rows, cols, vals = [], [], []
        idx = np.arange(nx * ny).reshape(nx, ny)
        ii, jj = np.mgrid[0:nx, 0:ny]
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                w = kernel[di + r, dj + r]
                if w <= 0:
                    continue
                ti, tj = ii + di, jj + dj
                ok = (ti >= 0) & (ti < nx) & (tj >= 0) & (tj < ny)
                rows.append(idx[ok])
                cols.append(idx[ti[ok], tj[ok]])
                vals.append(np.full(int(ok.sum()), w))
        mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(nx * ny, nx * ny))
        norm = np.asarray(mat.sum(axis=1)).ravel()
        return sp.diags(1.0 / norm) @ mat

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (self.matrix @ x.ravel()).reshape(self.shape)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        return (self.matrix.T @ g.ravel()).reshape(self.shape)


def project(x: np.ndarray, sharpness: float, threshold: float = 0.5) -> np.ndarray:
    """Smoothed step; the identity at zero sharpness."""
    if sharpness <= 0:
        return np.array(x, dtype=float)
    b, t = sharpness, threshold
    num = np.tanh(b * t) + np.tanh(b * (x - t))
    return num / (np.tanh(b * t) + np.tanh(b * (1 - t)))


def project_grad(x: np.ndarray, sharpness: float, threshold: float = 0.5) -> np.ndarray:
    if sharpness <= 0:
        return np.ones_like(x, dtype=float)
    b, t = sharpness, threshold
    return b / np.cosh(b * (x - t)) ** 2 / (np.tanh(b * t) + np.tanh(b * (1 - t)))


def fill_to_eps(region: DesignRegion, fill: np.ndarray) -> PermittivityMap:
    full = region.base.fill.copy()
    full[region.slices] = np.clip(fill, 0.0, 1.0)
    return region.base.with_fill(full)


def density_to_eps(region: DesignRegion, filter_radius: float, sharpness: float,
                   filt: ConeFilter | None = None) -> PermittivityMap:
    """``eps = eps_lo + (eps_hi - eps_lo) * project(filter(p))`` inside the region.

    ``filter_radius`` is in metres. Frozen cells bypass the filter.
    """
    dx = region.base.grid.dx
    if filter_radius < dx * (1 - 1e-9):
        raise PreconditionError("filter radius must be at least one cell")
    filt = filt or ConeFilter(region.shape, filter_radius / dx)
    fill = project(filt(region.p), sharpness)
    fill = np.where(region.frozen, region.p, fill)
    return fill_to_eps(region, fill)


# -- signed distance and morphology ------------------------------------------------

def signed_distance(solid: np.ndarray) -> np.ndarray:
    """Distance to the material boundary in cells, positive inside material.

    The boundary sits halfway between unlike neighbouring cell centres, so
    every solid cell has value >= 0.5 and every void cell <= -0.5.
    """
    solid = np.asarray(solid, dtype=bool)
    if solid.all():
        return np.full(solid.shape, np.inf)
    if not solid.any():
        return np.full(solid.shape, -np.inf)
    inside = ndimage.distance_transform_edt(solid) - 0.5
    outside = ndimage.distance_transform_edt(~solid) - 0.5
    return np.where(solid, inside, -outside)


def structuring_disk(min_feature: float, dx: float) -> np.ndarray:
    """Rasterised disk spanning ``round(min_feature / dx)`` cells."""
    n = max(1, int(round(min_feature / dx)))
    c = (n - 1) / 2.0
    ii, jj = np.mgrid[0:n, 0:n]
    return np.hypot(ii - c, jj - c) <= n / 2.0 + 1e-9


def _padded(op, solid, se):
    pad = se.shape[0] + 1
    arr = np.pad(solid, pad, mode="edge")
    out = op(arr, structure=se)
    return out[pad:-pad, pad:-pad]


def opening(solid, se):
    return _padded(ndimage.binary_opening, solid, se)


def closing(solid, se):
    return _padded(ndimage.binary_closing, solid, se)


@dataclass
class FeatureReport:
    min_feature: float
    solid_violations: np.ndarray  # (k, 2) cell indices
    void_violations: np.ndarray
    features: list = field(default_factory=list)  # (kind, cells) per connected violation

    @property
    def passed(self) -> bool:
        return not self.features

    def __len__(self):
        return len(self.features)


def _components(mask, kind):
    labels, count = ndimage.label(mask)
    return [(kind, np.argwhere(labels == k)) for k in range(1, count + 1)]


def check_min_feature(solid: np.ndarray, min_feature: float, dx: float) -> FeatureReport:
    se = structuring_disk(min_feature, dx)
    solid = np.asarray(solid, dtype=bool)
    bad_solid = solid & ~opening(solid, se)
    bad_void = ~solid & closing(solid, se)
    features = _components(bad_solid, "solid") + _components(bad_void, "void")
    return FeatureReport(min_feature, np.argwhere(bad_solid), np.argwhere(bad_void), features)


def feature_size_check(eps_map: PermittivityMap, min_feature: float,
                       region: DesignRegion | None = None) -> FeatureReport:
    """Solid and void features that a disk of diameter ``min_feature`` cannot fit.

    The whole map is checked unless ``region`` restricts the report.
    """
    if not eps_map.is_binary():
        raise PreconditionError("feature_size_check needs a binarised permittivity map")
    solid = eps_map.fill > 0.5
    report = check_min_feature(solid, min_feature, eps_map.grid.dx)
    if region is None:
        return report
    ix0, ix1, iy0, iy1 = region.bounds

    def inside(cells):
        return ((cells[:, 0] >= ix0) & (cells[:, 0] < ix1)
                & (cells[:, 1] >= iy0) & (cells[:, 1] < iy1))

    feats = [(k, c) for k, c in report.features if inside(c).any()]
    return FeatureReport(min_feature, report.solid_violations[inside(report.solid_violations)],
                         report.void_violations[inside(report.void_violations)], feats)


def enforce_min_feature(full_solid: np.ndarray, editable: np.ndarray, min_feature: float,
                        dx: float, max_rounds: int = 30) -> np.ndarray:
    """Open then close the ``editable`` cells until both operations are idempotent.

    Thin necks that closing keeps restoring are thickened by one disk instead
    of cycling forever.
    """
    se = structuring_disk(min_feature, dx)
    solid = np.asarray(full_solid, dtype=bool).copy()
    editable = np.asarray(editable, dtype=bool)
    for rounds in range(max_rounds):
        opened = np.where(editable, opening(solid, se), solid)
        closed = np.where(editable, closing(opened, se), opened)
        if np.array_equal(opened, solid) and np.array_equal(closed, solid):
            break
        if rounds >= 1:
            necks = closed & ~opening(closed, se)
            if necks.any():
                grown = ndimage.binary_dilation(necks, structure=se)
                closed = np.where(editable, closed | grown, closed)
        solid = closed
    return solid
