"""Uniform fabrication bias and visibility-versus-bias sweeps.

A positive bias grows material outward (under-etch), a negative one shrinks
it. The boundary is moved by thresholding the Euclidean signed distance of
the binarised geometry. In ``subpixel`` mode each cell keeps the fraction of
its width that the moved boundary covers instead of being re-binarised, which
resolves biases much smaller than a cell.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .design import signed_distance
from .errors import ModeforgeError, PreconditionError
from .fdfd import PermittivityMap, PmlSpec, ScatteringMatrix, _map_ordered, compute_smatrix
from .hom import from_smatrix, predict_visibility
from .modes import DEFAULT_MATERIALS, Materials

DEFAULT_MIN_FEATURE = 80e-9


def apply_bias(eps_map: PermittivityMap, bias: float, min_feature: float = DEFAULT_MIN_FEATURE,
               subpixel: bool = False, mask: np.ndarray | None = None) -> PermittivityMap:
    """Displace every material boundary outward by ``bias`` metres.

    Parameters
    ----------
    eps_map : PermittivityMap
        Binarised map.
    bias : float
        Signed displacement; must satisfy ``|bias| <= min_feature / 2``.
    subpixel : bool
        Return fractional fill ``clip(0.5 + d + bias/dx, 0, 1)`` (``d`` the
        signed distance in cells) instead of the binary ``d + bias/dx > 0``.
    mask : array of bool, optional
        Cells allowed to change; all cells by default.
    """
    if not eps_map.is_binary():
        raise PreconditionError("apply_bias needs a binarised permittivity map")
    if abs(bias) > 0.5 * min_feature * (1 + 1e-12):
        raise PreconditionError(
            f"|bias| = {abs(bias) * 1e9:.2f} nm exceeds half the minimum feature "
            f"({0.5 * min_feature * 1e9:.2f} nm)")
    if bias == 0:
        return eps_map
    solid = eps_map.fill > 0.5
    sdf = signed_distance(solid)
    shift = bias / eps_map.grid.dx
    if subpixel:
        new = np.clip(0.5 + sdf + shift, 0.0, 1.0)
    else:
        new = (sdf + shift > 0).astype(float)
    if mask is not None:
        new = np.where(mask, new, solid.astype(float))
    return eps_map.with_fill(new)


@dataclass
class BiasRecord:
    bias: float
    wavelength: float
    smatrix: ScatteringMatrix | None
    eta_eff: float
    alpha: float
    v_max: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class BiasSweepResult:
    records: list[BiasRecord] = field(default_factory=list)
    i0: float = 1.0

    def __len__(self):
        return len(self.records)

    def biases(self) -> list[float]:
        return sorted({r.bias for r in self.records})

    def wavelengths(self) -> list[float]:
        return sorted({r.wavelength for r in self.records})

    def v_max(self, bias: float, wavelength: float | None = None) -> float:
        """V_max at one lattice point; minimum over wavelengths if none is given."""
        sel = [r for r in self.records if np.isclose(r.bias, bias, rtol=0, atol=1e-15)
               and (wavelength is None or np.isclose(r.wavelength, wavelength, rtol=0, atol=1e-15))]
        if not sel:
            raise KeyError(f"no record at bias {bias}")
        return float(min(r.v_max for r in sel))

    def threshold_bias(self, level: float = 0.5) -> tuple[float, float]:
        """Most negative and most positive bias around 0 with every V_max >= ``level``."""
        biases = self.biases()
        good = {b: all(r.v_max >= level for r in self.records if r.bias == b) for b in biases}
        neg = [b for b in biases if b <= 0][::-1]
        pos = [b for b in biases if b >= 0]
        lo = hi = 0.0
        for b in neg:
            if not good[b]:
                break
            lo = b
        for b in pos:
            if not good[b]:
                break
            hi = b
        return lo, hi


def _record(bias, wl, sm, i0, sources, monitors) -> BiasRecord:
    bs = from_smatrix(sm, sources, monitors)
    return BiasRecord(bias, wl, sm, bs.eta_eff, bs.alpha, predict_visibility(bs, i0))


def sweep_bias(eps_map: PermittivityMap, biases, wavelengths, ports, pml: PmlSpec = PmlSpec(),
               i0: float = 1.0, materials: Materials | None = DEFAULT_MATERIALS,
               min_feature: float = DEFAULT_MIN_FEATURE, subpixel: bool = True,
               sources=(1, 2), monitors=(3, 4), threads: int = 1) -> BiasSweepResult:
    """S-matrix, splitting ratio, phase and maximum visibility per (bias, wavelength).

    Every bias is validated before any solve. A failing lattice point is
    recorded with NaNs and its error message; the sweep carries on.
    """
    biases = [float(b) for b in biases]
    wavelengths = [float(w) for w in wavelengths]
    maps = [apply_bias(eps_map, b, min_feature, subpixel) for b in biases]
    cells = [(bi, wl) for bi in range(len(biases)) for wl in wavelengths]

    def run(cell):
        bi, wl = cell
        try:
            sm = compute_smatrix(maps[bi], ports, [wl], pml, materials)[0]
            return _record(biases[bi], wl, sm, i0, sources, monitors)
        except ModeforgeError as exc:
            nan = float("nan")
            return BiasRecord(biases[bi], wl, None, nan, nan, nan, f"{type(exc).__name__}: {exc}")

    return BiasSweepResult(_map_ordered(run, cells, threads), i0)
