"""Device layouts: domain, waveguides, design region and ports.

All layouts are mirror-symmetric about the domain's horizontal centre line
(cell ``ny // 2``) so that symmetric designs keep TE0/TE1 parity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .design import DesignRegion
from .errors import ConfigurationError
from .fdfd import Grid2D, PermittivityMap, PmlSpec, Port
from .modes import DEFAULT_MATERIALS, Materials


@dataclass
class Layout:
    name: str
    base: PermittivityMap
    region: DesignRegion
    ports: list[Port]
    pml: PmlSpec
    materials: Materials
    wavelength: float  # reference wavelength of ``base`` permittivities
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid2D:
        return self.base.grid

    @property
    def sources(self):
        return [p for p in self.ports if p.role == "source"]

    @property
    def monitors(self):
        return [p for p in self.ports if p.role == "monitor"]


def _odd(n: int) -> int:
    return n if n % 2 == 1 else n + 1


def _cells(length: float, dx: float) -> int:
    return max(1, int(round(length / dx)))


def _band(center: int, width: int) -> slice:
    half = width // 2
    return slice(center - half, center - half + width)


def build_layout(name: str, *, nx: int, ny: int, dx: float, design_cells: tuple[int, int],
                 inputs: list[tuple[int, int]], outputs: list[tuple[int, int]],
                 source_modes: list[tuple[int, int]], monitor_modes: list[tuple[int, int]],
                 wavelength: float = 1550e-9, pml: PmlSpec = PmlSpec(),
                 materials: Materials = DEFAULT_MATERIALS, margin: int = 30,
                 port_gap: int = 8, stub: int = 2, init: float = 0.5) -> Layout:
    """Generic straight-port layout.

    ``inputs``/``outputs`` are ``(centre_row, width_cells)`` guides entering
    from the left/right. ``source_modes`` entries are ``(input_guide, order)``
    and ``monitor_modes`` entries ``(output_guide, order)``; port ids are
    numbered sources first, from 1.
    """
    grid = Grid2D(nx, ny, dx)
    eps_core = materials.eps_core(wavelength)
    eps_clad = materials.eps_clad
    fill = np.zeros((nx, ny))
    cx = nx // 2
    dnx, dny = design_cells
    ix0 = cx - dnx // 2
    ix1 = ix0 + dnx
    iy0 = ny // 2 - dny // 2
    iy1 = iy0 + dny
    # guides run to the region centre; the region overrides its own cells
    for row, width in inputs:
        fill[:cx, _band(row, width)] = 1.0
    for row, width in outputs:
        fill[cx:, _band(row, width)] = 1.0
    base = PermittivityMap(grid, eps_clad + (eps_core - eps_clad) * fill, eps_core, eps_clad)

    p = np.full((dnx, dny), float(init))
    frozen = np.zeros((dnx, dny), dtype=bool)
    def clipped(row, width):
        b = _band(row - iy0, width)
        return slice(max(b.start, 0), min(b.stop, dny))

    if stub > 0:
        for row, width in inputs:
            frozen[:stub, clipped(row, width)] = True
        for row, width in outputs:
            frozen[dnx - stub:, clipped(row, width)] = True
        p[frozen] = 1.0
    region = DesignRegion(base, (ix0, ix1, iy0, iy1), p, frozen)
    region.check_interior(pml.thickness)

    t = pml.thickness
    src_x = t + port_gap
    mon_x = nx - 1 - t - port_gap
    if not (src_x + 1 < ix0 and mon_x - 1 > ix1):
        raise ConfigurationError("ports overlap the design region; enlarge the domain")

    def span(row, width):
        half = width // 2
        lo = max(row - half - margin, t + 1)
        hi = min(row - half + width + margin, ny - t - 1)
        return (lo, hi)

    ports = []
    pid = 1
    for guide, order in source_modes:
        row, width = inputs[guide]
        ports.append(Port(pid, "x", src_x, span(row, width), +1, order, "source"))
        pid += 1
    for guide, order in monitor_modes:
        row, width = outputs[guide]
        ports.append(Port(pid, "x", mon_x, span(row, width), +1, order, "monitor"))
        pid += 1
    return Layout(name, base, region, ports, pml, materials, wavelength)


def mode_beamsplitter(domain: float = 7e-6, dx: float = 44e-9, design: float = 3e-6,
                      wg_width: float = 1e-6, wavelength: float = 1550e-9,
                      pml: PmlSpec = PmlSpec(), materials: Materials = DEFAULT_MATERIALS,
                      init: float = 0.5) -> Layout:
    """TE0/TE1 sources (ports 1, 2) on a multimode input guide; TE0/TE1
    monitors (ports 3, 4) on the multimode output guide."""
    n = _odd(_cells(domain, dx))
    d = _odd(_cells(design, dx))
    w = _odd(_cells(wg_width, dx))
    c = n // 2
    margin = min(30, c - w // 2 - pml.thickness - 2)
    return build_layout(
        "mode_beamsplitter", nx=n, ny=n, dx=dx, design_cells=(d, d),
        inputs=[(c, w)], outputs=[(c, w)],
        source_modes=[(0, 0), (0, 1)], monitor_modes=[(0, 0), (0, 1)],
        wavelength=wavelength, pml=pml, materials=materials, margin=margin, init=init)


def mode_multiplexer(domain: float = 7e-6, dx: float = 44e-9, design: float = 3e-6,
                     sm_width: float = 0.5e-6, mm_width: float = 1e-6, separation: float = 1.5e-6,
                     wavelength: float = 1550e-9, pml: PmlSpec = PmlSpec(),
                     materials: Materials = DEFAULT_MATERIALS) -> Layout:
    """Two single-mode inputs (ports 1, 2) into a multimode output with TE0/TE1 monitors (3, 4)."""
    n = _odd(_cells(domain, dx))
    d = _odd(_cells(design, dx))
    sw = _odd(_cells(sm_width, dx))
    mw = _odd(_cells(mm_width, dx))
    c = n // 2
    off = _cells(separation / 2, dx)
    margin = min(12, c - off - sw // 2 - pml.thickness - 2)
    return build_layout(
        "mode_multiplexer", nx=n, ny=n, dx=dx, design_cells=(d, d),
        inputs=[(c + off, sw), (c - off, sw)], outputs=[(c, mw)],
        source_modes=[(0, 0), (1, 0)], monitor_modes=[(0, 0), (0, 1)],
        wavelength=wavelength, pml=pml, materials=materials, margin=margin)


def tritter(domain: float = 7e-6, dx: float = 44e-9, design: float = 3e-6,
            wg_width: float = 1.2e-6, wavelength: float = 1550e-9, pml: PmlSpec = PmlSpec(),
            materials: Materials = DEFAULT_MATERIALS) -> Layout:
    """Three-mode splitter: TE0..TE2 sources (1-3) and monitors (4-6)."""
    n = _odd(_cells(domain, dx))
    d = _odd(_cells(design, dx))
    w = _odd(_cells(wg_width, dx))
    c = n // 2
    margin = min(30, c - w // 2 - pml.thickness - 2)
    return build_layout(
        "tritter", nx=n, ny=n, dx=dx, design_cells=(d, d),
        inputs=[(c, w)], outputs=[(c, w)],
        source_modes=[(0, 0), (0, 1), (0, 2)], monitor_modes=[(0, 0), (0, 1), (0, 2)],
        wavelength=wavelength, pml=pml, materials=materials, margin=margin)


def small_fixture(kind: str = "mbs", design_cells: int = 8, dx: float = 44e-9,
                  wavelength: float = 1550e-9, pml: PmlSpec = PmlSpec(),
                  materials: Materials = DEFAULT_MATERIALS) -> Layout:
    """Compact layout around an ``design_cells``-square region for gradient checks."""
    t = pml.thickness
    margin = 10
    if kind == "mdm":
        sw = _odd(_cells(0.5e-6, dx))
        mw = _odd(_cells(1e-6, dx))
        off = sw // 2 + margin + 1  # port spans of the two inputs must not overlap
        ny = _odd(2 * t + 2 * (off + sw // 2 + margin) + 6)
        c = ny // 2
        nx = 2 * t + 2 * 8 + design_cells + 10
        return build_layout(
            "fixture_mdm", nx=nx, ny=ny, dx=dx, design_cells=(design_cells, design_cells),
            inputs=[(c + off, sw), (c - off, sw)], outputs=[(c, mw)],
            source_modes=[(0, 0), (1, 0)], monitor_modes=[(0, 0), (0, 1)],
            wavelength=wavelength, pml=pml, materials=materials, margin=margin, stub=0)
    width = 1.2e-6 if kind == "tritter" else 1e-6
    w = _odd(_cells(width, dx))
    ny = _odd(2 * t + 2 * margin + w + 6)
    c = ny // 2
    nx = 2 * t + 2 * 8 + design_cells + 10
    orders = [0, 1, 2] if kind == "tritter" else [0, 1]
    return build_layout(
        f"fixture_{kind}", nx=nx, ny=ny, dx=dx, design_cells=(design_cells, design_cells),
        inputs=[(c, w)], outputs=[(c, w)],
        source_modes=[(0, k) for k in orders], monitor_modes=[(0, k) for k in orders],
        wavelength=wavelength, pml=pml, materials=materials, margin=margin, stub=0)
