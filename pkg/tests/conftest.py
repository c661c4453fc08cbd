import numpy as np
import pytest

from modeforge.fdfd import Grid2D, PermittivityMap, PmlSpec, Port
from modeforge.modes import DEFAULT_MATERIALS

WL = 1550e-9


def guide_map(dx=44e-9, length=4.4e-6, width=1e-6, half_height=2.2e-6, pml=PmlSpec(),
              materials=DEFAULT_MATERIALS, wavelength=WL, fill_all=None):
    """Straight guide along x through the middle of the domain."""
    t = pml.thickness
    nx = 2 * t + int(round(length / dx))
    ny = 2 * t + 2 * int(round(half_height / dx)) + 1
    c = ny // 2
    w = int(round(width / dx)) // 2 * 2 + 1
    fill = np.zeros((nx, ny))
    fill[:, c - w // 2:c + w // 2 + 1] = 1.0
    if fill_all is not None:
        fill[:] = fill_all
    eps_core = materials.eps_core(wavelength)
    eps = materials.eps_clad + (eps_core - materials.eps_clad) * fill
    return PermittivityMap(Grid2D(nx, ny, dx), eps, eps_core, materials.eps_clad)


def guide_ports(eps_map, pml=PmlSpec(), distance=2e-6, margin_cells=12):
    """TE0 source near the left PML; TE0/TE1 monitors ``distance`` downstream."""
    g = eps_map.grid
    t = pml.thickness
    span = (t + 2, g.ny - t - 2)
    src = t + margin_cells
    mon = src + int(round(distance / g.dx))
    return [Port(1, "x", src, span, +1, 0, "source"),
            Port(3, "x", mon, span, +1, 0, "monitor"),
            Port(4, "x", mon, span, +1, 1, "monitor")]


@pytest.fixture(scope="session")
def straight_guide():
    m = guide_map()
    return m, guide_ports(m)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: numbered acceptance criteria")
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
