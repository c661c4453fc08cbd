import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import binary_dilation, binary_erosion

from modeforge.bias import _record, apply_bias, sweep_bias
from modeforge.errors import PreconditionError
from modeforge.fdfd import Grid2D, PermittivityMap, ScatteringMatrix, compute_smatrix
from modeforge.hom import from_smatrix, predict_visibility
from modeforge.layout import small_fixture

EPS_CORE, EPS_CLAD = 8.1, 1.48**2
DX = 20e-9


def binary(solid, dx=DX):
    return PermittivityMap(Grid2D(*solid.shape, dx), np.where(solid, EPS_CORE, EPS_CLAD),
                           EPS_CORE, EPS_CLAD)


def disk(n, radius_cells):
    y, x = np.mgrid[:n, :n] - (n - 1) / 2
    return np.hypot(x, y) <= radius_cells


@pytest.fixture(scope="module")
def fixture_design():
    lay = small_fixture("mbs", 13)
    rng = np.random.default_rng(0)
    fill = lay.base.fill.copy()
    block = rng.uniform(size=(4, 4)) > 0.5
    fill[lay.region.slices] = np.kron(block, np.ones((4, 4)))[:13, :13]
    return lay, lay.base.with_fill(fill)


def test_zero_bias_is_bit_exact():
    m = binary(disk(40, 10))
    out = apply_bias(m, 0.0)
    assert np.array_equal(out.eps, m.eps)


@pytest.mark.parametrize("b", [20e-9, 40e-9])
def test_disk_grows_by_bias(b):
    r = 10
    out = apply_bias(binary(disk(60, r)), b)
    solid = out.fill > 0.5
    y, x = np.mgrid[:60, :60] - 29.5
    rho = np.hypot(x, y)
    expect = r + b / DX
    # within one cell of the analytic circle
    assert np.all(rho[solid] <= expect + 1.0)
    assert np.all(solid[rho <= expect - 1.0])


def test_bias_guard():
    bar = np.zeros((30, 30), bool)
    bar[:, 13:17] = True
    w = 4 * DX
    with pytest.raises(PreconditionError):
        apply_bias(binary(bar), -w / 2 - DX, min_feature=w)
    with pytest.raises(PreconditionError):
        apply_bias(binary(bar).with_fill(np.full((30, 30), 0.5)), 0.0)


@settings(max_examples=40, deadline=None)
@given(blocks=arrays(bool, (5, 5)), frac=st.floats(0.25, 1.0))
def test_approximate_inverse(blocks, frac):
    # geometry built from 4-cell blocks honours the 80 nm minimum feature
    arr = np.kron(blocks, np.ones((4, 4), bool))
    m = binary(arr)
    b = frac * DX
    back = apply_bias(apply_bias(m, b), -b)
    changed = (back.fill > 0.5) != arr
    boundary = (arr ^ binary_dilation(arr)) | (arr ^ binary_erosion(arr, border_value=1))
    near = binary_dilation(boundary)
    assert not np.any(changed & ~near)


@settings(max_examples=30, deadline=None)
@given(arr=arrays(bool, (16, 16)), subpixel=st.booleans())
def test_area_monotone_in_bias(arr, subpixel):
    m = binary(arr)
    areas = [apply_bias(m, b, min_feature=4 * DX, subpixel=subpixel).fill.sum()
             for b in np.linspace(-2 * DX, 2 * DX, 9)]
    assert np.all(np.diff(areas) >= -1e-9)


def test_single_zero_bias_matches_composition(fixture_design):
    lay, m = fixture_design
    res = sweep_bias(m, [0.0], [1550e-9], lay.ports, lay.pml, i0=0.97, materials=lay.materials)
    sm = compute_smatrix(m, lay.ports, [1550e-9], lay.pml, lay.materials)[0]
    v = predict_visibility(from_smatrix(sm), 0.97)
    assert len(res) == 1
    assert np.array_equal(res.records[0].smatrix.entries, sm.entries)
    assert res.records[0].v_max == v


def test_sweep_is_deterministic_and_complete(fixture_design):
    lay, m = fixture_design
    biases, wls = [-20e-9, 0.0, 20e-9], [1540e-9, 1560e-9]
    a = sweep_bias(m, biases, wls, lay.ports, lay.pml, materials=lay.materials, threads=2)
    b = sweep_bias(m, biases, wls, lay.ports, lay.pml, materials=lay.materials, threads=1)
    assert len(a) == 6
    assert [(r.bias, r.wavelength) for r in a.records] == [(x, w) for x in biases for w in wls]
    for x, y in zip(a.records, b.records):
        assert np.array_equal(x.smatrix.entries, y.smatrix.entries) and x.v_max == y.v_max
    assert all(-1 <= r.v_max <= 1 for r in a.records)


def test_ideal_device_visibility_one():
    h = 1 / np.sqrt(2)
    sm = ScatteringMatrix(1550e-9, [3, 4], [1, 2], [[h, 1j * h], [1j * h, h]])
    rec = _record(0.0, 1550e-9, sm, 1.0, (1, 2), (3, 4))
    assert rec.v_max == pytest.approx(1.0, abs=1e-15)
    assert rec.eta_eff == pytest.approx(0.5, abs=1e-15)


def test_failures_are_recorded(fixture_design):
    lay, m = fixture_design
    res = sweep_bias(m, [0.0], [1550e-9, 300e-9], lay.ports, lay.pml, materials=lay.materials)
    ok, bad = res.records
    assert ok.ok and not bad.ok
    assert np.isnan(bad.v_max) and bad.smatrix is None and bad.error


def test_bias_guard_before_any_solve(fixture_design):
    lay, m = fixture_design
    with pytest.raises(PreconditionError):
        sweep_bias(m, [0.0, 60e-9], [1550e-9], lay.ports, lay.pml, materials=lay.materials)


def test_threshold_bias_reporting():
    from modeforge.bias import BiasRecord, BiasSweepResult
    recs = [BiasRecord(b * 1e-9, 1550e-9, None, 0.5, np.pi, v)
            for b, v in [(-20, 0.3), (-10, 0.7), (0, 0.99), (10, 0.8), (20, 0.6)]]
    res = BiasSweepResult(recs)
    assert res.threshold_bias(0.5) == (-10e-9, 20e-9)
    assert res.v_max(0.0) == 0.99
