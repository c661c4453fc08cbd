import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modeforge import io as mfio
from modeforge.bias import BiasRecord, BiasSweepResult
from modeforge.errors import ConfigurationError, ParseError
from modeforge.fdfd import Grid2D, PermittivityMap, ScatteringMatrix
from modeforge.hom import (BeamsplitterMatrix, OverlapModel, ScanProtocol, fit_dip, ingest_scan,
                           simulate_scan)
from modeforge.modes import IndexProfile1D, solve_slab_modes
from modeforge.optimize import OptimizationTrace, TraceRecord


@pytest.fixture(scope="module")
def scan():
    return simulate_scan(BeamsplitterMatrix.from_eta(0.4877), OverlapModel(), rate=7000.0, seed=3)


def sms():
    rng = np.random.default_rng(0)
    out = []
    for wl in (1500e-9, 1550e-9, 1600e-9):
        m = (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))) * 0.3
        out.append(ScatteringMatrix(wl, [3, 4], [1, 2], m))
    return out


@settings(max_examples=200, deadline=None)
@given(v=st.floats(1e-12, 1e6, allow_nan=False), e=st.integers(-12, 12))
def test_scaled_repr_round_trip(v, e):
    assert mfio.unscale(mfio.scaled_repr(v, e), e) == v


def test_wavelength_text_is_exact():
    assert mfio.scaled_repr(1.55e-6, 9) == "1550"
    assert mfio.unscale("1550", 9) == 1.55e-6


def test_permittivity_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    eps = 2.19 + 5.9 * rng.uniform(size=(11, 9))
    m = PermittivityMap(Grid2D(11, 9, 44e-9, (1e-7, -2e-7)), eps, 8.1, 2.19)
    head, side = mfio.write_permittivity(m, tmp_path / "d.json")
    back = mfio.read_permittivity(head)
    assert np.array_equal(back.eps, m.eps)
    assert back.grid == m.grid and back.eps_core == m.eps_core
    assert json.loads(head.read_text())["dx_nm"] == "44"
    raw = bytearray(side.read_bytes())
    raw[3] ^= 1
    side.write_bytes(bytes(raw))
    with pytest.raises(ParseError, match="checksum"):
        mfio.read_permittivity(head)


def test_smatrix_round_trip(tmp_path):
    a = sms()
    back = mfio.read_smatrices(mfio.write_smatrices(a, tmp_path / "s.csv"))
    for x, y in zip(a, back):
        assert x.wavelength == y.wavelength
        assert np.array_equal(x.entries, y.entries)


def test_mode_round_trip(tmp_path):
    prof = IndexProfile1D.layers([1e-6], [2.8], 20e-9, 1.5e-6, 1.48, 1.48)
    mode = solve_slab_modes(prof, 1.55e-6, count=1)[0]
    back = mfio.read_mode(mfio.write_mode(mode, tmp_path / "m.csv"))
    assert back.n_eff == mode.n_eff and back.wavelength == mode.wavelength
    assert np.array_equal(np.asarray(back.field), np.asarray(mode.field))


def test_scan_and_fit_round_trip(tmp_path, scan):
    p = mfio.write_scan(scan, tmp_path / "scan.csv")
    back = ingest_scan(p)
    assert back == scan
    assert len(back) == 109 and back.tau_ps[-1] - back.tau_ps[0] == 10.0
    fit = fit_dip(scan)
    rep = mfio.read_fit(mfio.write_fit(fit, tmp_path / "fit.txt"))
    assert rep["visibility"] == fit.visibility and rep["sigma_visibility"] == fit.sigma_v
    assert rep["flag"] == "ok" and rep["dof"] == 105


def test_trace_and_sweep_round_trip(tmp_path):
    tr = OptimizationTrace()
    tr.append(TraceRecord(0, "continuous", 1.25, 3e-12, 12.5))
    tr.append(TraceRecord(1, "levelset", 0.5, 1e-11, 11.0))
    rows = mfio.read_trace(mfio.write_trace(tr, tmp_path / "t.csv"))
    assert [r["f"] for r in rows] == [1.25, 0.5] and rows[1]["stage"] == "levelset"
    res = BiasSweepResult([BiasRecord(-5e-9, 1.55e-6, None, 0.49, 3.1, 0.998)])
    back = mfio.read_sweep(mfio.write_sweep(res, tmp_path / "b.csv"))
    assert back == [{"bias": -5e-9, "wavelength": 1.55e-6, "eta_eff": 0.49, "alpha": 3.1, "v_max": 0.998}]


@pytest.mark.parametrize("body, line, match", [
    ("tau_ps,counts\n0.0,5\n0.1,-3\n", 3, "negative"),
    ("tau_ps,counts\n0.0,5\n0.0,6\n", 3, "duplicate"),
    ("tau_ps,counts\n0.0,5\n0.1,x\n", 3, "non-numeric"),
    ("tau_ps,counts\n0.0,5,7\n", 2, "fields"),
    ("tau_ps,counts\n0.5,5\n0.1,6\n", 3, "increasing"),
])
def test_scan_parse_errors_carry_line(tmp_path, body, line, match):
    p = tmp_path / "bad.csv"
    p.write_text("# integration_s=1.0\n# window_ns=2.0\n" + body)
    with pytest.raises(ParseError, match=match) as info:
        ingest_scan(p)
    assert info.value.line == line + 2


def test_empty_and_missing_files(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(ParseError):
        ingest_scan(p)
    with pytest.raises(ParseError) as info:
        ingest_scan(tmp_path / "nope.csv")
    assert "nope.csv" in str(info.value) and info.value.exit_code == 5


def test_emit_plot_data(tmp_path, scan):
    fit = fit_dip(scan)
    p = mfio.emit_plot_data((scan, fit), "dip", tmp_path / "dip.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "tau_ps,counts,fit" and len(lines) == 110
    t, c, f = lines[55].split(",")
    assert float(t) == scan.tau_ps[54] and int(c) == scan.counts[54]
    assert float(f) == fit.model(scan.tau[54:55])[0]
    spec = mfio.emit_plot_data(sms(), "spectrum", tmp_path / "spec.csv").read_text().splitlines()
    assert spec[0] == "wavelength_nm,S31_mag2,S41_mag2" and spec[1].startswith("1500,")
    res = BiasSweepResult([BiasRecord(0.0, 1.55e-6, None, 0.5, np.pi, 1.0)])
    a = mfio.emit_plot_data(res, "bias", tmp_path / "bias.csv").read_bytes()
    assert a == mfio.write_sweep(res, tmp_path / "sweep.csv").read_bytes()
    with pytest.raises(ConfigurationError):
        mfio.emit_plot_data(scan, "spectrum", tmp_path / "x.csv")
    with pytest.raises(ConfigurationError):
        mfio.emit_plot_data(res, "pie", tmp_path / "x.csv")


def test_sniff_kind(tmp_path, scan):
    assert mfio.sniff_kind(mfio.write_scan(scan, tmp_path / "a.csv")) == "dip"
    assert mfio.sniff_kind(mfio.write_smatrices(sms(), tmp_path / "b.csv")) == "spectrum"
    (tmp_path / "c.csv").write_text("x,y\n1,2\n")
    assert mfio.sniff_kind(tmp_path / "c.csv") is None


def test_protocol_file_has_109_points(tmp_path):
    s = simulate_scan(BeamsplitterMatrix.from_eta(0.5), OverlapModel(), ScanProtocol(), seed=0)
    back = ingest_scan(mfio.write_scan(s, tmp_path / "p.csv"))
    assert len(back) == 109 and back.integration_s == 1.0 and back.coincidence_window == 2e-9
