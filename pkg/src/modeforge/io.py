"""File formats. Every writer has a reader that returns an equal value.

Floats are written with ``repr`` so text round-trips are exact. Values stored
in scaled units (nm, ps) are written with the shortest decimal that converts
back to the identical double.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError
from .fdfd import Grid2D, PermittivityMap, ScatteringMatrix
from .hom import CoincidenceScan, DipFit
from .modes import ModeProfile

MAP_SCHEMA = 1


def scaled_repr(value: float, exp10: int) -> str:
    """``value * 10**exp10`` as decimal text that :func:`unscale` maps back exactly.

    The decimal point of the shortest round-trip repr is shifted, so no
    binary rounding is involved.
    """
    return format(Decimal(repr(float(value))).scaleb(exp10).normalize(), "f")


def unscale(text: str, exp10: int) -> float:
    try:
        return float(Decimal(text.strip()).scaleb(-exp10))
    except InvalidOperation:
        raise ValueError(f"not a number: {text!r}") from None


def _open_error(path, exc):
    return ParseError(f"cannot read file: {exc.strerror or exc}", path)


def _read_lines(path):
    path = Path(path)
    try:
        return path.read_text().splitlines()
    except OSError as exc:
        raise _open_error(path, exc) from exc


# -- permittivity maps ---------------------------------------------------------------


def write_permittivity(eps_map: PermittivityMap, path) -> tuple[Path, Path]:
    """JSON header at ``path`` plus row-major little-endian float64 sidecar ``<stem>.bin``."""
    path = Path(path)
    sidecar = path.with_suffix(".bin")
    data = np.ascontiguousarray(eps_map.eps, dtype="<f8").tobytes(order="C")
    g = eps_map.grid
    header = {
        "schema_version": MAP_SCHEMA,
        "nx": g.nx,
        "ny": g.ny,
        "dx_nm": scaled_repr(g.dx, 9),
        "origin_nm": [scaled_repr(o, 9) for o in g.origin],
        "eps_core": eps_map.eps_core,
        "eps_clad": eps_map.eps_clad,
        "dtype": "float64",
        "byte_order": "little",
        "layout": "row-major eps[ix][iy]",
        "sidecar": sidecar.name,
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    sidecar.write_bytes(data)
    path.write_text(json.dumps(header, indent=2) + "\n")
    return path, sidecar


def read_permittivity(path) -> PermittivityMap:
    path = Path(path)
    text = "\n".join(_read_lines(path))
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed header: {exc.msg}", path, exc.lineno) from exc
    required = ("schema_version", "nx", "ny", "dx_nm", "origin_nm", "eps_core", "eps_clad", "sidecar")
    missing = [k for k in required if k not in header]
    if missing:
        raise ParseError(f"header missing keys {missing}", path)
    if header["schema_version"] != MAP_SCHEMA:
        raise ParseError(f"unsupported schema version {header['schema_version']}", path)
    sidecar = path.parent / header["sidecar"]
    try:
        raw = sidecar.read_bytes()
    except OSError as exc:
        raise _open_error(sidecar, exc) from exc
    nx, ny = int(header["nx"]), int(header["ny"])
    if len(raw) != 8 * nx * ny:
        raise ParseError(f"sidecar holds {len(raw)} bytes, expected {8 * nx * ny}", sidecar)
    if "sha256" in header and hashlib.sha256(raw).hexdigest() != header["sha256"]:
        raise ParseError("sidecar checksum mismatch", sidecar)
    eps = np.frombuffer(raw, dtype="<f8").reshape(nx, ny).astype(float)
    try:
        dx = unscale(str(header["dx_nm"]), 9)
        origin = tuple(unscale(str(o), 9) for o in header["origin_nm"])
        grid = Grid2D(nx, ny, dx, origin)
        return PermittivityMap(grid, eps, float(header["eps_core"]), float(header["eps_clad"]))
    except (ConfigurationError, ValueError, TypeError) as exc:
        raise ParseError(f"invalid header values: {exc}", path) from exc


# -- scattering matrices ---------------------------------------------------------------

SMATRIX_COLUMNS = ("wavelength_nm", "source_port", "monitor_port", "re", "im", "mag2")


def write_smatrices(smatrices, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SMATRIX_COLUMNS)
        for sm in smatrices:
            wl = scaled_repr(sm.wavelength, 9)
            for j, s in enumerate(sm.sources):
                for i, m in enumerate(sm.monitors):
                    z = complex(sm.entries[i, j])
                    w.writerow([wl, s, m, repr(z.real), repr(z.imag), repr(abs(z) ** 2)])
    return path


def _csv_rows(path, columns):
    lines = _read_lines(path)
    body = [(k + 1, ln) for k, ln in enumerate(lines) if ln.strip() and not ln.startswith("#")]
    if not body:
        raise ParseError("empty file", path)
    lineno, head = body[0]
    names = [c.strip() for c in head.split(",")]
    if tuple(names[:len(columns)]) != tuple(columns):
        raise ParseError(f"expected columns {','.join(columns)}", path, lineno)
    rows = []
    for lineno, ln in body[1:]:
        cells = [c.strip() for c in ln.split(",")]
        if len(cells) != len(names):
            raise ParseError(f"expected {len(names)} fields, got {len(cells)}", path, lineno)
        rows.append((lineno, dict(zip(names, cells))))
    return rows


def read_smatrices(path) -> list[ScatteringMatrix]:
    rows = _csv_rows(path, SMATRIX_COLUMNS)
    by_wl: dict[str, dict] = {}
    for lineno, r in rows:
        try:
            key = r["wavelength_nm"]
            s, m = int(r["source_port"]), int(r["monitor_port"])
            z = complex(float(r["re"]), float(r["im"]))
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from exc
        entry = by_wl.setdefault(key, {})
        if (m, s) in entry:
            raise ParseError(f"duplicate entry S{m}{s}", path, lineno)
        entry[(m, s)] = z
    out = []
    for key, entry in by_wl.items():
        monitors = sorted({m for m, _ in entry})
        sources = sorted({s for _, s in entry})
        if len(entry) != len(monitors) * len(sources):
            raise ParseError(f"incomplete S-matrix at {key} nm", path)
        mat = np.array([[entry[(m, s)] for s in sources] for m in monitors])
        out.append(ScatteringMatrix(unscale(key, 9), monitors, sources, mat))
    return out


# -- modes -------------------------------------------------------------------------------


def write_mode(mode: ModeProfile, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# mode_order={mode.mode_order}",
        f"# n_eff={mode.n_eff!r}",
        f"# wavelength_nm={scaled_repr(mode.wavelength, 9)}",
        f"# dx_nm={scaled_repr(mode.dx, 9)}",
        f"# x0_nm={scaled_repr(mode.x0, 9)}",
        f"# power_norm={mode.power_norm!r}",
        "x_nm,re,im",
    ]
    field = np.asarray(mode.field)
    for x, v in zip(mode.x, field):
        v = complex(v)
        lines.append(f"{x * 1e9!r},{v.real!r},{v.imag!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _header(path):
    meta = {}
    for k, ln in enumerate(_read_lines(path)):
        if not ln.startswith("#"):
            continue
        body = ln[1:].strip()
        if "=" not in body:
            raise ParseError(f"malformed header line {ln!r}", path, k + 1)
        key, value = body.split("=", 1)
        meta[key.strip()] = (value.strip(), k + 1)
    return meta


def _meta(meta, key, path, conv=float):
    if key not in meta:
        raise ParseError(f"missing header {key}", path)
    text, line = meta[key]
    try:
        return conv(text)
    except ValueError as exc:
        raise ParseError(f"bad value for {key}: {text!r}", path, line) from exc


def _nm(text):
    return unscale(text, 9)


def read_mode(path) -> ModeProfile:
    meta = _header(path)
    rows = _csv_rows(path, ("x_nm", "re", "im"))
    try:
        vals = np.array([complex(float(r["re"]), float(r["im"])) for _, r in rows])
    except ValueError as exc:
        raise ParseError(str(exc), path) from exc
    field = vals.real if not np.any(vals.imag) else vals
    return ModeProfile(
        _meta(meta, "mode_order", path, int), _meta(meta, "n_eff", path), field,
        _meta(meta, "dx_nm", path, _nm), _meta(meta, "wavelength_nm", path, _nm),
        _meta(meta, "power_norm", path), _meta(meta, "x0_nm", path, _nm))


# -- coincidence scans -------------------------------------------------------------------


def write_scan(scan: CoincidenceScan, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# integration_s={scan.integration_s!r}", f"# window_ns={scan.window_ns!r}",
             "tau_ps,counts"]
    lines += [f"{t!r},{int(c)}" for t, c in zip(scan.tau_ps.tolist(), scan.counts.tolist())]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_scan(path) -> CoincidenceScan:
    """Parse a scan CSV; the ``tau_ps,counts`` column header line is optional."""
    lines = _read_lines(path)
    meta = _header(path)
    taus, counts = [], []
    seen = {}
    for k, ln in enumerate(lines):
        lineno = k + 1
        s = ln.strip()
        if not s or s.startswith("#"):
            continue
        if s.replace(" ", "") == "tau_ps,counts":
            continue
        cells = [c.strip() for c in s.split(",")]
        if len(cells) != 2:
            raise ParseError(f"expected 2 fields, got {len(cells)}", path, lineno)
        try:
            tau = float(cells[0])
            count = float(cells[1])
        except ValueError:
            raise ParseError(f"non-numeric row {s!r}", path, lineno) from None
        if not math.isfinite(tau):
            raise ParseError("non-finite delay", path, lineno)
        if not math.isfinite(count) or count != int(count):
            raise ParseError(f"count {cells[1]!r} is not an integer", path, lineno)
        if count < 0:
            raise ParseError(f"negative count {cells[1]}", path, lineno)
        if tau in seen:
            raise ParseError(f"duplicate delay {cells[0]} ps (first on line {seen[tau]})", path, lineno)
        if taus and tau < taus[-1]:
            raise ParseError("delays must be strictly increasing", path, lineno)
        seen[tau] = lineno
        taus.append(tau)
        counts.append(int(count))
    if not taus:
        raise ParseError("scan file holds no data rows", path)
    integ = _meta(meta, "integration_s", path) if "integration_s" in meta else 1.0
    window = _meta(meta, "window_ns", path) if "window_ns" in meta else 2.0
    try:
        return CoincidenceScan(np.array(taus), np.array(counts), integ, window)
    except ConfigurationError as exc:
        raise ParseError(str(exc), path) from exc


# -- fit report ---------------------------------------------------------------------------

FIT_KEYS = ("visibility", "sigma_visibility", "tau0_ps", "sigma_tau0_ps", "width_ps",
            "sigma_width_ps", "baseline", "sigma_baseline", "chi2", "dof", "reduced_chi2",
            "iterations", "flag")


def write_fit(fit: DipFit, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    e = fit.errors
    values = {
        "visibility": fit.visibility, "sigma_visibility": e.get("visibility", float("nan")),
        "tau0_ps": fit.tau0 * 1e12, "sigma_tau0_ps": e.get("tau0", float("nan")) * 1e12,
        "width_ps": fit.width * 1e12, "sigma_width_ps": e.get("width", float("nan")) * 1e12,
        "baseline": fit.baseline, "sigma_baseline": e.get("baseline", float("nan")),
        "chi2": fit.chi2, "dof": fit.dof, "reduced_chi2": fit.reduced_chi2,
        "iterations": fit.iterations, "flag": fit.flag,
    }
    lines = ["# dip fit: N (1 - V max(0, 1 - |tau - tau0| / w)), Poisson weights"]
    for k in FIT_KEYS:
        v = values[k]
        lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_fit(path) -> dict:
    out = {}
    for k, ln in enumerate(_read_lines(path)):
        s = ln.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ParseError(f"malformed line {s!r}", path, k + 1)
        key, value = (x.strip() for x in s.split("=", 1))
        if key in ("dof", "iterations"):
            out[key] = int(value)
        elif key == "flag":
            out[key] = value
        else:
            try:
                out[key] = float(value)
            except ValueError:
                raise ParseError(f"bad value for {key}", path, k + 1) from None
    return out


# -- optimisation trace and bias sweep ------------------------------------------------------

TRACE_COLUMNS = ("iter", "stage", "f", "max_residual", "wall_ms")
SWEEP_COLUMNS = ("bias_nm", "wavelength_nm", "eta_eff", "alpha_rad", "v_max")


def write_trace(trace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(TRACE_COLUMNS)]
    for r in trace.records:
        lines.append(f"{r.iteration},{r.stage},{r.f!r},{r.max_residual!r},{r.wall_ms:.3f}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_trace(path) -> list[dict]:
    out = []
    for lineno, r in _csv_rows(path, TRACE_COLUMNS):
        try:
            out.append({"iter": int(r["iter"]), "stage": r["stage"], "f": float(r["f"]),
                        "max_residual": float(r["max_residual"]), "wall_ms": float(r["wall_ms"])})
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from exc
    return out


def write_sweep(result, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(SWEEP_COLUMNS)]
    for r in result.records:
        lines.append(",".join([scaled_repr(r.bias, 9), scaled_repr(r.wavelength, 9),
                               repr(float(r.eta_eff)), repr(float(r.alpha)), repr(float(r.v_max))]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_sweep(path) -> list[dict]:
    out = []
    for lineno, r in _csv_rows(path, SWEEP_COLUMNS):
        try:
            out.append({"bias": unscale(r["bias_nm"], 9),
                        "wavelength": unscale(r["wavelength_nm"], 9),
                        "eta_eff": float(r["eta_eff"]), "alpha": float(r["alpha_rad"]),
                        "v_max": float(r["v_max"])})
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from exc
    return out


# -- plot data -----------------------------------------------------------------------------


def emit_plot_data(artifact, kind: str, path, source: int = 1, monitors=(3, 4)) -> Path:
    """CSV behind a plot.

    ``dip``: ``(scan, fit)`` -> tau_ps, counts, fit. ``spectrum``: list of
    S-matrices -> wavelength_nm and ``|S_m,source|^2`` per monitor. ``bias``: a
    sweep result, same rows as the sweep CSV. ``trace``: an optimisation trace.
    """
    from .bias import BiasSweepResult
    from .optimize import OptimizationTrace

    path = Path(path)
    if kind == "dip":
        if not (isinstance(artifact, tuple) and len(artifact) == 2
                and isinstance(artifact[0], CoincidenceScan) and isinstance(artifact[1], DipFit)):
            raise ConfigurationError("dip plot needs a (CoincidenceScan, DipFit) pair")
        scan, fit = artifact
        model = fit.model(scan.tau)
        lines = ["tau_ps,counts,fit"]
        lines += [f"{t!r},{int(c)},{float(m)!r}" for t, c, m in
                  zip(scan.tau_ps.tolist(), scan.counts.tolist(), model)]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
        return path
    if kind == "spectrum":
        sms = list(artifact) if isinstance(artifact, (list, tuple)) else None
        if not sms or not all(isinstance(s, ScatteringMatrix) for s in sms):
            raise ConfigurationError("spectrum plot needs a list of ScatteringMatrix")
        cols = ["wavelength_nm"] + [f"S{m}{source}_mag2" for m in monitors]
        lines = [",".join(cols)]
        for sm in sorted(sms, key=lambda s: s.wavelength):
            vals = [repr(abs(sm[m, source]) ** 2) for m in monitors]
            lines.append(",".join([scaled_repr(sm.wavelength, 9)] + vals))
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
        return path
    if kind == "bias":
        if not isinstance(artifact, BiasSweepResult):
            raise ConfigurationError("bias plot needs a BiasSweepResult")
        return write_sweep(artifact, path)
    if kind == "trace":
        if not isinstance(artifact, OptimizationTrace):
            raise ConfigurationError("trace plot needs an OptimizationTrace")
        return write_trace(artifact, path)
    raise ConfigurationError(f"unknown plot kind {kind!r}")


def sniff_kind(path) -> str | None:
    """Which plot kind a CSV artifact holds, judged from its column header."""
    for ln in _read_lines(path):
        if not ln.strip() or ln.startswith("#"):
            continue
        cols = tuple(c.strip() for c in ln.split(","))
        if cols[:2] == ("tau_ps", "counts"):
            return "dip"
        if cols[:len(SMATRIX_COLUMNS)] == SMATRIX_COLUMNS:
            return "spectrum"
        if cols[:len(SWEEP_COLUMNS)] == SWEEP_COLUMNS:
            return "bias"
        if cols[:len(TRACE_COLUMNS)] == TRACE_COLUMNS:
            return "trace"
        return None
    return None
