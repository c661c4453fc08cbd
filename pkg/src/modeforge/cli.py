"""``modeforge`` command-line entry point.

Exit codes: 0 success, 2 configuration, 3 solver, 4 fit, 5 file I/O. On
failure a one-line JSON error report goes to stderr (and to ``error.json`` in
the output directory when one was given).
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as mfio
from .bias import sweep_bias
from .config import (RunConfig, _key_lines, config_from_dict, default_threads, parse_config,
                     to_si, write_resolved)
from .design import feature_size_check
from .errors import ConfigurationError, ModeforgeError, ParseError, SolverError
from .fdfd import PmlSpec, compute_smatrix
from .hom import (BeamsplitterMatrix, OverlapModel, ScanProtocol, fit_dip, from_smatrix,
                  predict_visibility, rate_for_baseline, simulate_scan)
from .layout import mode_beamsplitter, mode_multiplexer, small_fixture, tritter
from .modes import DEFAULT_MATERIALS
from .optimize import OptimizationConfig, run_optimization, validate_gradient

log = logging.getLogger("modeforge")

_UNITS = {"nm": -9, "um": -6, "µm": -6, "ps": -12, "m": 0}


def parse_values(text: str, default_unit: str = "nm") -> list[float]:
    """``start:step:stop<unit>`` (inclusive) or ``a,b,c<unit>``, returned in SI units.

    Values are formed from integer multiples of the step, rounded to 1e-9 of
    the unit and then scaled by a decimal shift, so ``1500:10:1600nm`` gives
    exactly 1.5e-06, 1.51e-06, ... 1.6e-06 m.
    """
    s = text.strip().replace(" ", "")
    m = re.fullmatch(r"(.*?)(nm|um|µm|ps|m)?", s)
    body, unit = m.group(1), m.group(2) or default_unit
    exp10 = _UNITS[unit]
    try:
        if ":" in body:
            parts = [float(x) for x in body.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, step, stop = parts
            if step == 0 or (stop - start) / step < 0:
                raise ConfigurationError(f"range {text!r} has a zero or backwards step")
            n = int(np.floor((stop - start) / step + 1e-9))
            vals = [round(start + k * step, 9) for k in range(n + 1)]
        else:
            vals = [float(x) for x in body.split(",") if x]
    except ValueError:
        raise ConfigurationError(f"cannot parse value list {text!r}") from None
    if not vals:
        raise ConfigurationError(f"empty value list {text!r}")
    return [to_si(v, exp10) for v in vals]


def build_layout(cfg: RunConfig, design_cells: int | None = None):
    dx = to_si(cfg.dx_nm, -9)
    pml = PmlSpec(cfg.pml_thickness, cfg.pml_sigma_max, cfg.pml_order)
    wl = cfg.wavelengths[0]
    if design_cells is not None:
        return small_fixture(cfg.device, design_cells, dx, wl, pml, DEFAULT_MATERIALS)
    kw = dict(domain=to_si(cfg.domain_um, -6), dx=dx, design=to_si(cfg.design_um, -6),
              wavelength=wl, pml=pml, materials=DEFAULT_MATERIALS)
    if cfg.device == "mbs":
        return mode_beamsplitter(**kw)
    if cfg.device == "mdm":
        return mode_multiplexer(**kw)
    return tritter(**kw)


def optimization_config(cfg: RunConfig, threads: int = 1) -> OptimizationConfig:
    return OptimizationConfig(
        wavelengths=cfg.wavelengths,
        objective=cfg.objective or cfg.device,
        targets=cfg.targets,
        continuous_iters=cfg.continuous_iterations,
        levelset_iters=cfg.levelset_iterations,
        min_feature=to_si(cfg.min_feature_nm, -9),
        filter_radius=None if cfg.filter_radius_nm is None else to_si(cfg.filter_radius_nm, -9),
        init_noise=cfg.init_noise,
        seed=cfg.seed,
        threads=threads,
    )


def _hom_summary(smatrices, i0):
    rows = []
    for sm in smatrices:
        bs = from_smatrix(sm)
        rows.append({"wavelength_nm": mfio.scaled_repr(sm.wavelength, 9), "eta_eff": bs.eta_eff,
                     "alpha_rad": bs.alpha, "v_max": predict_visibility(bs, i0)})
    return rows


def _write_yaml(path: Path, doc: dict):
    import yaml

    path.write_text(yaml.safe_dump(doc, sort_keys=False, default_flow_style=False))


def _load_design(cfg: RunConfig, design: str | None):
    path = design or cfg.design
    if path is None:
        raise ConfigurationError("no design file given (use --design or the 'design' key)")
    eps_map = mfio.read_permittivity(path)
    return eps_map


def _layout_for(cfg: RunConfig, eps_map):
    lay = build_layout(cfg)
    if lay.grid.shape != eps_map.grid.shape or lay.grid.dx != eps_map.grid.dx:
        raise ConfigurationError(
            f"design grid {eps_map.grid.shape} at {eps_map.grid.dx * 1e9:g} nm does not match the "
            f"configured device grid {lay.grid.shape} at {lay.grid.dx * 1e9:g} nm")
    return lay


# -- commands ----------------------------------------------------------------------------


def cmd_optimize(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    write_resolved(cfg, out, "optimize", {"threads": args.threads})
    lay = build_layout(cfg)
    ocfg = optimization_config(cfg, args.threads)
    result = run_optimization(lay, ocfg)
    mfio.write_permittivity(result.eps_map, out / "design.json")
    mfio.write_trace(result.trace, out / "trace.csv")
    sms = compute_smatrix(result.eps_map, lay.ports, cfg.wavelengths, lay.pml, lay.materials,
                          threads=args.threads)
    mfio.write_smatrices(sms, out / "smatrix.csv")
    report = feature_size_check(result.eps_map, ocfg.min_feature) if result.eps_map.is_binary() else None
    summary = {"objective": ocfg.objective, "f": float(ocfg.build_objective()(sms)),
               "iterations": len(result.trace), "converged": bool(result.trace.converged),
               "binary": bool(result.eps_map.is_binary()),
               "feature_violations": None if report is None else len(report)}
    if cfg.device in ("mbs", "mdm"):
        summary["hom"] = _hom_summary(sms, cfg.hom.i0)
    _write_yaml(out / "summary.yaml", summary)
    print(f"f = {summary['f']:.6f}  ({len(result.trace)} iterations)")
    for row in summary.get("hom", []):
        print(f"{row['wavelength_nm']} nm: eta_eff = {row['eta_eff']:.4f}  "
              f"alpha = {row['alpha_rad']:.4f} rad  V_max = {row['v_max']:.6f}")
    return 0


def cmd_validate_gradient(cfg: RunConfig, args) -> int:
    samples = args.samples if args.samples is not None else cfg.gradient.samples
    lay = build_layout(cfg, cfg.gradient.design_cells)
    ocfg = optimization_config(cfg)
    # fixtures are tiny; the feature constraint does not apply to a gradient check
    ocfg.min_feature = max(ocfg.min_feature, 2 * lay.grid.dx)
    check = validate_gradient(lay, ocfg, samples, cfg.gradient.step, seed=cfg.seed)
    lines = ["ix,iy,adjoint,finite_difference,rel_error"]
    for (i, j), a, f, e in zip(check.cells, check.adjoint, check.finite_difference, check.rel_error):
        lines.append(f"{i},{j},{a!r},{f!r},{e!r}")
        print(f"cell ({i:2d},{j:2d})  adjoint {a:+.6e}  fd {f:+.6e}  rel {e:.2e}")
    if args.out:
        out = Path(args.out)
        write_resolved(cfg, out, "validate-gradient", {"samples": samples})
        (out / "gradient.csv").write_text("\n".join(lines) + "\n")
    ok = check.passed(cfg.gradient.tolerance)
    print(f"max relative error {check.max_error:.3e} ({'pass' if ok else 'FAIL'}, "
          f"tolerance {cfg.gradient.tolerance:g})")
    if not ok:
        raise SolverError("adjoint gradient disagrees with finite differences",
                          residual=check.max_error)
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    eps_map = _load_design(cfg, args.design)
    lay = _layout_for(cfg, eps_map)
    wls = parse_values(args.wavelengths) if args.wavelengths else list(cfg.wavelengths)
    sms = compute_smatrix(eps_map, lay.ports, wls, lay.pml, lay.materials, threads=args.threads)
    out = Path(args.out)
    write_resolved(cfg, out, "simulate", {"design": str(args.design or cfg.design),
                                          "wavelengths_m": wls})
    mfio.write_smatrices(sms, out / "smatrix.csv")
    for sm in sms:
        cols = "  ".join(f"|S{m}{s}|^2={abs(sm[m, s]) ** 2:.4f}" for s in sm.sources for m in sm.monitors)
        print(f"{sm.wavelength * 1e9:.1f} nm  {cols}")
    return 0


def cmd_sweep_bias(cfg: RunConfig, args) -> int:
    eps_map = _load_design(cfg, args.design)
    lay = _layout_for(cfg, eps_map)
    biases = parse_values(args.biases) if args.biases else [to_si(b, -9) for b in cfg.sweep.biases_nm]
    wls = (parse_values(args.wavelengths) if args.wavelengths
           else [to_si(w, -9) for w in cfg.sweep.wavelengths_nm])
    i0 = args.i0 if args.i0 is not None else cfg.hom.i0
    min_feature = to_si(args.min_feature_nm if args.min_feature_nm is not None else cfg.min_feature_nm, -9)
    subpixel = cfg.sweep.subpixel and not args.binary
    result = sweep_bias(eps_map, biases, wls, lay.ports, lay.pml, i0, lay.materials,
                        min_feature, subpixel, threads=args.threads)
    out = Path(args.out)
    write_resolved(cfg, out, "sweep-bias", {"design": str(args.design or cfg.design),
                                            "biases_m": biases, "wavelengths_m": wls, "i0": i0,
                                            "min_feature_m": min_feature, "subpixel": subpixel})
    mfio.write_sweep(result, out / "sweep.csv")
    failed = [r for r in result.records if not r.ok]
    for r in failed:
        print(f"bias {r.bias * 1e9:+.2f} nm, {r.wavelength * 1e9:.1f} nm failed: {r.error}")
    print(f"{len(result)} points, {len(failed)} failed")
    if 0.0 in result.biases() and result.v_max(0.0) >= 0.5:
        lo, hi = result.threshold_bias(0.5)
        print(f"V_max >= 0.5 for bias in [{lo * 1e9:+.2f}, {hi * 1e9:+.2f}] nm")
    return 0


def _splitter_from_args(cfg: RunConfig, args):
    if getattr(args, "smatrix", None):
        sms = mfio.read_smatrices(args.smatrix)
        if args.wavelength_nm is not None:
            sms = [s for s in sms if abs(s.wavelength * 1e9 - args.wavelength_nm) < 1e-6]
            if not sms:
                raise ConfigurationError(f"no S-matrix at {args.wavelength_nm} nm in {args.smatrix}")
        return [(s.wavelength, from_smatrix(s)) for s in sms]
    eta = args.eta if args.eta is not None else cfg.hom.eta
    if eta is None:
        raise ConfigurationError("give --smatrix or --eta (or hom.eta in the config)")
    alpha = args.alpha if args.alpha is not None else cfg.hom.alpha
    return [(None, BeamsplitterMatrix.from_eta(eta, alpha))]


def cmd_hom_predict(cfg: RunConfig, args) -> int:
    i0 = args.i0 if args.i0 is not None else cfg.hom.i0
    rows = []
    for wl, bs in _splitter_from_args(cfg, args):
        v = predict_visibility(bs, i0)
        prefix = "" if wl is None else f"{mfio.scaled_repr(wl, 9)} nm: "
        print(f"{prefix}eta_eff = {bs.eta_eff:.6f}  alpha = {bs.alpha:.6f} rad  V = {v:.6f}")
        rows.append((wl, bs, v))
    if args.out:
        out = Path(args.out)
        write_resolved(cfg, out, "hom predict", {"i0": i0})
        lines = ["wavelength_nm,eta_eff,alpha_rad,v_max"]
        for wl, bs, v in rows:
            w = "" if wl is None else mfio.scaled_repr(wl, 9)
            lines.append(f"{w},{bs.eta_eff!r},{bs.alpha!r},{v!r}")
        (out / "predict.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_hom_simulate(cfg: RunConfig, args) -> int:
    h = cfg.hom
    i0 = args.i0 if args.i0 is not None else h.i0
    seed = args.seed if args.seed is not None else cfg.seed
    pairs = _splitter_from_args(cfg, args)
    if len(pairs) != 1:
        raise ConfigurationError("several wavelengths in the S-matrix file; pick one with --wavelength-nm")
    _, bs = pairs[0]
    overlap = OverlapModel(h.kind, i0, to_si(h.width_ps, -12))
    protocol = ScanProtocol(h.half_range_ps, h.coarse_step_ps, h.fine_half_ps, h.fine_points,
                            h.integration_s, h.window_ns)
    baseline = args.baseline if args.baseline is not None else h.baseline
    rate = rate_for_baseline(bs, baseline, 1.0)
    scan = simulate_scan(bs, overlap, protocol, rate, seed)
    out = Path(args.out)
    write_resolved(cfg, out, "hom simulate", {"i0": i0, "seed": seed, "baseline": baseline,
                                              "eta_eff": bs.eta_eff, "alpha": bs.alpha})
    mfio.write_scan(scan, out / "scan.csv")
    print(f"{len(scan)} points, model V = {predict_visibility(bs, i0):.6f}, "
          f"baseline {baseline:g} counts per {h.integration_s:g} s")
    return 0


def cmd_hom_fit(cfg: RunConfig, args) -> int:
    scan = mfio.read_scan(args.scan)
    fit = fit_dip(scan)
    print(f"V = {fit.visibility:.6f} +- {fit.sigma_v:.6f}  tau0 = {fit.tau0 * 1e12:.4f} ps  "
          f"w = {fit.width * 1e12:.4f} ps  N = {fit.baseline:.2f}  "
          f"chi2/dof = {fit.reduced_chi2:.3f}  [{fit.flag}]")
    if args.out:
        out = Path(args.out)
        write_resolved(cfg, out, "hom fit", {"scan": str(args.scan)})
        mfio.write_fit(fit, out / "fit.txt")
        mfio.emit_plot_data((scan, fit), "dip", out / "dip.csv")
    return 0


def cmd_emit_plot(cfg: RunConfig, args) -> int:
    from .bias import BiasRecord, BiasSweepResult
    from .optimize import OptimizationTrace, TraceRecord

    found = mfio.sniff_kind(args.input)
    if found != args.kind:
        raise ConfigurationError(f"{args.input} holds {found or 'unknown'} data, not {args.kind}")
    if args.kind == "dip":
        scan = mfio.read_scan(args.input)
        artifact = (scan, fit_dip(scan))
    elif args.kind == "spectrum":
        artifact = mfio.read_smatrices(args.input)
    elif args.kind == "bias":
        artifact = BiasSweepResult([BiasRecord(r["bias"], r["wavelength"], None, r["eta_eff"],
                                               r["alpha"], r["v_max"]) for r in mfio.read_sweep(args.input)])
    else:
        artifact = OptimizationTrace([TraceRecord(r["iter"], r["stage"], r["f"], r["max_residual"],
                                                  r["wall_ms"]) for r in mfio.read_trace(args.input)])
    path = mfio.emit_plot_data(artifact, args.kind, args.out)
    print(f"wrote {path}")
    return 0


# -- argument parsing ----------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modeforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"modeforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False, out_help="output directory"):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--preset", choices=["A", "B", "C"], help="named parameter preset")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $MODEFORGE_THREADS or all cores)")
        sp.add_argument("--out", required=out_required, help=out_help)
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("optimize", help="run the two-stage topology optimisation")
    common(sp, out_required=True)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("validate-gradient", help="adjoint vs central differences")
    common(sp)
    sp.add_argument("--samples", type=int)
    sp.set_defaults(func=cmd_validate_gradient)

    sp = sub.add_parser("simulate", help="S-matrix of a design file")
    common(sp, out_required=True)
    sp.add_argument("--design")
    sp.add_argument("--wavelengths", help="e.g. 1500:10:1600nm or 1550nm")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep-bias", help="visibility versus fabrication bias")
    common(sp, out_required=True)
    sp.add_argument("--design")
    sp.add_argument("--biases", help="e.g. -5:1:5nm")
    sp.add_argument("--wavelengths", help="e.g. 1500:10:1600nm")
    sp.add_argument("--i0", type=float)
    sp.add_argument("--min-feature-nm", type=float)
    sp.add_argument("--binary", action="store_true", help="re-binarise biased geometry")
    sp.set_defaults(func=cmd_sweep_bias)

    hom = sub.add_parser("hom", help="two-photon interference tools")
    hsub = hom.add_subparsers(dest="hom_command", required=True)

    def splitter(sp):
        sp.add_argument("--smatrix", help="S-matrix CSV")
        sp.add_argument("--wavelength-nm", type=float, help="pick one wavelength from --smatrix")
        sp.add_argument("--eta", type=float, help="splitting ratio of a symmetric splitter")
        sp.add_argument("--alpha", type=float, help="phase alpha in radians (default pi)")
        sp.add_argument("--i0", type=float, help="overlap at zero delay")

    sp = hsub.add_parser("predict", help="maximum visibility from a splitter")
    common(sp)
    splitter(sp)
    sp.set_defaults(func=cmd_hom_predict)

    sp = hsub.add_parser("simulate", help="synthetic coincidence scan")
    common(sp, out_required=True)
    splitter(sp)
    sp.add_argument("--baseline", type=float, help="mean counts per point outside the dip")
    sp.set_defaults(func=cmd_hom_simulate)

    sp = hsub.add_parser("fit", help="triangular dip fit")
    common(sp)
    sp.add_argument("--scan", required=True)
    sp.set_defaults(func=cmd_hom_fit)

    sp = sub.add_parser("emit-plot", help="CSV data behind a plot")
    common(sp, out_required=True, out_help="output CSV file")
    sp.add_argument("--kind", required=True, choices=["dip", "spectrum", "bias", "trace"])
    sp.add_argument("--input", required=True)
    sp.set_defaults(func=cmd_emit_plot)
    return p


def _command_name(args) -> str:
    return f"hom {args.hom_command}" if args.command == "hom" else args.command


def run_command(cfg: RunConfig, args) -> int:
    """Execute a parsed command with a validated config."""
    return args.func(cfg, args)


def _error_dir(args):
    if not args.out:
        return None
    # emit-plot writes a single file; its report goes next to it
    return str(Path(args.out).parent) if args.command == "emit-plot" else args.out


def _error_report(exc, code, out):
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    line = json.dumps(doc)
    print(line, file=sys.stderr)
    if out:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "error.json").write_text(line + "\n")
        except OSError:
            pass


_RANGE_OPTIONS = ("--biases", "--wavelengths")


def _join_ranges(argv):
    # "--biases -5:1:5nm" would otherwise read the value as an option
    out, it = [], iter(argv)
    for tok in it:
        if tok in _RANGE_OPTIONS:
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = _parser().parse_args(_join_ranges(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = _load_config(args)
        if args.threads is None:
            args.threads = default_threads()
        elif args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        return run_command(cfg, args)
    except ModeforgeError as exc:
        _error_report(exc, exc.exit_code, _error_dir(args))
        return exc.exit_code
    except OSError as exc:
        _error_report(exc, ParseError.exit_code, _error_dir(args))
        return ParseError.exit_code


def _load_config(args) -> RunConfig:
    """Config file (or defaults) with ``--preset`` and ``--seed`` applied on top."""
    import yaml

    cfg = parse_config(args.config) if args.config else config_from_dict({})
    if args.preset is None and args.seed is None:
        return cfg
    data, lines = {}, {}
    if args.config:
        text = Path(args.config).read_text()
        data, lines = yaml.safe_load(text) or {}, _key_lines(text)
    if args.preset is not None:
        # explicit keys in the file still override the preset values
        data["preset"] = args.preset
    if args.seed is not None:
        data["seed"] = args.seed
    return config_from_dict(data, cfg.source, lines)


if __name__ == "__main__":
    sys.exit(main())
