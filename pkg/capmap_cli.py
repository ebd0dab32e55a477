#!/usr/bin/env python3
"""
capmap command-line interface

Batch front end for the spherical-cap parameterization toolkit:

    param-open / param-closed   parameterize a mesh, write cap mesh + JSON report
    ah-fit / ah-recon / ah-ratio adaptive-harmonics fit, reconstruction, aspect ratio
    gen                         synthetic test surfaces
    metrics                     distortion of a parameterization
    remesh                      regular cap mesh pulled back onto the surface

Exit codes: 0 ok, 2 usage/input, 3 topology, 4 solver, 5 flipped faces,
6 ill-posed fit.
"""

import os

# BLAS/OpenMP pools read these once, when numpy is first imported
_THREADS = os.getenv("CAPMAP_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from adaptive import CapMap, parameterize_closed, parameterize_open, sweep_lambda
from capmap_errors import EXIT_OK, EXIT_USAGE, ArgumentError, CapMapError, PipelineError
from harmonics import AHModel, ah_reconstruct, cap_angles, fit_surface, surface_aspect_ratio
from mesh_core import TriangleMesh, load_mesh, save_mesh
from metrics import distortion_report, face_area_deviation, surface_distance, two_sample_t
from remesh import cap_uniform_mesh, latlong_cap_mesh, pullback
from run_config import RunConfig, load_config
from surface_generator import SHAPES, generate

logger = logging.getLogger("capmap")


def _write_json(path: str, payload: Dict[str, object]) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _read_json(path: str) -> Dict[str, object]:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ArgumentError(f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise ArgumentError(f"{path} is not valid JSON: {e}")


def _load_cap(cap_path: str, report_path: str) -> CapMap:
    return CapMap.from_report(load_mesh(cap_path), _read_json(report_path))


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "command": args.command,
        "input": getattr(args, "input", None),
        "output": getattr(args, "output", None),
        "report": getattr(args, "report", None),
        "lam": getattr(args, "lam", None),
        "r_lo": getattr(args, "r_lo", None),
        "r_hi": getattr(args, "r_hi", None),
        "rtol": getattr(args, "rtol", None),
        "omt_method": getattr(args, "omt_method", None),
        "omt_diagnostics": getattr(args, "omt_diagnostics", None),
        "domain_mode": getattr(args, "domain", None),
        "fixed_radius": getattr(args, "fixed_radius", None),
        "energy_measure": getattr(args, "energy_measure", None),
        "normalization": getattr(args, "normalization", None),
        "axis": getattr(args, "axis", None),
        "order": getattr(args, "order", None),
        "seed": getattr(args, "seed", None),
        "strict": getattr(args, "strict", None) or None,
    }
    return load_config(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _parse_sweep(text: str) -> List[float]:
    try:
        start, stop, step = (float(part) for part in text.split(":"))
    except ValueError:
        raise ArgumentError(f"sweep must look like start:stop:step, got '{text}'")
    if step <= 0 or stop < start:
        raise ArgumentError(f"invalid sweep range '{text}'")
    return [float(v) for v in np.round(np.arange(start, stop + 0.5 * step, step), 12)]


def cmd_param(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    mesh = load_mesh(config.input)
    opts = config.pipeline_options()
    closed = args.command == "param-closed"

    if closed and args.sweep_lambda:
        rows = sweep_lambda(mesh, _parse_sweep(args.sweep_lambda), opts)
        with open(config.report, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        print(f"✅ Lambda sweep over {len(rows)} value(s) written to {config.report}")
        return EXIT_OK

    cap, report = (parameterize_closed if closed else parameterize_open)(mesh, opts)
    save_mesh(config.output, cap.as_mesh())
    payload = report.to_dict()
    payload["options"] = {k: v for k, v in asdict(config).items() if k not in ("command", "input", "output", "report")}
    payload["input"] = config.input
    _write_json(config.report, payload)
    print(f"✅ {args.command}: Z* = {report.z_star:.4f} (r* = {report.r_star:.4f}), "
          f"mean |d_area| = {report.distortion['mean_abs_d_area']:.4f}, "
          f"mean |d_angle| = {report.distortion['mean_abs_d_angle']:.4f}")
    for warning in report.warnings:
        print(f"⚠️ {warning}")
    return EXIT_OK


def cmd_ah_fit(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    mesh = load_mesh(args.mesh)
    cap = _load_cap(args.cap, args.param_report)
    model = fit_surface(mesh.vertices, cap.positions, config.order, cap.spec.zstar)
    model.metadata.update({"mesh": args.mesh, "cap": args.cap})
    model.save(args.output)
    print(f"✅ AH fit order {model.order}: {model.coefficients.shape[0]} coefficients per coordinate, "
          f"RMS residual {model.residual_rms:.6g}")
    return EXIT_OK


def cmd_ah_recon(args: argparse.Namespace) -> int:
    model = AHModel.load(args.model)
    cap_mesh = load_mesh(args.cap)
    theta, phi = cap_angles(cap_mesh.vertices, model.zstar)
    points = ah_reconstruct(model, theta, phi)
    save_mesh(args.output, TriangleMesh(points, cap_mesh.faces))
    summary: Dict[str, object] = {"order": model.order, "zstar": model.zstar, "fit_rms": model.residual_rms}
    if args.reference:
        reference = load_mesh(args.reference)
        if reference.n_vertices != len(points):
            raise ArgumentError("reference mesh must have one vertex per cap vertex")
        summary["rms"] = float(np.sqrt(np.mean(np.sum((points - reference.vertices) ** 2, axis=1))))
    if args.summary:
        _write_json(args.summary, summary)
    print(f"✅ Reconstructed {len(points)} vertices at order {model.order}"
          + (f", RMS {summary['rms']:.6g}" if "rms" in summary else ""))
    return EXIT_OK


def _group_ratios(items: Sequence[str]) -> List[float]:
    ratios = []
    for item in items:
        parts = item.split(",")
        if len(parts) != 3:
            raise ArgumentError(f"expected mesh,cap,report triples, got '{item}'")
        mesh = load_mesh(parts[0])
        cap = _load_cap(parts[1], parts[2])
        ratios.append(surface_aspect_ratio(mesh.vertices, cap.positions, cap.spec.zstar)["ratio"])
    return ratios


def cmd_ah_ratio(args: argparse.Namespace) -> int:
    group_a = _group_ratios(args.group_a)
    result: Dict[str, object] = {"group_a": group_a, "directions": "cap positions"}
    if args.group_b:
        group_b = _group_ratios(args.group_b)
        result["group_b"] = group_b
        result["t_test"] = two_sample_t(group_a, group_b, equal_var=not args.welch)
    if args.output:
        _write_json(args.output, result)
    print(f"✅ Aspect ratios: {', '.join(f'{r:.4f}' for r in group_a)}")
    if "t_test" in result:
        test = result["t_test"]
        print(f"   t = {test['t']:.4f}, dof = {test['dof']:.1f}, p = {test['p']:.4g}")
    return EXIT_OK


def cmd_gen(args: argparse.Namespace) -> int:
    params = {}
    if args.stretch:
        params["stretch"] = tuple(args.stretch)
    if args.amplitude is not None:
        params["amplitude"] = args.amplitude
    mesh = generate(args.shape, n=args.n, seed=args.seed, half_angle=args.half_angle, **params)
    save_mesh(args.output, mesh)
    print(f"✅ Generated {args.shape} with {mesh.n_vertices} vertices -> {args.output}")
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    source = load_mesh(args.source)
    if args.param_report:
        image = _load_cap(args.image, args.param_report)
    else:
        image = load_mesh(args.image)
    report = distortion_report(source, image)
    summary: Dict[str, object] = report.summary()
    if args.csv:
        report.write_csv(args.csv)
    if args.output:
        _write_json(args.output, summary)
    print(f"✅ mean |d_area| = {report.mean_abs_d_area:.6f}, mean |d_angle| = {report.mean_abs_d_angle:.6f}")
    return EXIT_OK


def cmd_remesh(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    source = load_mesh(args.source)
    cap = _load_cap(args.cap, args.param_report)
    labels = None
    if args.latlong:
        cap_mesh, labels = latlong_cap_mesh(cap.spec, args.latlong[0], args.latlong[1])
    else:
        cap_mesh = cap_uniform_mesh(cap.spec, args.count)
    result = pullback(cap, source, cap_mesh, strict=config.strict)
    save_mesh(args.output, result.mesh, {"theta": labels} if labels is not None else None)
    summary = {
        "vertices": result.mesh.n_vertices,
        "faces": result.mesh.n_faces,
        "d_face": face_area_deviation(result.mesh),
        "mean_face_area": float(result.mesh.face_areas.mean()),
        "d_surface": surface_distance(result.mesh, source),
        "bbox_diagonal": source.bbox_diagonal,
        "snapped": int(len(result.snapped)),
    }
    if args.summary:
        _write_json(args.summary, summary)
    print(f"✅ Remeshed {summary['vertices']} vertices: d_face = {summary['d_face']:.6g}, "
          f"d_surface = {summary['d_surface']:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON5 preset name (presets/) or path")
    parser.add_argument("--r-lo", type=float, dest="r_lo", help="lower radius bound")
    parser.add_argument("--r-hi", type=float, dest="r_hi", help="upper radius bound")
    parser.add_argument("--rtol", type=float, help="radius search tolerance")
    parser.add_argument("--omt-method", choices=("newton", "gradient"), dest="omt_method")
    parser.add_argument("--omt-diagnostics", dest="omt_diagnostics", help="CSV of final OMT iterations")
    parser.add_argument("--domain", choices=("adaptive", "hemisphere", "sphere"))
    parser.add_argument("--fixed-radius", type=float, dest="fixed_radius")
    parser.add_argument("--energy-measure", choices=("planar", "cap"), dest="energy_measure")
    parser.add_argument("--normalization", choices=("exact", "first-power"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capmap", description="Adaptive spherical-cap parameterization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("param-open", "param-closed"):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} surface to spherical cap")
        p.add_argument("input", help="input mesh (OBJ/OFF/PLY)")
        p.add_argument("output", help="output cap mesh")
        p.add_argument("report", help="output JSON report (CSV for --sweep-lambda)")
        _add_pipeline_flags(p)
        if name == "param-closed":
            p.add_argument("--lambda", type=float, dest="lam", help="quasi-conformal blend in [0, 1]")
            p.add_argument("--axis", type=float, nargs=3, help="alignment axis (default: principal)")
            p.add_argument("--sweep-lambda", dest="sweep_lambda", metavar="A:B:STEP")
        p.set_defaults(handler=cmd_param)

    p = sub.add_parser("ah-fit", help="fit adaptive harmonics to a parameterized surface")
    p.add_argument("mesh")
    p.add_argument("cap", help="cap mesh written by param-*")
    p.add_argument("param_report", help="report written by param-*")
    p.add_argument("output", help="AH model JSON")
    p.add_argument("--order", type=int, default=None)
    p.add_argument("--config")
    p.set_defaults(handler=cmd_ah_fit)

    p = sub.add_parser("ah-recon", help="reconstruct a surface from an AH model")
    p.add_argument("model")
    p.add_argument("cap", help="cap mesh whose vertices are the sample directions")
    p.add_argument("output")
    p.add_argument("--reference", help="mesh to compute the RMS residual against")
    p.add_argument("--summary", help="JSON summary output")
    p.set_defaults(handler=cmd_ah_recon)

    p = sub.add_parser("ah-ratio", help="order-1 aspect ratio per surface, optional group t-test")
    p.add_argument("--a", dest="group_a", nargs="+", required=True, metavar="MESH,CAP,REPORT")
    p.add_argument("--b", dest="group_b", nargs="+", metavar="MESH,CAP,REPORT")
    p.add_argument("--welch", action="store_true", help="unequal-variance t-test")
    p.add_argument("--output")
    p.set_defaults(handler=cmd_ah_ratio)

    p = sub.add_parser("gen", help="generate a synthetic surface")
    p.add_argument("shape", choices=SHAPES)
    p.add_argument("output")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--half-angle", type=float, dest="half_angle", default=np.pi / 3)
    p.add_argument("--stretch", type=float, nargs=3)
    p.add_argument("--amplitude", type=float)
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("metrics", help="distortion of a parameterization")
    p.add_argument("source")
    p.add_argument("image", help="image mesh (cap mesh when --param-report is given)")
    p.add_argument("--param-report", dest="param_report")
    p.add_argument("--output", help="JSON summary")
    p.add_argument("--csv", help="prefix for per-element and histogram CSVs")
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("remesh", help="regular cap mesh pulled back onto the surface")
    p.add_argument("source")
    p.add_argument("cap")
    p.add_argument("param_report")
    p.add_argument("output")
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--latlong", type=int, nargs=2, metavar=("NT", "NP"))
    p.add_argument("--strict", action="store_true")
    p.add_argument("--summary")
    p.set_defaults(handler=cmd_remesh)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    try:
        return args.handler(args)
    except PipelineError as e:
        print(f"❌ {e}", file=sys.stderr)
        for radius, reason in e.failure_table().items():
            print(f"   r = {radius}: {reason}", file=sys.stderr)
        return e.exit_code
    except CapMapError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
