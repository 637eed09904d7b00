"""Command-line front end: ``conservflow {elliptic,hyperbolic,coupled,report}``.

Each subcommand reads an optional JSON config (``--config``), applies flag
overrides, runs, and writes its files plus ``manifest.json`` into
``--out-dir``. Exit codes: 0 success, 2 bad config, 3 solver or numerical
failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import coupling, elliptic, fields_io, hyperbolic
from .grid import build_primal_mesh
from .errors import CFLError, ConfigurationError, ModelError, NumericalFailure, SolverError, StateError

logger = logging.getLogger("conservflow")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

HYPERBOLIC_ALIASES = {
    "advection": "linear_advection",
    "linear_advection": "linear_advection",
    "burgers": "burgers_oblique",
    "burgers_oblique": "burgers_oblique",
    "bl": "bl_radial_verification",
    "bl_radial_verification": "bl_radial_verification",
    "bl_gravity": "bl_gravity",
}

DEFAULTS = {
    "elliptic": {
        "problem": "manufactured",
        "degrees": [1, 2, 3],
        "mesh_ladder": [16, 32, 64],
        "raster": None,
        "raster_layout": None,
        "raster_scale": None,
        "source": 1.0,
        "reference_degree": 3,
        "reference_n": None,
        "solver": "direct",
    },
    "hyperbolic": {
        "problem": "advection",
        "mesh_ladder": [64, 128],
        "cfl": 0.67,
        "t_end": None,
        "method": "donor",
        "limiter": "minmod",
        "frame_times": None,
        "M": 1.0,
        "Cg": 5.0,
        "printed_variant": False,
        "vtk": True,
    },
    "coupled": {
        "medium": "homogeneous",
        "mesh_ladder": [32, 16, 8],
        "raster": None,
        "raster_layout": None,
        "raster_scale": None,
        "Lx": 256.0,
        "Ly": 64.0,
        "q": 0.75,
        "mu_w": 1.0,
        "mu_o": 1.0,
        "degree": 1,
        "cfl": 0.67,
        "t_end": 220.0,
        "frame_times": list(coupling.DEFAULT_FRAMES),
        "pressure_updates_per_frame": 1,
        "s0": 0.0,
        "barrier": [0.4, 0.6, 0.375, 0.625],
        "contrast": 1e4,
        "face_method": "donor",
        "vtk": True,
    },
}


# ---------------------------------------------------------------- config handling


def _parse_list(text, kind, flag):
    try:
        return [kind(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigurationError(f"{flag}: cannot parse {text!r} as a comma-separated list") from None


def resolve_config(sub: str, args) -> dict:
    """Defaults, then the JSON file, then flags. Unknown keys are rejected by name."""
    cfg = json.loads(json.dumps(DEFAULTS[sub]))
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigurationError(f"config file {args.config}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {args.config}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {args.config}: top level must be an object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigurationError(f"unknown config key(s) for {sub}: {', '.join(unknown)}")
        cfg.update(loaded)
    if getattr(args, "problem", None) is not None:
        if "problem" not in cfg:
            raise ConfigurationError(f"--problem is not used by {sub}")
        cfg["problem"] = args.problem
    if getattr(args, "medium", None) is not None:
        if "medium" not in cfg:
            raise ConfigurationError(f"--medium is not used by {sub}")
        cfg["medium"] = args.medium
    if getattr(args, "cfl", None) is not None:
        if "cfl" not in cfg:
            raise ConfigurationError(f"--cfl is not used by {sub}")
        cfg["cfl"] = args.cfl
    if getattr(args, "degree", None) is not None:
        degs = _parse_list(args.degree, int, "--degree")
        if "degrees" in cfg:
            cfg["degrees"] = degs
        elif "degree" in cfg:
            if len(degs) != 1:
                raise ConfigurationError("--degree takes a single value for coupled runs")
            cfg["degree"] = degs[0]
        else:
            raise ConfigurationError(f"--degree is not used by {sub}")
    if getattr(args, "mesh_ladder", None) is not None:
        kind = float if sub == "coupled" else int
        cfg["mesh_ladder"] = _parse_list(args.mesh_ladder, kind, "--mesh-ladder")
    _validate(sub, cfg)
    return cfg


def _validate(sub, cfg):
    if not cfg["mesh_ladder"]:
        raise ConfigurationError("mesh_ladder: at least one mesh is required")
    if sub == "elliptic":
        if cfg["problem"] not in ("manufactured", "spe10"):
            raise ConfigurationError(f"problem: expected manufactured or spe10, got {cfg['problem']!r}")
        if cfg["problem"] == "spe10" and not cfg["raster"]:
            raise ConfigurationError("raster: the spe10 problem needs a raster file")
        for d in cfg["degrees"]:
            if not 1 <= int(d) <= 6:
                raise ConfigurationError(f"degrees: {d} outside 1..6")
    elif sub == "hyperbolic":
        if cfg["problem"] not in HYPERBOLIC_ALIASES:
            raise ConfigurationError(
                f"problem: expected one of {sorted(HYPERBOLIC_ALIASES)}, got {cfg['problem']!r}"
            )
        if not 0 < float(cfg["cfl"]) < 1:
            raise ConfigurationError(f"cfl: must lie in (0, 1), got {cfg['cfl']}")
        if cfg["method"] not in hyperbolic.FACE_METHODS:
            raise ConfigurationError(f"method: expected one of {hyperbolic.FACE_METHODS}")
    elif sub == "coupled":
        if cfg["medium"] not in coupling.MEDIA:
            raise ConfigurationError(f"medium: expected one of {coupling.MEDIA}, got {cfg['medium']!r}")
        if cfg["medium"] == "raster" and not cfg["raster"]:
            raise ConfigurationError("raster: medium 'raster' needs a raster file")
        if not 0 < float(cfg["cfl"]) < 1:
            raise ConfigurationError(f"cfl: must lie in (0, 1), got {cfg['cfl']}")


def _load_raster(cfg):
    try:
        return fields_io.load_raster(cfg["raster"], cfg["raster_layout"], cfg["raster_scale"])
    except OSError as exc:
        raise ConfigurationError(f"raster: {exc}") from None


# ---------------------------------------------------------------- subcommands


def cmd_elliptic(cfg: dict) -> fields_io.OutputBundle:
    """Indicator/error table over degrees and meshes."""
    t0 = time.perf_counter()
    rows = []
    report = {}
    if cfg["problem"] == "manufactured":
        p, grad, q = elliptic.manufactured_solution()
        for r in cfg["degrees"]:
            for n in cfg["mesh_ladder"]:
                rows.append(elliptic.compare_methods(n, r, source=q, exact=(p, grad), method=cfg["solver"]))
                logger.info("elliptic r=%d n=%d: %s", r, n, rows[-1])
    else:
        raster = _load_raster(cfg)
        report["raster"] = {"provenance": raster.provenance, "shape": list(raster.shape),
                            "contrast": raster.contrast}
        n_ref = int(cfg["reference_n"] or max(cfg["mesh_ladder"]))
        mesh_ref = build_primal_mesh(n_ref, n_ref)
        ref = elliptic.solve_pressure(
            mesh_ref, int(cfg["reference_degree"]),
            elliptic.MobilityField(raster.resample(n_ref, n_ref).element_values()),
            float(cfg["source"]), method=cfg["solver"],
        )
        exact = elliptic.as_exact(ref)
        report["reference"] = {"degree": int(cfg["reference_degree"]), "n": n_ref}
        for r in cfg["degrees"]:
            for n in cfg["mesh_ladder"]:
                mob = raster.resample(n, n).element_values()
                rows.append(elliptic.compare_methods(n, r, mob, float(cfg["source"]), exact, cfg["solver"]))
                logger.info("elliptic spe10 r=%d n=%d: %s", r, n, rows[-1])
    report["max_J_HOCFEM"] = max(r["J_HOCFEM"] for r in rows)
    return fields_io.OutputBundle(
        "elliptic",
        config=cfg,
        tolerances={"kkt_backward_error": 1e-12},
        tables={f"elliptic_{cfg['problem']}": (fields_io.ELLIPTIC_COLUMNS, rows)},
        timings={"run_seconds": time.perf_counter() - t0},
        report=report,
    )


def _default_frames(problem, t_end):
    if problem == "bl_radial_verification":
        return (10.0, 110.0, t_end)
    return tuple(t_end * k / 4 for k in (1, 2, 3, 4))


def _symmetry_error(U: hyperbolic.CellField) -> float:
    return float(np.abs(U.values - U.values[::-1, :]).max())


def cmd_hyperbolic(cfg: dict) -> fields_io.OutputBundle:
    """Snapshots for every grid, plus a convergence table when an exact solution exists."""
    t0 = time.perf_counter()
    problem = HYPERBOLIC_ALIASES[cfg["problem"]]
    kw = {"M": cfg["M"], "Cg": cfg["Cg"], "printed_variant": cfg["printed_variant"]}
    bundle = fields_io.OutputBundle("hyperbolic", config=cfg, tolerances={"cfl": cfg["cfl"]})
    rows, report = [], {"problem": problem, "runs": []}
    for n in cfg["mesh_ladder"]:
        setup = hyperbolic.setup_problem(problem, n, cfg["t_end"], **kw)
        frames = cfg["frame_times"] or _default_frames(problem, setup.t_end)
        lo, hi = [np.inf], [-np.inf]
        sym = [0.0]

        def watch(U, _rep):
            lo[0] = min(lo[0], float(U.values.min()))
            hi[0] = max(hi[0], float(U.values.max()))
            if problem == "bl_gravity":
                sym[0] = max(sym[0], _symmetry_error(U))

        res = hyperbolic.advance(setup.field, setup.model, setup.t_end, cfg["cfl"], setup.bc, cfg["method"],
                                 cfg["limiter"], setup.velocity, frames, on_step=watch)
        run = {"n": n, "steps": res.steps, "min": lo[0], "max": hi[0]}
        if problem == "bl_gravity":
            run["max_x_reflection_asymmetry"] = sym[0]
        for k, F in enumerate(res.frames):
            stem = f"{problem}_n{n}_frame{k}"
            bundle.matrices[stem] = (F.values, {"h": F.h, "t": F.t})
            if cfg["vtk"]:
                bundle.vtk[stem] = (F.x_edges, F.y_edges, {"u": F.values})
        if setup.exact is not None:
            errs = hyperbolic.error_norms(res.field, setup.exact(res.field))
            run["errors"] = errs
            rows.append({"Cells": f"{n}x{setup.field.shape[1]}", "h": setup.field.h,
                         "err_l1": errs[0], "err_l2": errs[1], "err_linf": errs[2]})
        report["runs"].append(run)
        logger.info("hyperbolic %s n=%d: %s", problem, n, run)
    if rows:
        for k, row in enumerate(rows):
            for norm in ("l1", "l2", "linf"):
                row[f"order_{norm}"] = float("nan") if k == 0 else float(
                    np.log(rows[k - 1][f"err_{norm}"] / row[f"err_{norm}"]) / np.log(rows[k - 1]["h"] / row["h"]))
        if len(rows) >= 2:
            hs = np.array([r["h"] for r in rows])
            report["fits"] = {norm: hyperbolic.fit_power_law(hs, np.array([r[f"err_{norm}"] for r in rows]))
                              for norm in ("l1", "l2", "linf")}
        bundle.tables[f"convergence_{problem}"] = (fields_io.TABLE_COLUMNS, rows)
    bundle.report = report
    bundle.timings = {"run_seconds": time.perf_counter() - t0}
    return bundle


def _simulation_config(cfg, h, raster):
    return coupling.SimulationConfig(
        Lx=cfg["Lx"], Ly=cfg["Ly"], h=float(h), q=cfg["q"], mu_w=cfg["mu_w"], mu_o=cfg["mu_o"],
        degree=int(cfg["degree"]), theta=float(cfg["cfl"]), t_end=cfg["t_end"], frame_times=tuple(cfg["frame_times"]),
        pressure_updates_per_frame=int(cfg["pressure_updates_per_frame"]), s0=cfg["s0"], medium=cfg["medium"],
        barrier=tuple(cfg["barrier"]), contrast=cfg["contrast"], raster=raster, face_method=cfg["face_method"],
    )


def cmd_coupled(cfg: dict) -> fields_io.OutputBundle:
    """Frames and mass-error series for every mesh size in the ladder."""
    t0 = time.perf_counter()
    raster = _load_raster(cfg) if cfg["medium"] == "raster" else None
    bundle = fields_io.OutputBundle("coupled", config=cfg, tolerances={"saturation_bounds": coupling.BOUND_TOL})
    mass_rows, report = [], {"runs": []}
    finals = {}
    for h in cfg["mesh_ladder"]:
        sim = _simulation_config(cfg, h, raster)
        run = coupling.run_coupled(sim)
        tag = f"h{h:g}"
        for k, st in enumerate(run.frames):
            vx, vy = st.velocity
            meta = {"h": sim.h, "t": st.t}
            bundle.matrices[f"saturation_{tag}_frame{k}"] = (st.S.values, meta)
            # cell-centred velocity from the face values
            ux = 0.5 * (vx[:-1] + vx[1:])
            uy = 0.5 * (vy[:, :-1] + vy[:, 1:])
            bundle.matrices[f"velocity_x_{tag}_frame{k}"] = (ux, meta)
            bundle.matrices[f"velocity_y_{tag}_frame{k}"] = (uy, meta)
            if cfg["vtk"]:
                bundle.vtk[f"coupled_{tag}_frame{k}"] = (st.S.x_edges, st.S.y_edges,
                                                         {"saturation": st.S.values, "ux": ux, "uy": uy})
        series = coupling.mass_balance_report(run.history, sim)
        mass_rows.extend(series)
        finals[sim.h] = run.final.S
        rec = dict(run.diagnostics)
        rec["h"] = sim.h
        rec["rel_mass_err_final"] = series[-1]["rel_mass_err"] if series else float("nan")
        report["runs"].append(rec)
        logger.info("coupled %s h=%g: %s", cfg["medium"], sim.h, rec)
    hs = sorted(finals, reverse=True)
    report["successive_l1_differences"] = [
        {"coarse_h": a, "fine_h": b, "l1": coupling.saturation_difference(finals[b], finals[a])}
        for a, b in zip(hs[:-1], hs[1:])
    ]
    bundle.tables[f"mass_error_{cfg['medium']}"] = (fields_io.MASS_COLUMNS, mass_rows)
    bundle.report = report
    bundle.timings = {"run_seconds": time.perf_counter() - t0}
    return bundle


def _render_table(columns, rows):
    def cell(v):
        try:
            x = float(v)
        except (TypeError, ValueError):
            return str(v)
        return "" if np.isnan(x) else f"{x:.6g}"

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[k]) for b in body)) if body else len(c) for k, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def cmd_report(out_dir) -> str:
    """Re-render every CSV table listed in a run manifest as aligned text."""
    out = Path(out_dir)
    path = out / fields_io.MANIFEST_NAME
    if not path.exists():
        raise ConfigurationError(f"no manifest at {path}")
    man = fields_io.RunManifest.load(path)
    parts = [f"# {man.subcommand} run in {out}"]
    known = {fields_io.TABLE_COLUMNS, fields_io.ELLIPTIC_COLUMNS, fields_io.MASS_COLUMNS}
    for f in man.files:
        if not f["path"].endswith(".csv"):
            continue
        p = out / f["path"]
        if fields_io.file_digest(p) != f["sha256"]:
            raise StateError(f"{p} does not match the hash recorded in the manifest")
        with open(p) as fh:
            if fh.readline().startswith("#"):
                continue  # matrix file, not a table
        cols, rows = fields_io.read_table_csv(p)
        if tuple(cols) in known:
            parts.append(f"\n## {f['path']}\n" + _render_table(cols, rows))
    if man.report:
        parts.append("\n## report\n" + json.dumps(man.report, indent=2, sort_keys=True, default=str))
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conservflow", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out-dir", required=out_required, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads for child libraries")

    p = sub.add_parser("elliptic", help="conservation/energy indicators and error tables")
    common(p)
    p.add_argument("--problem", choices=["manufactured", "spe10"])
    p.add_argument("--degree", help="comma-separated polynomial degrees, e.g. 1,2,3")
    p.add_argument("--mesh-ladder", help="comma-separated cells per side, e.g. 16,32,64")

    p = sub.add_parser("hyperbolic", help="transport test problems")
    common(p)
    p.add_argument("--problem", choices=sorted(HYPERBOLIC_ALIASES))
    p.add_argument("--cfl", type=float)
    p.add_argument("--mesh-ladder", help="comma-separated cells per side")

    p = sub.add_parser("coupled", help="pressure/saturation slab runs")
    common(p)
    p.add_argument("--medium", choices=list(coupling.MEDIA))
    p.add_argument("--cfl", type=float)
    p.add_argument("--degree", help="pressure polynomial degree")
    p.add_argument("--mesh-ladder", help="comma-separated mesh sizes h, e.g. 32,16,8")

    p = sub.add_parser("report", help="re-render tables of a finished run")
    p.add_argument("--out-dir", required=True, help="run directory containing manifest.json")
    return parser


def _set_threads(n: int):
    if n < 1:
        raise ConfigurationError(f"--threads must be >= 1, got {n}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            sys.stdout.write(cmd_report(args.out_dir))
            return EXIT_OK
        _set_threads(args.threads)
        cfg = resolve_config(args.command, args)
        bundle = {"elliptic": cmd_elliptic, "hyperbolic": cmd_hyperbolic, "coupled": cmd_coupled}[args.command](cfg)
        bundle.config = dict(cfg, threads=args.threads)
        manifest = fields_io.write_outputs(bundle, args.out_dir)
        print(f"wrote {len(manifest.files)} file(s) and {fields_io.MANIFEST_NAME} to {args.out_dir}")
        return EXIT_OK
    except (ConfigurationError, ModelError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, CFLError, NumericalFailure, StateError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
