"""``heat-sdf`` command line.

Exit codes: 0 success, 2 usage error, 3 invalid configuration, 4 missing or
unreadable file, 5 malformed input data or checkpoint, 6 numerical failure
(non-finite gradients, CG stall, empty level set, ...), 1 anything else.
Set ``HEATSDF_THREADS`` to pin the thread count of the numeric backends.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("heatsdf")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5, 6


def _set_threads():
    n = os.environ.get("HEATSDF_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)
    try:
        import torch
        torch.set_num_threads(int(n))
    except ImportError:
        pass


# --- shared option groups --------------------------------------------------------
CONFIG_FLAGS = {
    # flag: (config key, type)
    "--seed": ("seed", int), "--epochs": ("epochs", int),
    "--batches-per-epoch": ("batches_per_epoch", int), "--lr": ("lr", float),
    "--sdf-lr": ("sdf_lr", float), "--min-lr": ("min_lr", float),
    "--patience": ("patience", int), "--factor": ("factor", float),
    "--n-volume": ("n_volume", int), "--n-surface": ("n_surface", int),
    "--hidden-dim": ("hidden_dim", int), "--hidden-layers": ("hidden_layers", int),
    "--tau": ("tau", float), "--tau-hat": ("tau_hat", float),
    "--lambda-fit": ("lambda_fit", float), "--lambda-B": ("lambda_B", float),
    "--delta": ("delta", float), "--grid-h": ("grid_h", float), "--dims": ("dims", int),
    "--mask": ("mask", str), "--region-samples": ("region_samples", int),
    "--sigma": ("sigma", float), "--tau-pde": ("tau_pde", float), "--steps": ("flow_steps", int),
    "--flow-epochs": ("flow_epochs", int), "--flow-batches": ("flow_batches", int),
    "--flow-lr": ("flow_lr", float), "--flow-batch-size": ("flow_batch_size", int),
}


def _add_config(p, flags):
    p.add_argument("--config", help="JSON config file (CLI flags override it)")
    p.add_argument("--profile", choices=["full", "quick"], help="defaults profile")
    for f in flags:
        key, typ = CONFIG_FLAGS[f]
        p.add_argument(f, dest=key, type=typ, default=None)


def _no_far(p):
    p.add_argument("--no-far-field", dest="use_far_field", action="store_false", default=None,
                   help="use the near-field heat gradient only")


def _resolve(args, base: dict | None = None):
    from .config import RunConfig, load_config
    overrides = {v: getattr(args, v) for v, _ in CONFIG_FLAGS.values() if hasattr(args, v)}
    if getattr(args, "use_far_field", None) is not None:
        overrides["use_far_field"] = args.use_far_field
    if base is not None and args.config is None and args.profile is None:
        keep = {k: v for k, v in base.items() if k in RunConfig.__dataclass_fields__}
        return RunConfig(**keep).with_overrides(**overrides)
    return load_config(args.config, args.profile, **overrides)


def _need(path, what):
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


# --- subcommands -----------------------------------------------------------------
def cmd_heat(args):
    from .pipeline import prepare, run_heat, save_heat, write_manifest
    cfg = _resolve(args)
    cloud = _need(args.cloud, "point cloud")
    pc = prepare(cloud, cfg)
    heat, info = run_heat(pc, cfg)
    save_heat(args.out, heat, pc, cfg, info)
    write_manifest(args.out, cfg, {"cloud": cloud}, {"kappa": heat.kappa})
    print(f"wrote {args.out} (kappa={heat.kappa:.6g})")


def cmd_sdf(args):
    from .pipeline import load_heat, prepare, run_sdf, save_sdf, sha256_file, write_manifest
    from .training import load_checkpoint
    meta = load_checkpoint(args.heat)[1] if args.heat and Path(args.heat).exists() else {}
    cfg = _resolve(args, meta.get("config"))  # config errors first, before any file checks
    heat_path = _need(args.heat, "heat checkpoint")
    heat, meta = load_heat(heat_path)
    cloud = _need(args.cloud, "point cloud")
    pc = prepare(cloud, cfg)
    if pc.transform.to_dict() != meta.get("transform", pc.transform.to_dict()):
        raise ValueError(f"{cloud} does not match the cloud used for {heat_path}")
    model, mask = run_sdf(heat, pc, cfg, sha256_file(heat_path))
    save_sdf(args.out, model, pc, cfg)
    write_manifest(args.out, cfg, {"cloud": cloud, "heat": heat_path},
                   {"region_loss_vanished": model.report["region_loss_vanished"]})
    print(f"wrote {args.out}")


def _input_frame(path):
    from .pipeline import InputFrameField, load_sdf
    from .pointcloud import NormalizationTransform
    phi, meta = load_sdf(_need(path, "sdf checkpoint"))
    return InputFrameField(phi, NormalizationTransform.from_dict(meta["transform"])), meta


def cmd_eval(args):
    from .metrics import BandSet, band_set_for_mesh, evaluate, load_mesh, write_report_csv
    from .pipeline import write_manifest
    field, meta = _input_frame(args.sdf)
    mesh = load_mesh(_need(args.mesh, "reference mesh"))
    if args.band and Path(args.band).exists():
        band = BandSet.load(args.band)
    else:
        band = band_set_for_mesh(mesh, None, n=args.band_size, seed=args.band_seed)
        if args.band:
            band.save(args.band)
    rep = evaluate(field, mesh, band, args.n_surface, seed=meta.get("seed", 0))
    write_report_csv(args.out, [rep.as_row(args.model or Path(args.sdf).stem)])
    write_manifest(args.out, None, {"sdf": args.sdf, "mesh": args.mesh},
                   {"metrics": rep.__dict__})
    print(json.dumps(rep.as_row(args.model or Path(args.sdf).stem)))


def _domain_bounds(field):
    from .pointcloud import DOMAIN_HALF_WIDTH
    tf = field.transform
    return tuple(tf.inverse(np.full(3, s * DOMAIN_HALF_WIDTH)) for s in (-1, 1))


def cmd_extract(args):
    from .pipeline import write_manifest
    from .surface_ops import export_mesh, marching_cubes
    field, meta = _input_frame(args.sdf)
    mesh = marching_cubes(field, args.res, args.iso, _domain_bounds(field))
    export_mesh(mesh, args.out)
    write_manifest(args.out, None, {"sdf": args.sdf}, {"resolution": args.res,
                                                        "n_vertices": len(mesh.vertices)})
    print(f"wrote {args.out} ({len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles)")


def cmd_csg(args):
    from .pipeline import write_manifest
    from .surface_ops import csg_combine, export_mesh, marching_cubes
    a, _ = _input_frame(args.a)
    b, _ = _input_frame(args.b)
    u = csg_combine(a, b, args.op)
    mesh = marching_cubes(u, args.res, 0.0, _domain_bounds(a))
    export_mesh(mesh, args.out)
    write_manifest(args.out, None, {"a": args.a, "b": args.b}, {"op": args.op, "resolution": args.res})
    print(f"wrote {args.out}")


def cmd_flow(args):
    from .pipeline import load_sdf, write_manifest
    from .pointcloud import NormalizationTransform
    from .surface_ops import run_surface_flow, smoothed_ball
    from .training import save_checkpoint
    phi, meta = load_sdf(_need(args.sdf, "sdf checkpoint"))
    base = dict(meta.get("config", {}))
    cfg = _resolve(args, base)
    tf = NormalizationTransform.from_dict(meta["transform"])
    try:
        cx, cy, cz, r = (float(v) for v in args.ball.split(","))
    except ValueError:
        from .config import ConfigInvalid
        raise ConfigInvalid("--ball expects cx,cy,cz,r") from None
    # ball given in input coordinates; the flow runs in the normalised frame
    w0 = smoothed_ball(tf.apply([cx, cy, cz]), r * tf.scale, delta=0.01)
    states = run_surface_flow(phi, w0, cfg.tau_pde, cfg.flow_steps, cfg.sigma, cfg.flow_schedule(),
                              cfg.seed, cfg.architecture(), n_batch=cfg.flow_batch_size,
                              renormalize=args.renormalize)
    reports = []
    for st in states:
        out = Path(f"{args.out_prefix}{st.step_index}.ckpt")
        save_checkpoint(out, {"w": st.w}, {"kind": "flow", "step": st.step_index, "tau_pde": st.tau_pde,
                                           "sigma": st.sigma, "transform": meta["transform"],
                                           "report": st.report})
        write_manifest(out, cfg, {"sdf": args.sdf}, {"report": st.report})
        reports.append({"step": st.step_index, **{k: st.report[k] for k in
                                                  ("energy_before", "energy_after", "fidelity_scale")}})
    print(json.dumps(reports, indent=1))


def cmd_oracle(args):
    from .oracle import AnalyticShape, analytic_sample, grid_heat_step
    from .pipeline import prepare, write_manifest
    from .pointcloud import save_xyz
    if args.action == "sample":
        shape = AnalyticShape(args.shape.replace("-", "_"), {})
        pc = analytic_sample(shape, args.n, args.mode, args.seed)
        save_xyz(pc, args.out)
        write_manifest(args.out, None, None, {"shape": args.shape, "mode": args.mode,
                                              "n": args.n, "seed": args.seed})
    else:
        from .config import profile_config
        cloud = _need(args.cloud, "point cloud")
        pc = prepare(cloud, profile_config())
        g = grid_heat_step(pc, args.tau, args.dims)
        g.save(args.out, {"tau": args.tau, "transform": pc.transform.to_dict()})
        write_manifest(args.out, None, {"cloud": cloud}, {"dims": args.dims, "tau": args.tau})
    print(f"wrote {args.out}")


SHARED_HEAT_KEYS = {"lambda_fit", "lambda_B", "delta", "region_samples", "sdf_lr", "grid_h", "mask"}


def _parse_value(key, raw):
    from .config import RunConfig
    default = RunConfig.__dataclass_fields__[key].default
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, str):
        return raw
    return float(raw)


def sweep(param: str, values: list, base, cloud, mesh_path, seeds=(0,), band_path=None,
          heat_path=None, workdir=None):
    """Pipeline per (value, seed); rows of metrics, failures recorded as rows."""
    from .config import ConfigInvalid, RunConfig
    from .metrics import BandSet, band_set_for_mesh, evaluate, load_mesh
    from .pipeline import InputFrameField, load_heat, prepare, run_heat, run_sdf, save_sdf

    if not values:
        raise ConfigInvalid("sweep needs at least one value")
    if param not in RunConfig.__dataclass_fields__:
        raise ConfigInvalid(f"unknown sweep parameter {param!r}")
    mesh = load_mesh(mesh_path)
    if band_path and Path(band_path).exists():
        band = BandSet.load(band_path)
    else:
        band = band_set_for_mesh(mesh)
        if band_path:
            band.save(band_path)
    rows = []
    heat_cache = {}
    for seed in seeds:
        for value in values:
            row = {"param": param, "value": value, "seed": seed}
            try:
                cfg = base.with_overrides(**{param: value, "seed": seed})
                pc = prepare(cloud, cfg)
                reuse = param in SHARED_HEAT_KEYS
                key = seed if reuse else (seed, value)
                if key not in heat_cache:
                    if heat_path and reuse and seed == base.seed:
                        heat_cache[key] = load_heat(heat_path)[0]
                    else:
                        heat_cache[key] = run_heat(pc, cfg)[0]
                model, _ = run_sdf(heat_cache[key], pc, cfg)
                if workdir:
                    save_sdf(Path(workdir) / f"sdf_{param}_{value}_s{seed}.ckpt", model, pc, cfg)
                rep = evaluate(InputFrameField(model.phi, pc.transform), mesh, band, seed=seed)
                row.update(rep.as_row(f"{param}={value}"), error="")
            except Exception as exc:  # recorded, sweep continues
                if isinstance(exc, ConfigInvalid) and len(values) == 1:
                    raise
                log.error("sweep %s=%s seed %s failed: %s", param, value, seed, exc)
                row.update(model=f"{param}={value}", e_recon_s="", e_recon_n="", e_sdf="",
                           e_eik="", seeds=str(seed), error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    return rows


SWEEP_COLUMNS = ["param", "value", "seed", "model", "e_recon_s", "e_recon_n", "e_sdf", "e_eik",
                 "seeds", "error"]


def cmd_sweep(args):
    from .pipeline import write_manifest
    cfg = _resolve(args)
    vals = [v for v in (args.values or "").split(",") if v.strip()]
    from .config import ConfigInvalid
    if not vals:
        raise ConfigInvalid("sweep needs at least one value")
    values = [_parse_value(args.param, v) for v in vals]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = sweep(args.param, values, cfg, _need(args.cloud, "point cloud"),
                 _need(args.mesh, "reference mesh"), seeds, args.band, args.heat, args.workdir)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    write_manifest(args.out, cfg, {"cloud": args.cloud, "mesh": args.mesh},
                   {"param": args.param, "values": values, "seeds": seeds})
    print(f"wrote {args.out} ({len(rows)} rows)")


def cmd_pipeline(args):
    """heat, sdf, extract and (with --mesh) eval into one directory."""
    from .metrics import band_set_for_mesh, evaluate, load_mesh, write_report_csv
    from .pipeline import (InputFrameField, prepare, run_heat, run_sdf, save_heat, save_sdf,
                           sha256_file, write_manifest)
    from .surface_ops import export_mesh, marching_cubes
    cfg = _resolve(args)
    cloud = _need(args.cloud, "point cloud")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pc = prepare(cloud, cfg)
    heat, info = run_heat(pc, cfg)
    save_heat(out / "heat.ckpt", heat, pc, cfg, info)
    write_manifest(out / "heat.ckpt", cfg, {"cloud": cloud}, {"kappa": heat.kappa})
    model, _ = run_sdf(heat, pc, cfg, sha256_file(out / "heat.ckpt"))
    save_sdf(out / "sdf.ckpt", model, pc, cfg)
    write_manifest(out / "sdf.ckpt", cfg, {"cloud": cloud, "heat": out / "heat.ckpt"})
    field = InputFrameField(model.phi, pc.transform)
    if args.res:
        mesh = marching_cubes(field, args.res, 0.0, _domain_bounds(field))
        export_mesh(mesh, out / "mesh.obj")
        write_manifest(out / "mesh.obj", cfg, {"sdf": out / "sdf.ckpt"})
    if args.mesh:
        gt = load_mesh(_need(args.mesh, "reference mesh"))
        band = band_set_for_mesh(gt, out)
        rep = evaluate(field, gt, band, seed=cfg.seed)
        write_report_csv(out / "report.csv", [rep.as_row(args.model or "heat-sdf")])
        write_manifest(out / "report.csv", cfg, {"sdf": out / "sdf.ckpt", "mesh": args.mesh})
    print(f"wrote artifacts to {out}")


# --- parser ----------------------------------------------------------------------
RUN_FLAGS = ["--seed", "--epochs", "--batches-per-epoch", "--lr", "--min-lr", "--patience",
             "--factor", "--n-volume", "--n-surface", "--hidden-dim", "--hidden-layers"]
HEAT_FLAGS = RUN_FLAGS + ["--tau", "--tau-hat", "--dims"]
SDF_FLAGS = RUN_FLAGS + ["--sdf-lr", "--lambda-fit", "--lambda-B", "--delta", "--grid-h", "--dims",
                         "--mask", "--region-samples"]
ALL_FLAGS = list(dict.fromkeys(HEAT_FLAGS + SDF_FLAGS))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="heat-sdf", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("heat", help="train the near and far heat fields")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    _add_config(p, HEAT_FLAGS)
    _no_far(p)
    p.set_defaults(func=cmd_heat)

    p = sub.add_parser("sdf", help="fit the signed distance field")
    p.add_argument("--heat")
    p.add_argument("--cloud")
    p.add_argument("--out", default="sdf.ckpt")
    _add_config(p, SDF_FLAGS)
    _no_far(p)
    p.set_defaults(func=cmd_sdf)

    p = sub.add_parser("eval", help="error metrics against a reference mesh")
    p.add_argument("--sdf", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--band", help="band set file (created if missing)")
    p.add_argument("--band-size", type=int, default=10000)
    p.add_argument("--band-seed", type=int, default=0)
    p.add_argument("--n-surface", type=int, default=50000)
    p.add_argument("--model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract", help="marching cubes of the zero level set")
    p.add_argument("--sdf", required=True)
    p.add_argument("--res", type=int, default=256)
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("csg", help="union/intersection of two fields, extracted")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--op", choices=["union", "intersection"], required=True)
    p.add_argument("--res", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_csg)

    p = sub.add_parser("flow", help="heat flow on the level sets of a trained sdf")
    p.add_argument("--sdf", required=True)
    p.add_argument("--ball", required=True, help="cx,cy,cz,r of the initial ball (input frame)")
    p.add_argument("--raw-grad", dest="renormalize", action="store_false",
                   help="use grad phi as is instead of unit length where |grad phi| > 0.5")
    p.add_argument("--out-prefix", default="w_")
    _add_config(p, ["--seed", "--tau-pde", "--steps", "--sigma", "--flow-epochs", "--flow-batches",
                    "--flow-lr", "--flow-batch-size", "--hidden-dim", "--hidden-layers"])
    p.add_argument("--tau", dest="tau_pde", type=float, default=None, help="alias of --tau-pde")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("oracle", help="analytic samples and the grid heat solver")
    osub = p.add_subparsers(dest="action", required=True)
    q = osub.add_parser("sample")
    q.add_argument("--shape", required=True, choices=["sphere", "box", "torus", "capped-torus", "plane"])
    q.add_argument("--mode", default="uniform", choices=["uniform", "sparse", "nonuniform", "noisy"])
    q.add_argument("--n", type=int, default=100000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q = osub.add_parser("heat")
    q.add_argument("--cloud", required=True)
    q.add_argument("--dims", type=int, default=48)
    q.add_argument("--tau", type=float, default=0.005)
    q.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sweep", help="metrics over a list of values of one parameter")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--seeds", default="0")
    p.add_argument("--cloud", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--band")
    p.add_argument("--heat", help="reuse this heat checkpoint where the parameter allows")
    p.add_argument("--workdir")
    p.add_argument("--out", required=True)
    _add_config(p, ALL_FLAGS)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pipeline", help="heat, sdf, extract and eval in one go")
    p.add_argument("--cloud", required=True)
    p.add_argument("--mesh")
    p.add_argument("--model")
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--out-dir", required=True)
    _add_config(p, ALL_FLAGS)
    _no_far(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def _exit_code(exc) -> int:
    from .config import ConfigInvalid
    from .heatstage import DegenerateNormal
    from .metrics import SignAmbiguous
    from .oracle import CgNoConvergence
    from .pointcloud import DegenerateCloud, ParseError, TooFewPoints
    from .sampling import RejectionStall
    from .surface_ops import EmptyLevelSet, IoError
    from .training import CorruptBlob, NonFiniteGradient, VersionMismatch
    if isinstance(exc, ConfigInvalid):
        return EXIT_CONFIG
    if isinstance(exc, (FileNotFoundError, IoError, PermissionError, IsADirectoryError)):
        return EXIT_IO
    if isinstance(exc, (NonFiniteGradient, CgNoConvergence, DegenerateNormal, RejectionStall,
                        EmptyLevelSet, SignAmbiguous)):
        return EXIT_NUMERIC
    if isinstance(exc, (ParseError, TooFewPoints, DegenerateCloud, CorruptBlob, VersionMismatch,
                        ValueError, KeyError)):
        return EXIT_DATA
    return EXIT_OTHER


def run(argv=None) -> int:
    _set_threads()
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"heat-sdf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return code
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
