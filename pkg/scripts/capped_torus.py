"""Capped torus, uniform against density-skewed sampling. With the full
profile this is the long-running reproduction target; the quick profile gives
a desk-scale comparison.

    python3 scripts/capped_torus.py --out runs/capped [--profile quick] [--n 20000]
"""

import argparse
import json
from pathlib import Path

from scipy import ndimage

from heatsdf.config import profile_config
from heatsdf.metrics import e_eik, e_sdf, make_band_set
from heatsdf.oracle import AnalyticShape, analytic_sample
from heatsdf.pipeline import InputFrameField, prepare, run_heat, run_sdf, save_sdf
from heatsdf.surface_ops import sample_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/capped")
    ap.add_argument("--profile", default="quick", choices=["quick", "full"])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = profile_config(args.profile).with_overrides(seed=args.seed)
    shape = AnalyticShape("capped_torus")
    band = make_band_set(shape.sdf, seed=args.seed)
    results = {}
    for mode in ("uniform", "nonuniform"):
        pc = prepare(analytic_sample(shape, args.n, mode, seed=args.seed), cfg)
        heat, _ = run_heat(pc, cfg)
        model, _ = run_sdf(heat, pc, cfg)
        save_sdf(out / f"sdf_{mode}.ckpt", model, pc, cfg)
        field = InputFrameField(model.phi, pc.transform)
        inside = sample_grid(field, 96) < 0
        results[mode] = {"e_sdf": e_sdf(field, band.points, band.distances),
                         "e_eik": e_eik(field, band.points),
                         "inside_components": int(ndimage.label(inside)[1])}
        print(mode, results[mode])
    results["e_sdf_difference"] = abs(results["nonuniform"]["e_sdf"] - results["uniform"]["e_sdf"])
    (out / "results.json").write_text(json.dumps(results, indent=1) + "\n")
    print(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()
