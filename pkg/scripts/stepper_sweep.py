"""Smoothed step vs exact quasi-dynamic projection on random contact configurations."""

import argparse
import json

from contactsdf.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default="three-ball-cube")
    ap.add_argument("--n-samples", default="100")
    ap.add_argument("--sigmas", default="10,50,100,500,1000,10000")
    ap.add_argument("--seed", default="0")
    ap.add_argument("--out", default="runs/stepper-sweep")
    args = ap.parse_args()
    code = main(["step-compare", "--scene", args.scene, "--n-samples", args.n_samples, "--sigma-list", args.sigmas,
                 "--seed", args.seed, "--out", args.out])
    if code:
        raise SystemExit(code)
    report = json.load(open(f"{args.out}/step-compare/report.json"))
    t = report["timing_ms"]
    print(f"speed ratio (relaxed KKT / smoothed step): {t['relaxed_kkt_solve'] / t['dsdf_step']:.1f}")
