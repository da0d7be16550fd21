"""Support size and Jaccard index against the relative regularisation weight.

The statistics and patch systems are built once; only the CEL0 solve is
repeated for each value.

    python scripts/lambda_sweep.py --preset low-bg --rel 1e-5 1e-6 1e-7 1e-8
"""

import argparse
import time

from col0rme.config import PRESETS, RunConfig
from col0rme.metrics import jaccard_index
from col0rme.patches import PatchPlan
from col0rme.pipeline import build_systems, localize
from col0rme.simulator import simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--preset", default="low-bg", choices=list(PRESETS))
    ap.add_argument("--rel", nargs="+", type=float, default=[1e-5, 1e-6, 1e-7, 1e-8])
    ap.add_argument("--T", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    overrides = {"seed": args.seed, **({"T": args.T} if args.T else {})}
    cfg = RunConfig().update({**PRESETS[args.preset], **overrides})
    stack, gt = simulate(cfg.acquisition(), cfg.kinetics(), cfg.phantom, cfg.density, **cfg.phantom_kwargs())
    geom, psf = cfg.geometry(), cfg.psf()
    plan = PatchPlan.build(geom.coarse_size, cfg.patch_size, cfg.overlap, geom.zoom)
    systems = build_systems(stack, geom, psf, plan)
    truth = gt.active_pixel_positions()

    print(f"{'lambda_rel':>10s} {'lambda':>11s} {'|support|':>9s} {'J':>6s} {'tp':>5s} {'fp':>5s} {'fn':>5s} {'s':>9s}")
    for rel in args.rel:
        t0 = time.perf_counter()
        loc = localize(stack, geom, psf, cfg.cel0_params(), lambda_rel=rel, patch_size=cfg.patch_size,
                       overlap=cfg.overlap, threads=cfg.thread_count(), systems=systems)
        rep = jaccard_index(loc.support_positions(), truth, cfg.delta_nm, geom.fine_pitch)
        print(f"{rel:10.1e} {loc.lam:11.4e} {int(loc.support.sum()):9d} {rep.jaccard:6.3f} {rep.tp:5d} {rep.fp:5d} "
              f"{rep.fn:5d} {loc.noise_variance:9.1f}  ({time.perf_counter() - t0:.0f} s)", flush=True)


if __name__ == "__main__":
    main()
