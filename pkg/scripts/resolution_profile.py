"""Two parallel filaments at a chosen gap: line profiles of the ground truth,
the temporal mean, the variance estimate and the intensity estimate.

    python scripts/resolution_profile.py --gap-nm 200 --out profile.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from col0rme.config import RunConfig  # noqa: E402
from col0rme.covariance import temporal_mean  # noqa: E402
from col0rme.metrics import line_profile  # noqa: E402
from col0rme.pipeline import intensify, localize  # noqa: E402
from col0rme.simulator import simulate  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--gap-nm", type=float, default=200.0)
    ap.add_argument("--M", type=int, default=16)
    ap.add_argument("--T", type=int, default=700)
    ap.add_argument("--density", type=float, default=4.0)
    ap.add_argument("--out", default="profile.png")
    args = ap.parse_args()

    cfg = RunConfig().update({"phantom": "parallel", "gap_nm": args.gap_nm, "M": args.M, "T": args.T,
                              "density": args.density, "patch_size": min(12, args.M)})
    stack, gt = simulate(cfg.acquisition(), cfg.kinetics(), cfg.phantom, cfg.density, **cfg.phantom_kwargs())
    geom, psf = cfg.geometry(), cfg.psf()
    loc = localize(stack, geom, psf, cfg.cel0_params(), lambda_rel=cfg.lambda_rel, patch_size=cfg.patch_size,
                   overlap=cfg.overlap)
    ir = intensify(stack, loc.support, geom, psf, cfg.intensity_params())

    L, q = geom.fine_size, geom.zoom
    mid = (L - 1) / 2
    # the filaments run vertically, so the profile crosses them horizontally
    start, end = (mid, 0.0), (mid, L - 1.0)
    mean_fine = np.kron(temporal_mean(stack.frames), np.ones((q, q)))
    curves = {
        "truth": gt.intensity,
        "mean": mean_fine - ir.b,
        "variance": loc.variance,
        "intensity": ir.x,
    }
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, img in curves.items():
        d, v = line_profile(img, start, end)
        peak = v.max()
        ax.plot(d * geom.fine_pitch, v / peak if peak > 0 else v, label=label)
    ax.set_xlabel("position (nm)")
    ax.set_ylabel("normalised value")
    ax.set_title(f"gap {args.gap_nm:g} nm")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"support size {int(loc.support.sum())}, b = {ir.b:.1f}, wrote {args.out}")


if __name__ == "__main__":
    main()
