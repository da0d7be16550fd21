"""Command-line entry point: ``col0rme {simulate,localize,intensify,evaluate,run}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure,
4 completed with a warning (e.g. empty support).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, RunConfig
from .covariance import ImageStack, temporal_mean
from .forward import ForwardOperator, build_psf_kernel
from .metrics import jaccard_index, line_profile, measure_fwhm, psnr
from .patches import PatchPlan
from .pipeline import build_systems, localize
from .intensity import run_intensity_estimation
from .simulator import simulate
from .stackio import (
    StackFormatError,
    read_ground_truth,
    read_image,
    read_stack,
    write_fine_image,
    write_ground_truth,
    write_mask,
    write_stack,
)

log = logging.getLogger("col0rme")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_WARNING = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Outputs:
    """Output directory that records every file it writes for the manifest."""

    def __init__(self, root: str | Path, cfg: RunConfig, command: str):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create output directory {self.root}: {exc}") from exc
        self.cfg = cfg
        self.command = command
        self.files: list[str] = []
        self.inputs: dict[str, str] = {}
        self.results: dict = {}
        self.warnings: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.root / name

    def add_input(self, label: str, path: Path):
        self.inputs[label] = str(path)
        self.inputs[label + "_sha256"] = _sha256(path)

    def finish(self):
        (self.root / "config.txt").write_text(self.cfg.to_text())
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.seed,
            "config": self.cfg.to_dict(),
            "inputs": self.inputs,
            "results": self.results,
            "warnings": self.warnings,
            "outputs": {name: _sha256(self.root / name) for name in sorted(set(self.files))},
        }
        (self.root / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def _write_rows(path: Path, header: list[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------- stages


def stage_simulate(cfg: RunConfig, out: Outputs, stack_format: str = "clrm") -> tuple[ImageStack, object]:
    stack, gt = simulate(cfg.acquisition(), cfg.kinetics(), cfg.phantom, cfg.density, **cfg.phantom_kwargs())
    name = "stack.tif" if stack_format == "tif" else "stack.clrm"
    frames = stack.frames.astype(np.float32) if stack_format == "tif" else stack.frames
    write_stack(out.path(name), replace(stack, frames=frames))
    geom = cfg.geometry()
    write_ground_truth(out.path("ground_truth.csv"), gt.positions, gt.brightness, geom.fine_pitch)
    write_fine_image(out.path("gt_intensity.tif"), gt.intensity, geom.fine_pitch)
    out.files.append("gt_intensity.csv")
    write_fine_image(out.path("gt_variance.tif"), gt.variance, geom.fine_pitch)
    out.files.append("gt_variance.csv")
    out.results["simulate"] = {
        "stack": name,
        "n_emitters": gt.n_emitters,
        "n_sites": int(len(gt.pixel_positions())),
        "noise_variance": gt.noise_variance,
        "signal_power": gt.signal_power,
        "background": gt.background,
    }
    return stack, gt


def _load_stack(path: str | Path, cfg: RunConfig, out: Outputs) -> ImageStack:
    path = Path(path)
    stack = read_stack(path, pitch_nm=cfg.coarse_pitch_nm, frame_rate=cfg.fps)
    if stack.n_frames < 2:
        raise DataError(f"{path}: need at least 2 frames, got {stack.n_frames}")
    if not np.all(np.isfinite(stack.frames)):
        raise DataError(f"{path}: stack contains non-finite values")
    out.add_input("stack", path)
    return stack


def stage_localize(stack: ImageStack, cfg: RunConfig, out: Outputs):
    geom = cfg.geometry(stack.size)
    psf = cfg.psf()
    threads = cfg.thread_count()
    t0 = time.perf_counter()
    plan = PatchPlan.build(geom.coarse_size, min(cfg.patch_size, geom.coarse_size), cfg.overlap, geom.zoom)
    systems = build_systems(stack.frames, geom, psf, plan, cfg.memory_budget_mb)
    common = dict(
        lambda_rel=cfg.lambda_rel,
        patch_size=plan.patch_size,
        overlap=cfg.overlap,
        threads=threads,
        systems=systems,
    )
    res = localize(stack.frames, geom, psf, cfg.cel0_params(), **common)
    elapsed = time.perf_counter() - t0

    write_fine_image(out.path("variance.tif"), res.variance, geom.fine_pitch)
    out.files.append("variance.csv")
    write_mask(out.path("support.tif"), res.support)
    _write_rows(
        out.path("patches.csv"),
        ["patch", "row0", "col0", "s", "support_size", "n_outer", "objective"],
        [
            (p.index, p.row0, p.col0, _fmt(r.s), int(r.support.sum()), r.n_outer, _fmt(r.objective_trace[-1]))
            for p, r in zip(res.plan.patches, res.patch_results)
        ],
    )
    _write_rows(
        out.path("support_trace.csv"),
        ["patch", "phase", "iteration", "objective"],
        [
            (p.index, phase, k, _fmt(v))
            for p, r in zip(res.plan.patches, res.patch_results)
            for phase, trace in (("l1", r.l1_trace), ("cel0", r.objective_trace))
            for k, v in enumerate(trace)
        ],
    )
    n_support = int(res.support.sum())
    out.results["localize"] = {
        "lambda": res.lam,
        "noise_variance": res.noise_variance,
        "support_size": n_support,
        "n_patches": len(res.plan),
        "threads": threads,
        "seconds": round(elapsed, 3),
    }
    if n_support == 0:
        msg = "empty support: no fluctuating emitters found"
        warnings.warn(msg, stacklevel=2)
        out.warnings.append(msg)

    sweep = cfg.sweep_values()
    if sweep:
        rows = []
        for rel in sweep:
            r = localize(stack.frames, geom, psf, replace(cfg.cel0_params(), lam=None), **{**common, "lambda_rel": rel})
            objective = sum(p.objective_trace[-1] for p in r.patch_results)
            rows.append((_fmt(rel), _fmt(r.lam), int(r.support.sum()), _fmt(objective)))
        _write_rows(out.path("lambda_sweep.csv"), ["lambda_rel", "lambda", "support_size", "objective"], rows)
    return res


def stage_intensify(stack: ImageStack, support: np.ndarray, cfg: RunConfig, out: Outputs):
    geom = cfg.geometry(stack.size)
    if support.shape != (geom.fine_size, geom.fine_size):
        raise DataError(f"support is {support.shape}, stack geometry needs {geom.fine_size}x{geom.fine_size}")
    op = ForwardOperator(geom, build_psf_kernel(cfg.psf(), geom))
    mean = temporal_mean(stack.frames)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = run_intensity_estimation(mean, support.astype(bool), op, cfg.intensity_params())
    for w in caught:
        out.warnings.append(str(w.message))
    write_fine_image(out.path("intensity.tif"), res.x, geom.fine_pitch)
    out.files.append("intensity.csv")
    _write_rows(out.path("intensity_trace.csv"), ["iteration", "objective"], [(k, _fmt(v)) for k, v in enumerate(res.objective_trace)])
    out.results["intensify"] = {"background": res.b, "mu": res.mu, "status": res.status, "n_alternations": res.n_alt}
    return res


def _profile_line(cfg: RunConfig, L: int):
    if cfg.profile_line:
        try:
            r0, c0, r1, c1 = (float(v) for v in cfg.profile_line.split(","))
        except ValueError:
            raise UsageError("profile_line must be 'r0,c0,r1,c1'") from None
        return (r0, c0), (r1, c1)
    mid = (L - 1) / 2.0
    return (mid, 0.0), (mid, L - 1.0)


def stage_evaluate(
    support: np.ndarray,
    intensity: np.ndarray | None,
    truth_positions: np.ndarray,
    truth_intensity: np.ndarray | None,
    cfg: RunConfig,
    out: Outputs,
):
    L = support.shape[0]
    if truth_intensity is not None and truth_intensity.shape != support.shape:
        raise DataError(f"ground truth is {truth_intensity.shape}, result is {support.shape}")
    if intensity is not None and intensity.shape != support.shape:
        raise DataError(f"intensity image is {intensity.shape}, support is {support.shape}")
    if len(truth_positions) and (truth_positions.min() < 0 or truth_positions.max() >= L):
        raise DataError("ground-truth positions fall outside the result grid")
    fine_pitch = cfg.coarse_pitch_nm / cfg.q
    cols, rows = np.nonzero(support.T)
    det = np.stack([rows, cols], axis=1)
    rep = jaccard_index(det, truth_positions, cfg.delta_nm, fine_pitch, cfg.match_mode)
    metrics = [("jaccard", rep.jaccard), ("tp", rep.tp), ("fp", rep.fp), ("fn", rep.fn), ("delta_nm", cfg.delta_nm)]

    if intensity is not None and truth_intensity is not None and np.any(truth_intensity):
        metrics.append(("psnr_db", psnr(intensity, truth_intensity)))
    start, end = _profile_line(cfg, L)
    images = {"estimate": intensity if intensity is not None else support.astype(float)}
    if truth_intensity is not None:
        images["truth"] = truth_intensity
    profiles = {}
    for label, img in images.items():
        pos, values = line_profile(img, start, end)
        profiles[label] = values
        try:
            width = measure_fwhm(img, fine_pitch, line=(start, end))
        except ValueError:
            width = math.nan
        metrics.append((f"fwhm_nm_{label}", width))
    _write_rows(out.path("metrics.csv"), ["metric", "value"], [(k, v) for k, v in metrics])
    _write_rows(
        out.path("profile.csv"),
        ["distance_nm"] + list(profiles),
        [[_fmt(d * fine_pitch)] + [_fmt(profiles[k][i]) for k in profiles] for i, d in enumerate(pos)],
    )
    _plot_profile(out.path("profile.png"), pos * fine_pitch, profiles)
    out.results["evaluate"] = {k: v for k, v in metrics}
    return dict(metrics)


def _plot_profile(path: Path, distance: np.ndarray, profiles: dict):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3), dpi=100)
    for label, values in profiles.items():
        ax.plot(distance, values, label=label)
    ax.set_xlabel("distance (nm)")
    ax.set_ylabel("intensity")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _truth_from_dir(path: Path, out: Outputs):
    gt_csv = path / "ground_truth.csv"
    if not gt_csv.exists():
        raise DataError(f"{path}: no ground_truth.csv")
    positions, brightness = read_ground_truth(gt_csv)
    out.add_input("ground_truth", gt_csv)
    intensity = None
    if (path / "gt_intensity.tif").exists():
        intensity = read_image(path / "gt_intensity.tif").astype(float)
        out.add_input("gt_intensity", path / "gt_intensity.tif")
        cols, rows = np.nonzero(intensity.T)
        positions = np.stack([rows, cols], axis=1)
    elif len(positions):
        positions = np.unique(positions[brightness > 0], axis=0)
    return positions, intensity


# --------------------------------------------------------------------------- commands


def cmd_simulate(args, cfg: RunConfig) -> Outputs:
    out = Outputs(args.out, cfg, "simulate")
    stage_simulate(cfg, out, args.format)
    return out


def cmd_localize(args, cfg: RunConfig) -> Outputs:
    out = Outputs(args.out, cfg, "localize")
    stack = _load_stack(args.stack, cfg, out)
    stage_localize(stack, cfg, out)
    return out


def cmd_intensify(args, cfg: RunConfig) -> Outputs:
    out = Outputs(args.out, cfg, "intensify")
    stack = _load_stack(args.stack, cfg, out)
    support = read_image(args.support)
    out.add_input("support", Path(args.support))
    stage_intensify(stack, support, cfg, out)
    return out


def cmd_evaluate(args, cfg: RunConfig) -> Outputs:
    out = Outputs(args.out, cfg, "evaluate")
    result = Path(args.result)
    if not (result / "support.tif").exists():
        raise DataError(f"{result}: no support.tif")
    support = read_image(result / "support.tif").astype(bool)
    out.add_input("support", result / "support.tif")
    intensity = None
    if (result / "intensity.tif").exists():
        intensity = read_image(result / "intensity.tif").astype(float)
        out.add_input("intensity", result / "intensity.tif")
    positions, truth_intensity = _truth_from_dir(Path(args.truth), out)
    stage_evaluate(support, intensity, positions, truth_intensity, cfg, out)
    return out


def cmd_run(args, cfg: RunConfig) -> Outputs:
    out = Outputs(args.out, cfg, "run")
    truth_positions = truth_intensity = None
    if args.load:
        stack = _load_stack(args.load, cfg, out)
        if args.truth:
            truth_positions, truth_intensity = _truth_from_dir(Path(args.truth), out)
    else:
        stack, gt = stage_simulate(cfg, out, args.format)
        truth_positions, truth_intensity = gt.active_pixel_positions(), gt.intensity
    loc = stage_localize(stack, cfg, out)
    res = stage_intensify(stack, loc.support, cfg, out)
    if truth_positions is not None:
        stage_evaluate(loc.support, res.x, truth_positions, truth_intensity, cfg, out)
    return out


# --------------------------------------------------------------------------- parsing


def _add_config_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("configuration (each key may also be set in --config)")
    group.add_argument("--config", help="flat 'key = value' file, or a manifest.json from an earlier run")
    group.add_argument("--preset", choices=sorted(PRESETS), help="acquisition preset applied before other keys")
    group.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any key")
    for key in RunConfig.keys():
        names = {f"--{key}", f"--{key.replace('_', '-')}"}
        group.add_argument(*sorted(names), dest=f"cfg_{key}", metavar="V", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="col0rme", description="Covariance-based super-resolution for fluctuating fluorophores.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("simulate", help="simulate a stack with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("clrm", "tif"), default="clrm")
    _add_config_flags(p)

    p = sub.add_parser("localize", help="estimate the support and noise variance")
    p.add_argument("stack")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("intensify", help="estimate intensity and background on a support")
    p.add_argument("stack")
    p.add_argument("--support", required=True, help="support.tif written by localize")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="compare a result directory against ground truth")
    p.add_argument("--result", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("run", help="simulate (or load) then localize, intensify and evaluate")
    p.add_argument("--out", required=True)
    p.add_argument("--load", help="existing stack (CLRM1 or TIFF); skips simulation")
    p.add_argument("--truth", help="directory with ground_truth.csv for --load mode")
    p.add_argument("--format", choices=("clrm", "tif"), default="clrm")
    _add_config_flags(p)
    return parser


def _load_config_file(path: str) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} not found")
    if p.suffix == ".json":
        manifest = json.loads(p.read_text())
        values = manifest.get("config", manifest)
        return RunConfig().update({k: v for k, v in values.items()})
    return RunConfig.load(p)


def resolve_config(args) -> RunConfig:
    cfg = _load_config_file(args.config) if args.config else RunConfig()
    if args.preset:
        cfg = cfg.update(PRESETS[args.preset])
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in RunConfig.keys():
        value = getattr(args, f"cfg_{key}")
        if value is not None:
            overrides[key] = value
    return cfg.update(overrides)


COMMANDS = {
    "simulate": cmd_simulate,
    "localize": cmd_localize,
    "intensify": cmd_intensify,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"col0rme: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError) as exc:
        print(f"col0rme: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            out = COMMANDS[args.command](args, cfg)
        out.finish()
    except UsageError as exc:
        print(f"col0rme: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"col0rme: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, StackFormatError, OSError) as exc:
        print(f"col0rme: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"col0rme: data error: {exc}", file=sys.stderr)
        return EXIT_DATA

    for msg in out.warnings:
        print(f"col0rme: warning: {msg}", file=sys.stderr)
    print(json.dumps(out.results, default=_json_default))
    return EXIT_WARNING if out.warnings else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
