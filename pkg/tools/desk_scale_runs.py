#!/usr/bin/env python3
"""
Desk-scale training and latency runs on synthetic data.

Examples:
  python3 tools/desk_scale_runs.py stage1 --count 5000 --epochs 50
  python3 tools/desk_scale_runs.py stage2 --count 2000 --epochs 30 --jitter-px 2
  python3 tools/desk_scale_runs.py latency --iterations 200
  python3 tools/desk_scale_runs.py all --label nightly

Reports are written to tools/results/*.json.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if REPO_ROOT not in sys.path:
    sys.path.insert(0, REPO_ROOT)

from hand_model import build_decomposition, build_default_template  # noqa: E402
from hand_synthesis import generate_dataset, synthesize_sample, training_pairs  # noqa: E402
from metrics_bench import bench, bench_s2m, predict_meshes, robustness_sweep  # noqa: E402
from mgfp_fusion import count_macs_mgfp, count_params_mgfp, init_mgfp, reconstruct  # noqa: E402
from mgfp_training import Stage2Example, prepare_stage2_examples, train_stage2  # noqa: E402
from run_config import RunConfig, TrainConfig  # noqa: E402
from s2m_training import evaluate_stage1, moving_average, train_stage1, validation_split  # noqa: E402
from skeleton2mesh import Skeleton2MeshModel, init_s2m_model  # noqa: E402

PREPARE_CHUNK = 256
STAGE1_TARGET_RATIO = 0.02
STAGE2_MIN_GAIN = 0.03
STAGE1_LATENCY_BOUND_S = 0.005
RECONSTRUCT_LATENCY_BOUND_S = 0.050


def iso_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def smoothed_non_increasing(losses: List[float], window: int = 5, tolerance: float = 0.01) -> bool:
    """Moving average never rises by more than `tolerance` relative between epochs."""
    smoothed = moving_average(losses, window)
    if smoothed.size < 2:
        return True
    return bool(np.all(np.diff(smoothed) <= tolerance * smoothed[:-1]))


def run_stage1(
    count: int,
    epochs: int,
    seed: int,
    *,
    progress: bool = True,
) -> Tuple[Skeleton2MeshModel, Dict[str, Any]]:
    """Depth-3 model on `count` synthetic pairs; held-out MPVPE against the hand diagonal."""
    template = build_default_template()
    config = RunConfig(seed=seed)
    started = time.perf_counter()
    samples = generate_dataset(template, config.rig, config.synthesis, seed, count, render=False)
    X, V = training_pairs(samples)
    model = init_s2m_model(build_decomposition(template), seed=seed)
    train_config = replace(config.train, stage1_epochs=epochs, progress=progress)
    model, curve = train_stage1(model, X, V, train_config, seed=seed)

    _, val_idx = validation_split(len(X), train_config.validation_fraction, seed)
    held_out = float(np.mean(np.linalg.norm(predict_meshes(model, X[val_idx]) - V[val_idx], axis=-1)))
    diagonal = float(np.mean(np.linalg.norm(V.max(axis=1) - V.min(axis=1), axis=-1)))
    sweep = robustness_sweep(model, X[val_idx], V[val_idx], seed=seed)
    report = {
        "count": count,
        "epochs": epochs,
        "seconds": round(time.perf_counter() - started, 1),
        "val_patch_loss": evaluate_stage1(model, X[val_idx], V[val_idx]),
        "held_out_mpvpe_mm": held_out,
        "hand_diagonal_mm": diagonal,
        "mpvpe_ratio": held_out / diagonal,
        "passes_accuracy": held_out / diagonal < STAGE1_TARGET_RATIO,
        "smoothed_loss_non_increasing": smoothed_non_increasing(curve.train_loss),
        "sweep": [row.__dict__ for row in sweep],
        "sweep_monotone": all(b.mpvpe >= a.mpvpe for a, b in zip(sweep, sweep[1:])),
        "train_loss": curve.train_loss,
    }
    return model, report


def prepare_in_chunks(model, config: RunConfig, count: int, seed: int) -> List[Stage2Example]:
    """Render, reduce and release frames chunk by chunk so heatmaps never pile up."""
    template = build_default_template()
    examples: List[Stage2Example] = []
    for start in range(0, count, PREPARE_CHUNK):
        chunk = min(PREPARE_CHUNK, count - start)
        samples = generate_dataset(template, config.rig, config.synthesis, seed, chunk, start=start)
        examples += prepare_stage2_examples(samples, model, config.synthesis)
        print(f"  prepared {len(examples)}/{count} frames", flush=True)
    return examples


def run_stage2(
    locked: Skeleton2MeshModel,
    count: int,
    epochs: int,
    seed: int,
    *,
    jitter_px: float = 2.0,
    progress: bool = True,
) -> Dict[str, Any]:
    config = RunConfig(seed=seed)
    config = replace(config, synthesis=replace(config.synthesis, peak_jitter_px=jitter_px))
    model = init_mgfp(locked, config.rig.n_views, config.synthesis.feature_channels)
    started = time.perf_counter()
    examples = prepare_in_chunks(model, config, count, seed)
    train_config: TrainConfig = replace(config.train, stage2_epochs=epochs, progress=progress)
    model, curve = train_stage2(model, examples, train_config, weights=config.loss, seed=seed)
    final = curve.val_mpvpe[-1]
    gain = (curve.frozen_val_mpvpe - final) / curve.frozen_val_mpvpe
    return {
        "count": count,
        "prepared": len(examples),
        "epochs": epochs,
        "jitter_px": jitter_px,
        "seconds": round(time.perf_counter() - started, 1),
        "frozen_val_mpvpe_mm": curve.frozen_val_mpvpe,
        "initial_val_mpvpe_mm": curve.initial_val_mpvpe,
        "final_val_mpvpe_mm": final,
        "relative_gain": gain,
        "zero_init_matches_frozen": curve.initial_val_mpvpe == curve.frozen_val_mpvpe,
        "passes_improvement": gain >= STAGE2_MIN_GAIN,
        "val_mpvpe": curve.val_mpvpe,
    }


def run_latency(iterations: int, seed: int) -> Dict[str, Any]:
    template = build_default_template()
    config = RunConfig(seed=seed)
    locked = init_s2m_model(build_decomposition(template), seed=seed)
    mgfp = init_mgfp(locked, config.rig.n_views, config.synthesis.feature_channels)
    sample = synthesize_sample(template, config.rig, config.synthesis, seed, 0)
    fmaps = sample.feature_maps
    s2m = bench_s2m(locked, sample.skeleton, iterations=iterations)
    full = bench(
        "reconstruct",
        lambda: reconstruct(mgfp, sample.rig, sample.heatmaps, fmaps),
        macs=count_macs_mgfp(mgfp),
        params=count_params_mgfp(mgfp),
        iterations=iterations,
    )
    return {
        "s2m": s2m.__dict__,
        "reconstruct": full.__dict__,
        "s2m_within_bound": s2m.median_seconds < STAGE1_LATENCY_BOUND_S,
        "reconstruct_within_bound": full.median_seconds < RECONSTRUCT_LATENCY_BOUND_S,
    }


def write_report(report: Dict[str, Any], output_path: Optional[str]) -> str:
    os.makedirs(os.path.join(REPO_ROOT, "tools", "results"), exist_ok=True)
    if not output_path:
        safe_label = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in report["label"])
        output_path = os.path.join(
            REPO_ROOT,
            "tools",
            "results",
            f"{safe_label}_{report['recorded_at'].replace(':', '-')}.json",
        )
    else:
        output_path = os.path.abspath(output_path)
        os.makedirs(os.path.dirname(output_path) or ".", exist_ok=True)

    with open(output_path, "w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2)
        handle.write("\n")
    return output_path


def _add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--label", default="desk", help="Report label")
    parser.add_argument("--output", default=None, help="Report path (default: tools/results/<label>_<time>.json)")
    parser.add_argument("--no-progress", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Desk-scale synthetic training and latency runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    stage1 = sub.add_parser("stage1", help="Stage-1 accuracy, loss trend and noise sweep")
    _add_common_args(stage1)
    stage1.add_argument("--count", type=int, default=5000)
    stage1.add_argument("--epochs", type=int, default=50)

    stage2 = sub.add_parser("stage2", help="Stage-1 then stage-2; compares against the frozen cascade")
    _add_common_args(stage2)
    stage2.add_argument("--stage1-count", type=int, default=5000)
    stage2.add_argument("--stage1-epochs", type=int, default=50)
    stage2.add_argument("--count", type=int, default=2000)
    stage2.add_argument("--epochs", type=int, default=30)
    stage2.add_argument("--jitter-px", type=float, default=2.0)

    latency = sub.add_parser("latency", help="Median latency of s2m_forward and reconstruct")
    _add_common_args(latency)
    latency.add_argument("--iterations", type=int, default=100)

    everything = sub.add_parser("all", help="stage1 → stage2 → latency")
    _add_common_args(everything)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    progress = not args.no_progress
    report: Dict[str, Any] = {"label": args.label, "recorded_at": iso_now(), "seed": args.seed}

    if args.command == "stage1":
        _, report["stage1"] = run_stage1(args.count, args.epochs, args.seed, progress=progress)
    elif args.command == "stage2":
        locked, report["stage1"] = run_stage1(args.stage1_count, args.stage1_epochs, args.seed, progress=progress)
        report["stage2"] = run_stage2(
            locked, args.count, args.epochs, args.seed, jitter_px=args.jitter_px, progress=progress
        )
    elif args.command == "latency":
        report["latency"] = run_latency(args.iterations, args.seed)
    elif args.command == "all":
        locked, report["stage1"] = run_stage1(5000, 50, args.seed, progress=progress)
        report["stage2"] = run_stage2(locked, 2000, 30, args.seed, progress=progress)
        report["latency"] = run_latency(100, args.seed)
    else:
        parser.error(f"Unknown command: {args.command}")
        return 2

    output_path = write_report(report, args.output)
    for section in ("stage1", "stage2", "latency"):
        if section in report:
            flags = {key: value for key, value in report[section].items() if isinstance(value, bool)}
            print(f"{section}: {flags}")
    print(f"JSON report: {output_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
