#!/usr/bin/env python3
"""
Command-line entry point.

Examples:
  python3 mlphand_cli.py gen-data --count 5000 --out runs/data --seed 7
  python3 mlphand_cli.py train-s2m --dataset runs/data --epochs 50
  python3 mlphand_cli.py train-full --weights runs/s2m_depth3.s2mw --dataset runs/data --jitter-px 2
  python3 mlphand_cli.py eval --weights runs/mgfp.s2mw --count 200
  python3 mlphand_cli.py sweep --weights runs/s2m_depth3.s2mw
  python3 mlphand_cli.py bench --iterations 100
  python3 mlphand_cli.py infer --weights runs/mgfp.s2mw --index 3 --heatmap-png
  python3 mlphand_cli.py ablate --depths 2,3,4,5

Exit codes: 0 success, 1 usage or config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from hand_model import HandTemplate, build_decomposition, recover_mesh
from hand_synthesis import SyntheticSample, generate_dataset, synthesize_sample, training_pairs
from mesh_export import export_heatmap_png, export_obj, export_skeleton_json
from metrics_bench import (
    DEFAULT_SIGMA_SQ,
    bench,
    bench_s2m,
    evaluate_predictions,
    palm_vertex_error,
    per_bone_vertex_error,
    predict_meshes,
    robustness_sweep,
    write_csv,
)
from mgfp_fusion import (
    MGFPModel,
    count_macs_mgfp,
    count_params_mgfp,
    init_mgfp,
    mfi_forward_batch,
    reconstruct,
    triangulate_views,
)
from mgfp_training import prepare_stage2_examples, train_stage2
from run_config import ConfigError, RunConfig, apply_overrides, config_hash, config_to_dict, load_config
from run_logging import app_logger, close_run_logging, error_logger, setup_run_logging
from runtime_paths import ensure_dir, get_output_dir
from s2m_training import train_stage1
from skeleton2mesh import (
    PEConfig,
    Skeleton2MeshModel,
    count_macs,
    count_params,
    init_s2m_model,
    s2m_forward,
)
from weight_container import load_dataset, load_sample, load_weights, resolve_template, save_weights, write_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

DEFAULT_COUNT = 5000
DEFAULT_EVAL_COUNT = 200
# Evaluation frames are drawn far past any training index of the same seed.
EVAL_START_INDEX = 1_000_000
PREDICT_CHUNK = 64


class CliUsageError(Exception):
    pass


class CliArgumentParser(argparse.ArgumentParser):
    """Usage errors raise instead of exiting so run_cli owns the exit code."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise CliUsageError(message)


# Flag dest → dotted config key.
_OVERRIDES = {
    "views": "rig.n_views",
    "arc_deg": "rig.arc_deg",
    "jitter_px": "synthesis.peak_jitter_px",
    "value_noise": "synthesis.value_noise",
    "channels": "synthesis.feature_channels",
    "depth": "model.depth",
    "batch_size": "train.batch_size",
    "output_dir": "paths.output_dir",
    "template": "paths.template_path",
}


def _add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON run config (default: ./.mlphand.json if present)")
    parser.add_argument("--seed", type=int, default=None, help="Master seed for all randomness")
    parser.add_argument("--output-dir", default=None, help="Directory for artifacts and .logs/")
    parser.add_argument("--template", default=None, help="Template container (default: builtin hand)")
    parser.add_argument("--views", type=int, default=None, help="Cameras per frame")
    parser.add_argument("--arc-deg", type=float, default=None, help="Camera arc; 360 = full ring")
    parser.add_argument("--jitter-px", type=float, default=None, help="Heatmap peak jitter std (image px)")
    parser.add_argument("--value-noise", type=float, default=None, help="Heatmap value noise std")
    parser.add_argument("--channels", type=int, default=None, help="Feature channels per view")
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars")


def _add_data_args(parser: argparse.ArgumentParser, default_count: int) -> None:
    parser.add_argument("--dataset", default=None, help="Dataset directory written by gen-data")
    parser.add_argument("--count", type=int, default=default_count, help="Samples to synthesize or read")
    parser.add_argument("--start", type=int, default=None, help="First synthetic sample index")


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--depth", type=int, default=None, help="Tri-Axis MLP depth (2-5)")
    parser.add_argument("--no-gsd", action="store_true", help="Drop the global spatial descriptor")
    parser.add_argument("--no-pe", action="store_true", help="Feed raw scalars instead of positional encoding")


def _depth_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from exc


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = CliArgumentParser(prog="mlphand", description="Multi-view hand mesh reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Synthesize a dataset directory")
    _add_common_args(gen)
    _add_data_args(gen, DEFAULT_COUNT)
    gen.add_argument("--out", default=None, help="Dataset directory (default: <output>/dataset)")
    gen.add_argument("--skeleton-only", action="store_true", help="Skip heatmaps and features")
    gen.set_defaults(handler=cmd_gen_data)

    s2m = sub.add_parser("train-s2m", help="Stage 1: train Skeleton2Mesh on ground-truth pairs")
    _add_common_args(s2m)
    _add_data_args(s2m, DEFAULT_COUNT)
    _add_model_args(s2m)
    s2m.add_argument("--epochs", type=int, default=None)
    s2m.add_argument("--batch-size", type=int, default=None)
    s2m.add_argument("--out", default=None, help="Weight file (default: <output>/s2m_depthN.s2mw)")
    s2m.set_defaults(handler=cmd_train_s2m)

    full = sub.add_parser("train-full", help="Stage 2: train the feature infuser on a locked stage-1 model")
    _add_common_args(full)
    _add_data_args(full, DEFAULT_COUNT)
    full.add_argument("--weights", required=True, help="Stage-1 weight file")
    full.add_argument("--epochs", type=int, default=None)
    full.add_argument("--batch-size", type=int, default=None)
    full.add_argument("--out", default=None, help="Weight file (default: <output>/mgfp.s2mw)")
    full.set_defaults(handler=cmd_train_full)

    evaluate = sub.add_parser("eval", help="Accuracy metrics to metrics.csv")
    _add_common_args(evaluate)
    _add_data_args(evaluate, DEFAULT_EVAL_COUNT)
    evaluate.add_argument("--weights", required=True)
    evaluate.add_argument(
        "--skeleton-source",
        choices=("gt", "triangulated"),
        default=None,
        help="Stage-1 input skeletons (default: gt for stage-1 weights, triangulated for stage-2)",
    )
    evaluate.set_defaults(handler=cmd_eval)

    sweep = sub.add_parser("sweep", help="Skeleton-noise robustness table to sweep.csv")
    _add_common_args(sweep)
    _add_data_args(sweep, DEFAULT_EVAL_COUNT)
    sweep.add_argument("--weights", required=True, help="Stage-1 weight file")
    sweep.add_argument("--sigma-sq", type=_float_list, default=list(DEFAULT_SIGMA_SQ))
    sweep.set_defaults(handler=cmd_sweep)

    bench_parser = sub.add_parser("bench", help="Latency and analytic cost to bench.csv")
    _add_common_args(bench_parser)
    _add_model_args(bench_parser)
    bench_parser.add_argument("--weights", default=None, help="Weights to time (default: fresh init)")
    bench_parser.add_argument("--batch", type=int, default=1)
    bench_parser.add_argument("--iterations", type=int, default=50)
    bench_parser.set_defaults(handler=cmd_bench)

    infer = sub.add_parser("infer", help="Reconstruct one multi-view frame to OBJ + skeleton JSON")
    _add_common_args(infer)
    infer.add_argument("--weights", required=True)
    infer.add_argument("--sample", default=None, help="Sample container (.s2mw)")
    infer.add_argument("--dataset", default=None, help="Dataset directory to pick --index from")
    infer.add_argument("--index", type=int, default=0, help="Sample index (synthesized if no input is given)")
    infer.add_argument("--out", default=None, help="Output prefix (default: <output>/infer_<index>)")
    infer.add_argument("--heatmap-png", action="store_true", help="Also write the input heatmaps as PNG")
    infer.set_defaults(handler=cmd_infer)

    ablate = sub.add_parser("ablate", help="Parameter and MAC counts over depth, PE and GSD")
    _add_common_args(ablate)
    ablate.add_argument("--depths", type=_depth_list, default=[2, 3, 4, 5])
    ablate.set_defaults(handler=cmd_ablate)

    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    overrides: Dict[str, object] = {key: getattr(args, dest, None) for dest, key in _OVERRIDES.items()}
    overrides["seed"] = args.seed
    if getattr(args, "no_gsd", False):
        overrides["model.use_gsd"] = False
    if getattr(args, "no_pe", False):
        overrides["model.use_pe"] = False
    if args.no_progress:
        overrides["train.progress"] = False
    epochs = getattr(args, "epochs", None)
    if args.command == "train-s2m":
        overrides["train.stage1_epochs"] = epochs
    elif args.command == "train-full":
        overrides["train.stage2_epochs"] = epochs
    return apply_overrides(config, overrides)


def _template(config: RunConfig) -> HandTemplate:
    return resolve_template(config.template, config.paths.template_path)


def _fresh_model(config: RunConfig, template: HandTemplate, depth: Optional[int] = None) -> Skeleton2MeshModel:
    spec = build_decomposition(template, config.model.dup_threshold)
    pe = PEConfig(
        L_bone=config.model.pe_bone_bands,
        L_order=config.model.pe_order_bands,
        pre_scale=config.model.pre_scale,
        enabled=config.model.use_pe,
    )
    return init_s2m_model(
        spec,
        depth=depth or config.model.depth,
        hidden=config.model.hidden,
        pe=pe,
        use_gsd=config.model.use_gsd,
        seed=config.seed,
        dtype=np.float32 if config.train.float32 else np.float64,
    )


def _collect_samples(
    args: argparse.Namespace,
    config: RunConfig,
    template: HandTemplate,
    *,
    render: bool,
    default_start: int = 0,
) -> List[SyntheticSample]:
    dataset_dir = args.dataset or config.paths.dataset_dir
    if dataset_dir:
        samples = load_dataset(dataset_dir, limit=args.count)
        if render and samples and not samples[0].rendered:
            raise ValueError(f"dataset {dataset_dir} was generated without images")
        print(f"📂 Loaded {len(samples)} samples from {dataset_dir}")
        return samples
    start = default_start if args.start is None else args.start
    print(f"🎲 Synthesizing {args.count} samples (seed {config.seed}, start {start})...")
    return generate_dataset(
        template, config.rig, config.synthesis, config.seed, args.count, start=start, render=render
    )


def _check_template(model: Skeleton2MeshModel, template: HandTemplate) -> None:
    if model.spec.vertex_count != template.vertex_count:
        raise ValueError(
            f"weights expect a {model.spec.vertex_count}-vertex mesh, template has {template.vertex_count}"
        )


def _infuser_shape(samples: Sequence[SyntheticSample], config: RunConfig) -> Tuple[int, int]:
    """(views, channels) of the rendered frames; loaded data wins over the config."""
    if not samples:
        raise ValueError("no samples to build the feature infuser from")
    first = samples[0]
    if first.rig is None or first.feature_amplitudes is None:
        raise ValueError(f"sample {first.index} has no camera rig or feature recipe")
    n_views, channels = first.rig.n_views, int(first.feature_amplitudes.shape[1])
    if (n_views, channels) != (config.rig.n_views, config.synthesis.feature_channels):
        app_logger.info(
            f"Infuser sized from data: {n_views} views x {channels} channels "
            f"(config says {config.rig.n_views} x {config.synthesis.feature_channels})"
        )
    return n_views, channels


def cmd_gen_data(args: argparse.Namespace, config: RunConfig, output_dir: str) -> int:
    template = _template(config)
    samples = generate_dataset(
        template,
        config.rig,
        config.synthesis,
        config.seed,
        args.count,
        start=args.start or 0,
        render=not args.skeleton_only,
    )
    directory = args.out or os.path.join(output_dir, "dataset")
    write_dataset(directory, samples, seed=config.seed, config_hash=config_hash(config), config=config_to_dict(config))
    print(f"✅ Wrote {len(samples)} samples to {directory}")
    return EXIT_OK


def cmd_train_s2m(args: argparse.Namespace, config: RunConfig, output_dir: str) -> int:
    template = _template(config)
    samples = _collect_samples(args, config, template, render=False)
    X, V = training_pairs(samples)
    model = _fresh_model(config, template)
    print(f"🏋️  Stage 1: depth {model.depth}, {count_params(model):,} params, {len(X)} pairs")
    model, curve = train_stage1(model, X, V, config.train, seed=config.seed)

    path = args.out or os.path.join(output_dir, f"s2m_depth{model.depth}.s2mw")
    save_weights(model, path)
    write_csv(os.path.join(output_dir, "stage1_curve.csv"), curve.to_rows())
    print(f"✅ Stage 1 done: val loss {curve.val_loss[-1]:.3f} mm, weights → {path}")
    return EXIT_OK


def cmd_train_full(args: argparse.Namespace, config: RunConfig, output_dir: str) -> int:
    template = _template(config)
    locked = load_weights(args.weights, kind="s2m")
    _check_template(locked, template)
    samples = _collect_samples(args, config, template, render=True)
    model = init_mgfp(locked, *_infuser_shape(samples, config))
    examples = prepare_stage2_examples(samples, model, config.synthesis)
    print(f"🏋️  Stage 2: {count_params_mgfp(model):,} params, {len(examples)} frames")
    model, curve = train_stage2(model, examples, config.train, weights=config.loss, seed=config.seed)

    path = args.out or os.path.join(output_dir, "mgfp.s2mw")
    save_weights(model, path)
    rows = [
        {"epoch": epoch, "lr": lr, "train_loss": loss, "val_mpvpe": val, **terms}
        for epoch, (lr, loss, val, terms) in enumerate(zip(curve.lr, curve.train_loss, curve.val_mpvpe, curve.terms))
    ]
    write_csv(os.path.join(output_dir, "stage2_curve.csv"), rows)
    final = curve.val_mpvpe[-1] if curve.val_mpvpe else curve.initial_val_mpvpe
    print(
        f"✅ Stage 2 done: val MPVPE {final:.3f} mm (frozen cascade {curve.frozen_val_mpvpe:.3f} mm), "
        f"weights → {path}"
    )
    return EXIT_OK


def _predict_cascade(model, samples: Sequence[SyntheticSample], config: RunConfig, source: str):
    """(pred joints, pred meshes, gt joints, gt meshes) over the frames that triangulate."""
    if source == "gt":
        X, V = training_pairs(samples)
        return X, predict_meshes(model, X), X, V

    shape = _infuser_shape(samples, config)
    if isinstance(model, MGFPModel):
        if shape != (model.n_views, model.channels):
            raise ValueError(
                f"weights expect {model.n_views} views x {model.channels} channels, "
                f"data has {shape[0]} x {shape[1]}"
            )
        mgfp = model
    else:
        mgfp = init_mgfp(model, *shape)
    examples = prepare_stage2_examples(samples, mgfp, config.synthesis)
    if not examples:
        raise ValueError("no frame could be triangulated")
    joints, meshes = [], []
    for start in range(0, len(examples), PREDICT_CHUNK):
        chunk = examples[start:start + PREDICT_CHUNK]
        X_bar = np.stack([example.X_bar for example in chunk])
        if isinstance(model, MGFPModel):
            features = np.stack([example.bone_features for example in chunk])
            patches, _ = mfi_forward_batch(model, X_bar, features)
            meshes.append(recover_mesh(model.locked.spec, patches))
        else:
            meshes.append(predict_meshes(model, X_bar))
        joints.append(X_bar)
    return (
        np.concatenate(joints),
        np.concatenate(meshes),
        np.stack([example.X_gt for example in examples]),
        np.stack([example.V_gt for example in examples]),
    )


def cmd_eval(args: argparse.Namespace, config: RunConfig, output_dir: str) -> int:
    template = _template(config)
    model = load_weights(args.weights)
    locked = model.locked if isinstance(model, MGFPModel) else model
    _check_template(locked, template)
    source = args.skeleton_source or ("triangulated" if isinstance(model, MGFPModel) else "gt")
    if isinstance(model, MGFPModel) and source == "gt":
        raise ValueError("stage-2 weights need triangulated skeletons")

    samples = _collect_samples(args, config, template, render=source == "triangulated", default_start=EVAL_START_INDEX)
    pred_joints, pred_meshes, gt_joints, gt_meshes = _predict_cascade(model, samples, config, source)
    rows, report = evaluate_predictions(pred_joints, gt_joints, pred_meshes, gt_meshes)
    metric_keys = ("mpjpe", "mpvpe", "rr_j", "rr_v", "pa_j", "pa_v")
    rows.append({"sample": "mean", **{key: getattr(report, key) for key in metric_keys}})
    write_csv(os.path.join(output_dir, "metrics.csv"), rows)

    per_bone = per_bone_vertex_error(pred_meshes, gt_meshes, locked.spec)
    write_csv(
        os.path.join(output_dir, "per_bone.csv"),
        [
            {"bone": k, "joints": name, "finger": locked.tree.finger_of(k), "mpvpe": float(value)}
            for k, (name, value) in enumerate(zip(locked.tree.order_names(), per_bone))
        ],
    )
    palm = palm_vertex_error(pred_meshes, gt_meshes, locked.spec)
    app_logger.info(f"Eval {args.weights} ({source}, {report.count} frames): {report} palm={palm:.3f}")
    print(
        f"📊 {report.count} frames: MPJPE {report.mpjpe:.3f}  MPVPE {report.mpvpe:.3f}  "
        f"RR-V {report.rr_v:.3f}  PA-V {report.pa_v:.3f}  palm {palm:.3f} mm"
    )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, config: RunConfig, output_dir: str) -> int:
    template = _template(config)
    model = load_weights(args.weights, kind="s2m")
    _check_template(model, template)
    samples = _collect_samples(args, config, template, render=False, default_start=EVAL_START_INDEX)
    X, V = training_pairs(samples)
    rows = robustness_sweep(model, X, V, args.sigma_sq, seed=config.seed)
    write_csv(os.path.join(output_dir, "sweep.csv"), rows)
    for row in rows:
        print(f"   σ²={row.sigma_sq:<5g} Ref-MPJPE {row.ref_mpjpe:6.3f}  MPVPE {row.mpvpe:6.3f} mm")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, config: RunConfig, output_dir: str) -> int:
    template = _template(config)
    if args.weights:
        loaded = load_weights(args.weights)
        locked = loaded.locked if isinstance(loaded, MGFPModel) else loaded
        mgfp = loaded if isinstance(loaded, MGFPModel) else None
    else:
        locked, mgfp = _fresh_model(config, template), None

    sample = synthesize_sample(template, config.rig, config.synthesis, config.seed, 0)
    mgfp = mgfp or init_mgfp(locked, *_infuser_shape([sample], config))

    results = [bench_s2m(locked, sample.skeleton, iterations=args.iterations)]
    if args.batch > 1:
        batch = np.repeat(sample.skeleton[np.newaxis], args.batch, axis=0)
        results.append(bench_s2m(locked, batch, iterations=args.iterations))

    fmaps = sample.feature_maps
    results.append(
        bench(
            f"reconstruct_n{mgfp.n_views}",
            lambda: reconstruct(mgfp, sample.rig, sample.heatmaps, fmaps),
            macs=count_macs_mgfp(mgfp),
            params=count_params_mgfp(mgfp),
            iterations=args.iterations,
        )
    )
    write_csv(os.path.join(output_dir, "bench.csv"), results)
    for result in results:
        print(
            f"⏱️  {result.name:<18} batch {result.batch:<4} {result.per_sample_seconds * 1e3:8.3f} ms/sample  "
            f"{result.macs / 1e6:8.2f} M MACs  {result.params / 1e6:6.2f} M params"
        )
    return EXIT_OK


def _infer_input(args: argparse.Namespace, config: RunConfig, template: HandTemplate) -> SyntheticSample:
    if args.sample:
        return load_sample(args.sample)
    dataset_dir = args.dataset or config.paths.dataset_dir
    if dataset_dir:
        for sample in load_dataset(dataset_dir):
            if sample.index == args.index:
                return sample
        raise ValueError(f"sample {args.index} not found in {dataset_dir}")
    return synthesize_sample(template, config.rig, config.synthesis, config.seed, args.index)


def cmd_infer(args: argparse.Namespace, config: RunConfig, output_dir: str) -> int:
    template = _template(config)
    model = load_weights(args.weights)
    sample = _infer_input(args, config, template)
    if not sample.rendered:
        raise ValueError(f"sample {sample.index} has no heatmaps to reconstruct from")
    temperature = config.synthesis.soft_argmax_temperature
    readout = config.synthesis.readout

    if isinstance(model, MGFPModel):
        _check_template(model.locked, template)
        X_bar, mesh, keypoints = reconstruct(
            model, sample.rig, sample.heatmaps, sample.feature_maps, temperature=temperature, readout=readout
        )
    else:
        _check_template(model, template)
        X_bar, keypoints = triangulate_views(sample.rig, sample.heatmaps, temperature=temperature, readout=readout)
        _, mesh = s2m_forward(model, X_bar)

    prefix = args.out or os.path.join(output_dir, f"infer_{sample.index}")
    obj_path = export_obj(mesh, template.faces, f"{prefix}.obj")
    json_path = export_skeleton_json(
        X_bar, f"{prefix}_skeleton.json", keypoints_2d=keypoints, extra={"sample": sample.index}
    )
    print(f"✅ Mesh → {obj_path}")
    print(f"✅ Skeleton → {json_path}")
    if args.heatmap_png:
        png_path = export_heatmap_png(sample.heatmaps, f"{prefix}_heatmaps.png")
        print(f"🖼️  Heatmaps → {png_path}")
    app_logger.info(f"Inferred sample {sample.index} with {args.weights}: {obj_path}")
    return EXIT_OK


def ablation_rows(config: RunConfig, template: HandTemplate, depths: Sequence[int]) -> List[Dict[str, object]]:
    """Full models at each depth, then PE-off and GSD-off at the configured depth."""
    variants = [(f"depth{depth}", depth, True, True) for depth in depths]
    variants += [("no_pe", config.model.depth, False, True), ("no_gsd", config.model.depth, True, False)]
    rows = []
    for name, depth, use_pe, use_gsd in variants:
        variant = apply_overrides(config, {"model.use_pe": use_pe, "model.use_gsd": use_gsd})
        model = _fresh_model(variant, template, depth)
        params, macs = count_params(model), count_macs(model)
        rows.append(
            {
                "name": name,
                "depth": depth,
                "pe": use_pe,
                "gsd": use_gsd,
                "params": params,
                "params_m": f"{params / 1e6:.2f}",
                "macs": macs,
                "macs_m": f"{macs / 1e6:.2f}",
            }
        )
    return rows


def cmd_ablate(args: argparse.Namespace, config: RunConfig, output_dir: str) -> int:
    template = _template(config)
    rows = ablation_rows(config, template, args.depths)
    write_csv(os.path.join(output_dir, "ablate.csv"), rows)
    print(f"{'variant':<10} {'params':>10} {'M':>6} {'MACs':>12} {'M':>7}")
    for row in rows:
        print(f"{row['name']:<10} {row['params']:>10,} {row['params_m']:>6} {row['macs']:>12,} {row['macs_m']:>7}")
    return EXIT_OK


def run_cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = resolve_config(args)
    except CliUsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)

    output_dir = ensure_dir(get_output_dir(config.paths.output_dir))
    setup_run_logging(output_dir)
    handler: Callable[[argparse.Namespace, RunConfig, str], int] = args.handler
    app_logger.info(f"{args.command} started (seed={config.seed}, config={config_hash(config)[:12]})")
    try:
        code = handler(args, config, output_dir)
        app_logger.info(f"{args.command} finished with exit code {code}")
        return code
    except Exception as exc:
        error_logger.error(f"{args.command} failed: {exc}", exc_info=True)
        print(f"❌ {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        close_run_logging()


if __name__ == "__main__":
    raise SystemExit(run_cli())
