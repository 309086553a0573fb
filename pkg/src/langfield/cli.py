"""Command-line entry point wiring the modules into file-based workflows.

Subcommands cover the whole pipeline: synth -> ae-train -> train, then
render / query / eval / edit on the trained scene. Artifacts land under
--out-dir; logs go to standard error. Exit codes: 0 success, 2 usage
error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .edit import remove_object, save_manifest, transplant_object
from .errors import FormatError, InvalidParameterError, LangFieldError
from .hcam import (
    ae_train,
    encode_pooled,
    hierarchical_mask_pool,
    load_autoencoder,
    load_feature_image,
    load_mask_set,
    make_synthetic_features,
    save_autoencoder,
    save_feature_image,
    save_mask_set,
)
from .imgio import read_ppm, write_pgm, write_ppm
from .metrics import ReportRow, format_report_table, write_report_csv
from .plyio import load_scene, save_query_cloud, save_scene
from .presets import (
    PRESET_NAMES,
    evaluate_fscore,
    evaluate_semantics,
    get_preset,
    ordered_map,
    stratified_feature_samples,
)
from .query import QUERY_THRESHOLD, localize, query_2d, query_3d
from .raster import CHANNEL_MODES, render
from .scene import load_cameras, save_cameras
from .tensorio import load_codebook, save_codebook, save_tensor
from .trainer import (
    TrainConfig,
    ViewData,
    apply_overrides,
    format_config,
    init_state,
    load_checkpoint,
    parse_config_text,
    run_training,
    train_stage1,
    train_stage2,
    train_stage3,
    write_loss_log,
)

PAPER_SCHEDULE = ("stage1_iters=7000", "stage2_iters=23000", "stage3_iters=10000")


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


def worker_count() -> int:
    """LANGSURF_THREADS caps eval/render parallelism; 0 or unset = auto."""
    raw = os.environ.get("LANGSURF_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InvalidParameterError(
            f"LANGSURF_THREADS must be an integer, got {raw!r}"
        ) from None
    if n < 0:
        raise InvalidParameterError("LANGSURF_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _announce(command: str, args: argparse.Namespace, keys) -> None:
    pairs = " ".join(f"{k}={getattr(args, k)}" for k in keys)
    log(f"[{command}] {pairs}")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_manifest(in_dir: Path) -> dict:
    path = in_dir / "views.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(manifest, dict) or "train" not in manifest:
        raise FormatError(f"{path}: expected an object with a 'train' list")
    for entry in manifest["train"]:
        if "camera" not in entry or "dir" not in entry:
            raise FormatError(f"{path}: train entries need 'camera' and 'dir'")
    return manifest


def _camera_at(cameras: list, index: int, source: str):
    if not 0 <= index < len(cameras):
        raise InvalidParameterError(
            f"camera index {index} out of range for {source} ({len(cameras)} cameras)"
        )
    return cameras[index]


def _load_view(in_dir: Path, entry: dict, cameras: list, model) -> ViewData:
    vdir = in_dir / entry["dir"]
    cam = _camera_at(cameras, int(entry["camera"]), "views.json")
    rgb = read_ppm(vdir / "rgb.ppm")
    feat = load_feature_image(vdir / "feature.lstf")
    masks = load_mask_set(vdir / "mask_s.lstf", vdir / "mask_m.lstf", vdir / "mask_l.lstf")
    pooled = hierarchical_mask_pool(feat, masks)
    encode_pooled(pooled, model)
    return ViewData(camera=cam, rgb=rgb, masks=masks, latent=pooled.latent)


# ---------------------------------------------------------------------------
# subcommands

def _cmd_synth(args) -> int:
    preset = get_preset(args.preset, args.seed)
    out = _out_dir(args)
    _announce("synth", args, ("preset", "seed", "out_dir"))
    log(format_config(preset.config))
    save_scene(out / "gt_scene.ply", preset.gt_scene)
    save_scene(out / "init_scene.ply", preset.init_scene)
    cams = list(preset.train_cameras) + list(preset.eval_cameras)
    save_cameras(out / "cameras.json", cams)
    save_codebook(out / "codebook.txt", preset.codebook)
    save_tensor(out / "labels.lstf", np.asarray(preset.labels, dtype=np.int32))
    save_tensor(out / "gt_points.lstf", preset.gt_points.astype(np.float32))
    save_tensor(out / "gt_point_labels.lstf", np.asarray(preset.gt_point_labels, dtype=np.int32))
    (out / "config.txt").write_text(format_config(preset.config) + "\n", encoding="utf-8")

    def one_view(item):
        i, cam = item
        vdir = out / f"view_{i:03d}"
        vdir.mkdir(exist_ok=True)
        write_ppm(vdir / "rgb.ppm", render(preset.gt_scene, cam, channels="color").color)
        feat, masks, label_map = make_synthetic_features(
            preset.gt_scene,
            preset.labels,
            cam,
            preset.vectors_by_label,
            noise_sigma=preset.noise_sigma,
            seed=1000 + i,
            category_by_label=preset.category_by_label,
        )
        save_feature_image(vdir / "feature.lstf", feat)
        save_mask_set(vdir / "mask_s.lstf", vdir / "mask_m.lstf", vdir / "mask_l.lstf", masks)
        save_tensor(vdir / "label_map.lstf", label_map.astype(np.int32))
        return vdir.name

    names = ordered_map(one_view, list(enumerate(preset.train_cameras)), worker_count())
    manifest = {
        "preset": preset.name,
        "seed": int(preset.config.seed),
        "noise_sigma": preset.noise_sigma,
        "ae_epochs": preset.ae_epochs,
        "train": [{"camera": i, "dir": name} for i, name in enumerate(names)],
        "eval": [{"camera": len(names) + j} for j in range(len(preset.eval_cameras))],
    }
    (out / "views.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    log(f"[synth] wrote {len(names)} train views and {len(preset.eval_cameras)} eval cameras to {out}")
    return 0


def _cmd_ae_train(args) -> int:
    in_dir = Path(args.in_dir)
    manifest = _read_manifest(in_dir)
    _announce("ae-train", args, ("in_dir", "epochs", "seed", "sample_cap"))
    pooled_all, masks_all = [], []
    for entry in manifest["train"]:
        vdir = in_dir / entry["dir"]
        feat = load_feature_image(vdir / "feature.lstf")
        masks = load_mask_set(vdir / "mask_s.lstf", vdir / "mask_m.lstf", vdir / "mask_l.lstf")
        pooled_all.append(hierarchical_mask_pool(feat, masks))
        masks_all.append(masks)
    samples = stratified_feature_samples(pooled_all, masks_all, args.sample_cap, args.seed)
    epochs = args.epochs if args.epochs is not None else int(manifest.get("ae_epochs", 200))
    model = ae_train(samples, epochs=epochs, seed=args.seed)
    out = Path(args.out_dir) if args.out_dir else in_dir
    out.mkdir(parents=True, exist_ok=True)
    save_autoencoder(out / "ae", model)
    log(f"[ae-train] samples={len(samples)} epochs={epochs} final_loss={model.final_loss:.6g} -> {out / 'ae'}")
    return 0


def _cmd_train(args) -> int:
    in_dir = Path(args.in_dir)
    if args.resume:
        if args.config or args.set or args.paper_schedule or args.seed is not None:
            log("error: train: --resume replays the checkpoint's config; "
                "drop --config/--set/--seed/--paper-schedule")
            return 2
        state, config = load_checkpoint(args.resume)
    else:
        config = TrainConfig()
        cfg_path = Path(args.config) if args.config else in_dir / "config.txt"
        if args.config or cfg_path.exists():
            config = parse_config_text(cfg_path.read_text(encoding="utf-8"), base=config)
        if args.paper_schedule:
            config = apply_overrides(config, list(PAPER_SCHEDULE))
        if args.set:
            config = apply_overrides(config, args.set)
        if args.seed is not None:
            config = apply_overrides(config, [f"seed={args.seed}"])
        state = None
    log("[train] resolved config:")
    log(format_config(config))

    cameras = load_cameras(in_dir / "cameras.json")
    manifest = _read_manifest(in_dir)
    model = load_autoencoder(Path(args.ae) if args.ae else in_dir / "ae")
    views = [_load_view(in_dir, entry, cameras, model) for entry in manifest["train"]]
    out = _out_dir(args)

    t0 = time.time()
    if args.stage is not None:
        if state is None:
            state = init_state(load_scene(args.scene or in_dir / "init_scene.ply"), config)
        if state.stage != args.stage:
            raise InvalidParameterError(
                f"state is at stage {state.stage}, cannot run stage {args.stage}"
            )
        stage_fn = {1: train_stage1, 2: train_stage2, 3: train_stage3}[args.stage]
        state = stage_fn(state, views, config)
    else:
        scene = None if state is not None else load_scene(args.scene or in_dir / "init_scene.ply")
        state = run_training(scene, views, config, state=state, checkpoint_dir=out / "checkpoints")
    save_scene(out / "final_scene.ply", state.scene)
    write_loss_log(out / "loss_log.csv", state.loss_rows)
    (out / "config.txt").write_text(format_config(config) + "\n", encoding="utf-8")
    log(f"[train] stage={state.stage} global_iter={state.global_iter} "
        f"gaussians={state.scene.count} wall_s={time.time() - t0:.1f}")
    return 0


def _cmd_render(args) -> int:
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    if args.index is not None:
        _camera_at(cameras, args.index, args.cameras)
        indices = [args.index]
    else:
        indices = list(range(len(cameras)))
    out = _out_dir(args)
    _announce("render", args, ("scene", "cameras", "channels", "out_dir"))

    def one(i: int):
        r = render(scene, cameras[i], channels=args.channels)
        vdir = out / f"render_{i:03d}"
        vdir.mkdir(exist_ok=True)
        write_ppm(vdir / "rgb.ppm", r.color)
        save_tensor(vdir / "alpha.lstf", r.alpha.astype(np.float32))
        save_tensor(vdir / "depth.lstf", r.depth.astype(np.float32))
        save_tensor(vdir / "normal.lstf", r.normal.astype(np.float32))
        if r.feature is not None:
            save_tensor(vdir / "feature.lstf", r.feature.astype(np.float32))
        if r.feature_ins is not None:
            save_tensor(vdir / "feature_ins.lstf", r.feature_ins.astype(np.float32))

    ordered_map(one, indices, worker_count())
    log(f"[render] wrote {len(indices)} views to {out}")
    return 0


def _cmd_query2d(args) -> int:
    scene = load_scene(args.scene)
    model = load_autoencoder(args.ae)
    codebook = load_codebook(args.codebook)
    cameras = load_cameras(args.cameras)
    cam = _camera_at(cameras, args.index, args.cameras)
    _announce("query2d", args, ("scene", "token", "threshold", "index"))
    r = render(scene, cam, channels="lang")
    scores, mask = query_2d(r.feature, model, codebook, args.token, args.threshold)
    filtered, peak = localize(scores)
    out = _out_dir(args)
    save_tensor(out / "scores.lstf", scores.astype(np.float32))
    save_tensor(out / "scores_filtered.lstf", filtered.astype(np.float32))
    write_pgm(out / "mask.pgm", mask)
    result = {
        "token": args.token,
        "threshold": float(args.threshold),
        "camera_index": args.index,
        "peak": [int(peak[0]), int(peak[1])],
        "selected_pixels": int(mask.sum()),
    }
    (out / "result.json").write_text(json.dumps(result, indent=1) + "\n", encoding="utf-8")
    print(f"{args.token}: peak=({peak[0]},{peak[1]}) selected={int(mask.sum())}/{mask.size}")
    return 0


def _cmd_query3d(args) -> int:
    scene = load_scene(args.scene)
    model = load_autoencoder(args.ae)
    codebook = load_codebook(args.codebook)
    _announce("query3d", args, ("scene", "token", "threshold"))
    scores, selected = query_3d(scene, model, codebook, args.token, args.threshold)
    out = _out_dir(args)
    save_query_cloud(out / "selection.ply", scene.position[selected], scores[selected])
    result = {
        "token": args.token,
        "threshold": float(args.threshold),
        "matched": int(selected.sum()),
        "total": int(scene.count),
    }
    (out / "result.json").write_text(json.dumps(result, indent=1) + "\n", encoding="utf-8")
    print(f"{args.token}: matched {int(selected.sum())}/{scene.count} gaussians")
    return 0


def _cmd_seg_eval(args) -> int:
    preset = get_preset(args.preset, args.seed)
    scene = load_scene(args.scene)
    model = load_autoencoder(args.ae)
    _announce("seg-eval", args, ("scene", "preset", "seed"))
    res = evaluate_semantics(scene, model, preset.codebook, preset, workers=worker_count())
    queries = "+".join(res["tokens"])
    rows = [
        ReportRow(preset.name, queries, f"iou_view{i}", v)
        for i, v in enumerate(res["per_view_iou"])
    ]
    rows.append(ReportRow(preset.name, queries, "miou", res["miou"]))
    rows.append(ReportRow(preset.name, queries, "macc", res["macc"]))
    out = _out_dir(args)
    write_report_csv(out / "report.csv", rows)
    print(format_report_table(rows))
    return 0


def _cmd_fscore_eval(args) -> int:
    preset = get_preset(args.preset, args.seed)
    scene = load_scene(args.scene)
    model = load_autoencoder(args.ae)
    _announce("fscore-eval", args, ("scene", "preset", "seed", "tau", "threshold"))
    res = evaluate_fscore(
        scene, model, preset.codebook, preset, threshold=args.threshold, tau=args.tau
    )
    rows = [ReportRow(preset.name, token, "fscore", value, note) for token, value, note in res["rows"]]
    rows.append(ReportRow(preset.name, "mean", "fscore", res["fscore_mean"]))
    out = _out_dir(args)
    write_report_csv(out / "report.csv", rows)
    print(format_report_table(rows))
    return 0


def _cmd_remove(args) -> int:
    scene = load_scene(args.scene)
    model = load_autoencoder(args.ae)
    codebook = load_codebook(args.codebook)
    _announce("remove", args, ("scene", "token", "threshold"))
    edited, manifest = remove_object(scene, model, codebook, args.token, args.threshold)
    out = _out_dir(args)
    save_scene(out / "edited_scene.ply", edited)
    save_manifest(out / "manifest.json", manifest)
    print(f"removed {len(manifest['removed_ids'])} gaussians, {manifest['remaining']} remain")
    return 0


def _cmd_add(args) -> int:
    target = load_scene(args.scene)
    source = load_scene(args.source)
    model = load_autoencoder(args.ae)
    codebook = load_codebook(args.codebook)
    _announce("add", args, ("scene", "source", "token", "scale"))
    edited, manifest = transplant_object(
        source,
        target,
        model,
        codebook,
        args.token,
        threshold=args.threshold,
        rotation=tuple(args.rotate),
        translation=tuple(args.translate),
        scale=args.scale,
    )
    out = _out_dir(args)
    save_scene(out / "edited_scene.ply", edited)
    save_manifest(out / "manifest.json", manifest)
    print(f"added {len(manifest['added_ids'])} gaussians, {manifest['remaining']} total")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    config_help = "config keys and defaults:\n" + "\n".join(
        "  " + line for line in format_config(TrainConfig()).splitlines()
    )
    parser = argparse.ArgumentParser(
        prog="langfield",
        description="Surface-aligned gaussian fields with language features.",
        epilog=config_help,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("synth", help="build a fixture scene, views, and supervision")
    p.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p.add_argument("--seed", type=int, default=None, help="preset seed (default per preset)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ae-train", help="fit the latent feature compressor from synth output")
    p.add_argument("--in-dir", required=True, help="directory written by synth")
    p.add_argument("--out-dir", default=None, help="where to put ae/ (default: --in-dir)")
    p.add_argument("--epochs", type=int, default=None, help="default: preset's ae_epochs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-cap", type=int, default=8192)
    p.set_defaults(func=_cmd_ae_train)

    p = sub.add_parser(
        "train",
        help="run the training schedule on synth output",
        epilog=config_help,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--in-dir", required=True, help="directory written by synth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="config file (default: <in-dir>/config.txt)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--paper-schedule", action="store_true",
                   help="use the full 7000/23000/10000 schedule")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), default=None,
                   help="run a single stage (later stages need --resume)")
    p.add_argument("--resume", default=None, metavar="CHECKPOINT_DIR")
    p.add_argument("--scene", default=None, help="starting scene (default: <in-dir>/init_scene.ply)")
    p.add_argument("--ae", default=None, help="autoencoder dir (default: <in-dir>/ae)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render a scene from stored cameras")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--index", type=int, default=None, help="render one camera (default: all)")
    p.add_argument("--channels", choices=CHANNEL_MODES, default="color")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("query2d", help="text query against one rendered view")
    p.add_argument("--scene", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--threshold", type=float, default=QUERY_THRESHOLD)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_query2d)

    p = sub.add_parser("query3d", help="text query against gaussian features")
    p.add_argument("--scene", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--threshold", type=float, default=QUERY_THRESHOLD)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_query3d)

    p = sub.add_parser("seg-eval", help="2D segmentation metrics against a preset's ground truth")
    p.add_argument("--scene", required=True, help="trained scene PLY")
    p.add_argument("--ae", required=True)
    p.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_seg_eval)

    p = sub.add_parser("fscore-eval", help="3D selection metric against a preset's point cloud")
    p.add_argument("--scene", required=True, help="trained scene PLY")
    p.add_argument("--ae", required=True)
    p.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--threshold", type=float, default=QUERY_THRESHOLD)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_fscore_eval)

    p = sub.add_parser("remove", help="delete the object matching a text query")
    p.add_argument("--scene", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--threshold", type=float, default=QUERY_THRESHOLD)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_remove)

    p = sub.add_parser("add", help="transplant a queried object into another scene")
    p.add_argument("--scene", required=True, help="target scene PLY")
    p.add_argument("--source", required=True, help="scene to copy the object from")
    p.add_argument("--ae", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--threshold", type=float, default=QUERY_THRESHOLD)
    p.add_argument("--rotate", type=float, nargs=4, default=(1.0, 0.0, 0.0, 0.0),
                   metavar=("W", "X", "Y", "Z"))
    p.add_argument("--translate", type=float, nargs=3, default=(0.0, 0.0, 0.0),
                   metavar=("X", "Y", "Z"))
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_add)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return int(args.func(args) or 0)
    except (LangFieldError, OSError) as exc:
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
