"""Command-line entry points.

Exit codes: 0 success, 1 user error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import data as D
from . import evaluation as E
from .config import ConfigError, ExperimentConfig, load_config
from .geometry import disparity_to_depth
from .networks import load_pretrained_backbone
from .training import NonFiniteLossError, PhaseSpec, compute_phase_loss, load_checkpoint, run_schedule

log = logging.getLogger("asanet")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    pass


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.schedule.seed = args.seed
    if getattr(args, "output", None):
        cfg.output_dir = args.output
    return cfg


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _build_nets(cfg: ExperimentConfig, checkpoint=None):
    torch.manual_seed(cfg.seed)
    nets = cfg.model.build()
    if cfg.model.pretrained:
        load_pretrained_backbone(nets, cfg.model.pretrained)
    if checkpoint is not None:
        if not Path(checkpoint).exists():
            raise UserError(f"checkpoint {checkpoint} not found")
        load_checkpoint(checkpoint, nets)
    return nets


def _datasets(cfg: ExperimentConfig):
    d = cfg.data
    augment = {"flip": d.flip, "color_jitter": d.color_jitter}
    augment = augment if any(augment.values()) else None
    if d.kind == "synthetic":
        if not (Path(d.root) / D.MANIFEST_NAME).exists():
            raise UserError(f"no synthetic dataset at {d.root}; run `asanet synth` first")
        return (D.SyntheticDataset(d.root, "train", augment, cfg.seed),
                D.SyntheticDataset(d.root, "val"))
    size = (d.width, d.height)
    return (D.KittiDataset(d.root, d.train_split, size, d.split_dir, augment, cfg.seed),
            D.KittiDataset(d.root, d.val_split, size, d.split_dir))


def _colormap(values: np.ndarray, vmax=None, cmap="magma") -> np.ndarray:
    from matplotlib import colormaps

    vmax = float(np.percentile(values, 95)) if vmax is None else vmax
    norm = np.clip(values / max(vmax, 1e-12), 0.0, 1.0)
    return (colormaps[cmap](norm)[..., :3] * 255).astype(np.uint8)


def _save_png(path, array: np.ndarray):
    from PIL import Image

    Image.fromarray(array).save(path)


def save_depth_png(path, depth: np.ndarray):
    """16-bit single-channel PNG, metres x 256."""
    from PIL import Image

    enc = np.clip(np.round(depth * 256.0), 0, 65535).astype(np.uint16)
    Image.fromarray(enc).save(path)


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    return (img.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = Path(args.output or cfg.data.root)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UserError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        manifest = D.build_synthetic_dataset(
            out, seed=cfg.seed, num_train=cfg.data.num_train, num_val=cfg.data.num_val,
            width=cfg.data.width, height=cfg.data.height, moving_fraction=cfg.data.moving_fraction,
            extra_specs=cfg.data.scenes)
    except ValueError as exc:
        shutil.rmtree(out, ignore_errors=True)
        raise UserError(str(exc)) from exc
    cfg.dump(out / "config.yaml")
    print(f"wrote {len(manifest['snippets'])} snippets to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if args.phases:
        try:
            cfg.schedule.phases = tuple(int(p) for p in args.phases.split(","))
            cfg.schedule.__post_init__()
        except ValueError as exc:
            raise UserError(f"bad --phases {args.phases!r}: {exc}") from exc
    _seed_everything(cfg.seed)
    train_set, val_set = _datasets(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    nets = _build_nets(cfg)
    resume = False
    if args.resume or args.checkpoint:
        resume = args.checkpoint or True
        if resume is True and not (out / "latest.pt").exists():
            raise UserError(f"nothing to resume in {out}")
    try:
        run_schedule(train_set, nets, cfg.schedule, cfg.optimizer, cfg.loss, cfg.model, out,
                     val_set=val_set, resume=resume)
    except NonFiniteLossError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"training finished; checkpoints in {out}")
    return EXIT_OK


def _predict_depth(nets, snippet: D.Snippet, model_cfg) -> np.ndarray:
    with torch.no_grad():
        disp = nets.depth(snippet.target[None])[0]
        depth = disparity_to_depth(disp, model_cfg.min_depth, model_cfg.max_depth)
    if snippet.gt_depth is not None and depth.shape[-2:] != snippet.gt_depth.shape:
        depth = F.interpolate(depth, size=tuple(snippet.gt_depth.shape), mode="bilinear",
                              align_corners=False)
    return depth[0, 0].numpy()


def cmd_eval_depth(args) -> int:
    cfg = _resolve(args)
    d = cfg.data
    if d.kind == "synthetic":
        snippets = list(D.SyntheticDataset(d.root, "val"))
        crop = False
    else:
        snippets = D.load_snippets(d.root, d.test_split, (d.width, d.height), d.split_dir)
        crop = True
    nets = None if args.oracle else _build_nets(cfg, args.checkpoint)
    if nets is not None:
        nets.eval()
    out = Path(cfg.output_dir) / "eval_depth"
    out.mkdir(parents=True, exist_ok=True)
    per_image, results = [], []
    for snip in snippets:
        if snip.gt_depth is None:
            raise UserError(f"snippet {snip.snippet_id} has no ground-truth depth")
        gt = snip.gt_depth.numpy().astype(np.float64)
        pred = gt.copy() if args.oracle else _predict_depth(nets, snip, cfg.model)
        mask = E.eigen_crop_mask(*gt.shape) if crop else None
        m = E.depth_metrics(pred, gt, cap=args.cap, median_scale=not args.no_median, mask=mask)
        results.append(m)
        per_image.append({"id": snip.snippet_id, **m.as_dict()})
        if args.export:
            stem = snip.snippet_id.replace("/", "_").replace(" ", "_")
            save_depth_png(out / f"{stem}_depth.png", pred)
            _save_png(out / f"{stem}_disp.png", _colormap(1.0 / np.maximum(pred, 1e-6)))
    if not per_image:
        raise UserError("no test snippets found")
    agg = E.DepthMetrics.mean(results)
    (out / "per_image.json").write_text(json.dumps(per_image, indent=1))
    report = {"aggregate": agg.as_dict(), "images": len(per_image), "cap": args.cap,
              "median_scale": not args.no_median}
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    header = " ".join(f"{k:>9}" for k in E.METRIC_NAMES)
    row = " ".join(f"{getattr(agg, k):9.4f}" if getattr(agg, k) is not None else f"{'-':>9}"
                   for k in E.METRIC_NAMES)
    (out / "report.txt").write_text(header + "\n" + row + "\n")
    print(header)
    print(row)
    return EXIT_OK


def predict_relative_poses(nets, frames: torch.Tensor) -> list:
    """Pose of frame k+1 in the frame of camera k, for each consecutive pair."""
    from .geometry import invert_transform, pose_vector_to_transform

    rel = []
    nets.eval()
    with torch.no_grad():
        for k in range(len(frames) - 1):
            vec = nets.visual_odometry(frames[k][None], frames[k + 1][None]).double()
            t = invert_transform(pose_vector_to_transform(vec))
            m = np.eye(4)
            m[:3, :3] = t.rotation[0].numpy()
            m[:3, 3] = t.translation[0].numpy()
            rel.append(m)
    return rel


def _plot_trajectory(path, est: E.Trajectory, ref: E.Trajectory | None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    if ref is not None:
        ax.plot(ref.positions[:, 0], ref.positions[:, 2], "k-", label="ground truth")
    ax.plot(est.positions[:, 0], est.positions[:, 2], "r-", label="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_eval_odom(args) -> int:
    cfg = _resolve(args)
    d = cfg.data
    if d.kind == "synthetic":
        frames, gt_poses, _ = D.generate_synthetic_sequence(
            num_frames=args.frames, seed=args.sequence, width=d.width, height=d.height)
    else:
        frames, gt_poses, _ = D.load_odometry_sequence(d.root, args.sequence, (d.width, d.height))
    ref = E.Trajectory(gt_poses.numpy()) if gt_poses is not None else None
    if args.oracle:
        if ref is None:
            raise UserError("oracle mode needs ground-truth poses")
        rel = [np.linalg.inv(ref.poses[k]) @ ref.poses[k + 1] for k in range(len(ref) - 1)]
    else:
        rel = predict_relative_poses(_build_nets(cfg, args.checkpoint), frames)
    est = E.accumulate_trajectory(rel)

    out = Path(cfg.output_dir) / "eval_odom"
    out.mkdir(parents=True, exist_ok=True)
    name = f"{args.sequence:02d}"
    E.write_pose_file(out / f"{name}.txt", est)
    report = {"sequence": args.sequence, "frames": len(est)}
    aligned = est
    if ref is not None:
        alignment = E.align_umeyama_7dof(est, ref)
        aligned = alignment.aligned
        errs = E.odometry_errors(aligned, ref)
        report.update({"scale": alignment.scale, "ate_rmse": alignment.rmse,
                       "degenerate_alignment": alignment.degenerate,
                       "t_err": errs.t_err, "r_err": errs.r_err, "segments": errs.segments})
        E.write_pose_file(out / f"{name}_aligned.txt", aligned)
    (out / f"{name}_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    _plot_trajectory(out / f"{name}_trajectory.png", aligned, ref)
    print(json.dumps(report, sort_keys=True))
    if ref is not None and report["segments"] == 0:
        print("warning: trajectory shorter than the shortest evaluation segment", file=sys.stderr)
    return EXIT_OK


def export_maps(nets, snippet: D.Snippet, model_cfg, loss_cfg, out_dir) -> dict:
    """Write the six aligned diagnostic images for one snippet; returns their paths."""
    nets.eval()
    with torch.no_grad():
        res = compute_phase_loss(PhaseSpec(3), snippet, nets, loss_cfg, model_cfg, check_flags=False)
    maps = res.maps
    stem = snippet.snippet_id.replace("/", "_").replace(" ", "_")
    pe_vmax = float(max(maps["pe_ego"].max(), maps["pe_merged"].max(), 1e-6))
    images = {
        "input": _to_uint8(snippet.target),
        "disparity": _colormap(maps["disp"][0, 0].numpy()),
        "m_auto": (maps["m_auto"][0, 0].numpy() * 255).astype(np.uint8),
        "m_dynamic": (maps["m_dynamic"][0, 0].numpy() * 255).astype(np.uint8),
        "pe_ego": _colormap(maps["pe_ego"][0, 0].numpy(), vmax=pe_vmax, cmap="inferno"),
        "pe_merged": _colormap(maps["pe_merged"][0, 0].numpy(), vmax=pe_vmax, cmap="inferno"),
    }
    paths = {}
    for key, img in images.items():
        path = Path(out_dir) / f"{stem}_{key}.png"
        _save_png(path, img)
        paths[key] = path
    return paths


def cmd_export_maps(args) -> int:
    cfg = _resolve(args)
    if cfg.data.kind != "synthetic":
        raise UserError("map export reads snippets from a synthetic dataset")
    nets = _build_nets(cfg, args.checkpoint)
    out = Path(cfg.output_dir) / "maps"
    out.mkdir(parents=True, exist_ok=True)
    datasets = [D.SyntheticDataset(cfg.data.root, s) for s in ("train", "val")]
    missing = []
    for sid in [s for s in args.snippets.split(",") if s]:
        snip = None
        for ds in datasets:
            if sid in ds.ids():
                snip = ds.by_id(sid)
        if snip is None:
            missing.append(sid)
            continue
        export_maps(nets, snip, cfg.model, cfg.loss, out)
    if missing:
        print(f"unknown snippet id(s), skipped: {', '.join(missing)}", file=sys.stderr)
    print(f"maps written to {out}")
    return EXIT_OK


def cmd_latency(args) -> int:
    cfg = _resolve(args)
    nets = _build_nets(cfg, args.checkpoint)
    ms = E.inference_latency(nets, args.trials, (cfg.data.height, cfg.data.width))
    print(f"{ms:.3f} ms per odometry forward ({args.trials} trials)")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asanet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="experiment YAML file")
        p.add_argument("--seed", type=int)
        p.add_argument("--output", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint file")

    p = sub.add_parser("synth", help="render the synthetic dataset")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the training schedule")
    common(p, checkpoint=True)
    p.add_argument("--phases", help="comma-separated phases to run, e.g. 1 or 1,2,3")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-depth", help="depth metrics on the test split")
    common(p, checkpoint=True)
    p.add_argument("--cap", type=float, default=E.DEPTH_CAP)
    p.add_argument("--no-median", action="store_true", help="disable per-image median scaling")
    p.add_argument("--oracle", action="store_true", help="use ground truth as the prediction")
    p.add_argument("--export", action="store_true", help="write 16-bit depth and disparity images")
    p.set_defaults(func=cmd_eval_depth)

    p = sub.add_parser("eval-odom", help="odometry errors on one sequence")
    common(p, checkpoint=True)
    p.add_argument("--sequence", type=int, default=9)
    p.add_argument("--frames", type=int, default=160, help="synthetic sequence length")
    p.add_argument("--oracle", action="store_true", help="use ground-truth poses as predictions")
    p.set_defaults(func=cmd_eval_odom)

    p = sub.add_parser("export-maps", help="write disparity, mask and error images")
    common(p, checkpoint=True)
    p.add_argument("--snippets", required=True, help="comma-separated snippet ids")
    p.set_defaults(func=cmd_export_maps)

    p = sub.add_parser("latency", help="time the odometry inference path")
    common(p, checkpoint=True)
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_latency)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UserError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
