"""Command-line surface: synthetic data generation, training, feature
extraction, retrieval evaluation, activation-map dumps and ablation sweeps.

Exit codes: 0 success, 2 for configuration/usage problems, 1 for runtime
failures.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .checkpoint import CheckpointError
from .config import (
    ConfigError,
    EvalConfig,
    PreprocessConfig,
    SyntheticSpec,
    load_run_config,
    save_run_config,
)
from .data import DatasetError
from .evaluation import evaluate_ranking, extract_features, save_gallery
from .model import build_model, load_model_checkpoint, part_activation_maps
from .training import TrainingDiverged, train

CONFIG_EXIT = 2
RUNTIME_EXIT = 1


def _preprocess_from_checkpoint(container) -> PreprocessConfig:
    blob = container.extra.get("preprocess")
    if blob is None:
        raise ConfigError(
            "checkpoint carries no preprocessing statistics; re-train with this "
            "toolkit or extract features programmatically"
        )
    blob = dict(blob)
    blob["mean"] = tuple(blob["mean"])
    blob["std"] = tuple(blob["std"])
    return PreprocessConfig(**blob)


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"target directory {out} exists and is not empty")
    spec = SyntheticSpec(
        num_identities=args.ids,
        images_per_identity=args.per_id,
        num_cameras=args.cameras,
        id_start=args.id_start,
        brightness_jitter=args.jitter,
        max_shift=args.shift,
        noise_sigma=args.noise,
    )
    rng = np.random.default_rng(args.seed)
    samples = data_mod.generate_synthetic(spec, rng)
    names = data_mod.write_dataset(samples, out)
    manifest = data_mod.dataset_manifest(samples, names, spec)
    data_mod.write_manifest(manifest, out / "manifest.json")
    print(f"wrote {len(names)} images for {spec.num_identities} identities to {out}")
    return 0


def _load_training_data(cfg):
    if not cfg.data.train_dir:
        raise ConfigError("data.train_dir is not set")
    raw = data_mod.load_directory(cfg.data.train_dir)
    dataset, mapping = data_mod.relabel_contiguous(raw)
    if cfg.data.normalization == "compute":
        mean, std = data_mod.compute_channel_stats(dataset)
        preprocess = cfg.data.preprocess_config(mean, std)
    else:
        preprocess = cfg.data.preprocess_config()
    return dataset, mapping, preprocess


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    dataset, mapping, preprocess = _load_training_data(cfg)
    model_cfg = dataclasses.replace(cfg.model, num_identities=len(mapping))
    torch.manual_seed(cfg.train.seed)
    model = build_model(model_cfg, backbone_weights=args.backbone_weights)

    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = dataclasses.replace(cfg, model=model_cfg)
    save_run_config(resolved, run_dir / "resolved_config.yaml")

    resume_from = None
    if args.resume is not None:
        resume_from = args.resume
        if resume_from == "auto":
            candidates = sorted((run_dir / "checkpoints").glob("epoch_*.ckpt"))
            if not candidates:
                raise ConfigError(f"--resume: no checkpoints under {run_dir / 'checkpoints'}")
            resume_from = candidates[-1]

    result = train(
        model,
        dataset,
        cfg.train,
        cfg.loss,
        preprocess,
        run_dir=run_dir,
        resume_from=resume_from,
    )
    print(
        f"trained {result.step} steps over {cfg.train.epochs} epochs; "
        f"mean losses {({k: round(v, 4) for k, v in result.running.items()})}"
    )
    if result.checkpoint_paths:
        print(f"final checkpoint: {result.final_checkpoint}")
    else:
        print("no epochs remained to train; existing checkpoints are unchanged")
    return 0


def _load_eval_samples(
    directory: str, occlude_fraction: float | None, anchor: str, mode: str = "rescale"
):
    samples = data_mod.load_directory(directory)
    if occlude_fraction is not None:
        occluded = []
        for i, s in enumerate(samples):
            a = anchor if anchor != "alternate" else ("top" if i % 2 == 0 else "bottom")
            occluded.append(data_mod.occlude(s, occlude_fraction, a, mode=mode))
        samples = occluded
    return samples


def cmd_extract(args: argparse.Namespace) -> int:
    model, container = load_model_checkpoint(args.checkpoint)
    preprocess = _preprocess_from_checkpoint(container)
    samples = _load_eval_samples(args.images, args.occlude_fraction, args.occlude_anchor, args.occlude_mode)
    gallery = extract_features(model, samples, preprocess, batch_size=args.batch_size)
    save_gallery(gallery, args.out)
    print(f"wrote {len(gallery)} x {gallery.features.shape[1]} features to {args.out}")
    return 0


def _write_report(report, out_dir: Path, topk: tuple[int, ...]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "cmc.csv", "w", newline="") as fh:
        fh.write("# schema=1\n")
        writer = csv.writer(fh)
        writer.writerow(["rank", "accuracy"])
        for k in range(1, len(report.cmc) + 1):
            writer.writerow([k, repr(float(report.cmc[k - 1]))])
    with open(out_dir / "ranked_lists.csv", "w", newline="") as fh:
        fh.write("# schema=1\n")
        writer = csv.writer(fh)
        writer.writerow(["query", "rank", "gallery_index"])
        for q, order in enumerate(report.ranked_lists):
            for rank, g in enumerate(order, start=1):
                writer.writerow([q, rank, int(g)])
    ks = [k for k in topk if k <= len(report.cmc)]
    header = " ".join(f"r = {k}" for k in ks)
    values = " ".join(f"{100 * report.rank_k(k):5.1f}" for k in ks)
    summary = (
        f"queries evaluated: {report.num_valid_queries} "
        f"(excluded, no valid positive: {report.num_excluded_queries})\n"
        f"{header} | mAP\n{values} | {100 * report.map:5.1f}\n"
    )
    (out_dir / "summary.txt").write_text(summary)
    print(summary, end="")


def cmd_eval(args: argparse.Namespace) -> int:
    model, container = load_model_checkpoint(args.checkpoint)
    preprocess = _preprocess_from_checkpoint(container)
    queries = _load_eval_samples(args.query, args.occlude_fraction, args.occlude_anchor, args.occlude_mode)
    gallery_samples = data_mod.load_directory(args.gallery)
    q = extract_features(model, queries, preprocess, batch_size=args.batch_size)
    g = extract_features(model, gallery_samples, preprocess, batch_size=args.batch_size)
    report = evaluate_ranking(
        q, g, mode=args.mode, exclusion=args.exclusion, stripes_R=model.config.stripes_R
    )
    _write_report(report, Path(args.out), tuple(args.topk))
    return 0


def cmd_activmap(args: argparse.Namespace) -> int:
    from PIL import Image

    model, container = load_model_checkpoint(args.checkpoint)
    preprocess = _preprocess_from_checkpoint(container)
    with Image.open(args.image) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.uint8)
    batch = torch.from_numpy(data_mod.preprocess_eval(array, preprocess)).unsqueeze(0)
    maps = model.activation_maps(batch)[0]  # (R, H, W)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in range(maps.shape[0]):
        m = maps[r].clamp(min=0.0).numpy()
        peak = m.max()
        scaled = (255 * m / peak).astype(np.uint8) if peak > 0 else np.zeros_like(m, dtype=np.uint8)
        img = Image.fromarray(scaled, mode="L")
        if args.upscale > 1:
            img = img.resize((img.width * args.upscale, img.height * args.upscale), Image.NEAREST)
        img.save(out / f"part_{r}.png")
    print(f"wrote {maps.shape[0]} part maps ({maps.shape[1]}x{maps.shape[2]}) to {out}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    if not cfg.data.query_dir or not cfg.data.gallery_dir:
        raise ConfigError("sweep needs data.query_dir and data.gallery_dir in the config")
    values = args.values
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        row = {"axis": args.axis, "value": value, "status": "ok", "rank1": "", "rank5": "", "rank10": "", "map": ""}
        try:
            run_cfg = dataclasses.replace(cfg, run_name=f"{cfg.run_name}_{args.axis}_{value}")
            if args.axis == "lambda":
                run_cfg = dataclasses.replace(run_cfg, loss=dataclasses.replace(cfg.loss, lambda_scp=float(value)))
            else:
                run_cfg = dataclasses.replace(run_cfg, model=dataclasses.replace(cfg.model, stripes_R=int(value)))
            dataset, mapping, preprocess = _load_training_data(run_cfg)
            model_cfg = dataclasses.replace(run_cfg.model, num_identities=len(mapping))
            torch.manual_seed(run_cfg.train.seed)
            model = build_model(model_cfg)
            run_dir = run_cfg.run_dir()
            run_dir.mkdir(parents=True, exist_ok=True)
            save_run_config(dataclasses.replace(run_cfg, model=model_cfg), run_dir / "resolved_config.yaml")
            train(model, dataset, run_cfg.train, run_cfg.loss, preprocess, run_dir=run_dir)
            queries = _load_eval_samples(run_cfg.data.query_dir, args.occlude_fraction, args.occlude_anchor, args.occlude_mode)
            gallery_samples = data_mod.load_directory(run_cfg.data.gallery_dir)
            q = extract_features(model, queries, preprocess)
            g = extract_features(model, gallery_samples, preprocess)
            report = evaluate_ranking(
                q, g, mode=run_cfg.eval.mode, exclusion=run_cfg.eval.exclusion, stripes_R=model_cfg.stripes_R
            )
            row.update(
                rank1=repr(report.rank_k(1)),
                rank5=repr(report.rank_k(min(5, len(report.cmc)))),
                rank10=repr(report.rank_k(min(10, len(report.cmc)))),
                map=repr(report.map),
            )
        except (ConfigError, DatasetError, ValueError, TrainingDiverged) as exc:
            row["status"] = f"error: {exc}"
        rows.append(row)
        print(f"{args.axis}={value}: {row['status']} rank1={row['rank1']}")
    with open(out_path, "w", newline="") as fh:
        fh.write("# schema=1\n")
        writer = csv.DictWriter(fh, fieldnames=["axis", "value", "status", "rank1", "rank5", "rank10", "map"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep results written to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scpreid",
        description="Spatial-channel parallel metric learning for holistic and partial image retrieval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic striped-person dataset")
    p.add_argument("--ids", type=int, required=True, help="number of identities")
    p.add_argument("--per-id", type=int, default=8, dest="per_id", help="images per identity")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="target directory (must be empty or absent)")
    p.add_argument("--cameras", type=int, default=2)
    p.add_argument("--id-start", type=int, default=0, dest="id_start")
    p.add_argument("--jitter", type=float, default=0.15, help="brightness jitter amplitude")
    p.add_argument("--shift", type=int, default=2, help="max horizontal shift in pixels")
    p.add_argument("--noise", type=float, default=8.0, help="pixel noise sigma (0..255 scale)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config file")
    p.add_argument("config", help="YAML run config (see configs/desk.cfg)")
    p.add_argument("--resume", nargs="?", const="auto", default=None,
                   help="checkpoint to resume from (bare flag: latest in the run dir)")
    p.add_argument("--backbone-weights", default=None, dest="backbone_weights",
                   help="optional container with pretrained backbone weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract global features for a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True, help="feature file path")
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--occlude-fraction", type=float, default=None, dest="occlude_fraction")
    p.add_argument("--occlude-anchor", default="alternate", dest="occlude_anchor",
                   choices=["top", "bottom", "alternate"])
    p.add_argument("--occlude-mode", default="rescale", dest="occlude_mode",
                   choices=["rescale", "pad"])
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="rank a gallery against queries and report CMC/mAP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--mode", default="full", choices=["full", "prefix_by_visibility"])
    p.add_argument("--exclusion", default="none", choices=["none", "same_id_same_cam"])
    p.add_argument("--topk", type=int, nargs="+", default=[1, 5, 10])
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--occlude-fraction", type=float, default=None, dest="occlude_fraction")
    p.add_argument("--occlude-anchor", default="alternate", dest="occlude_anchor",
                   choices=["top", "bottom", "alternate"])
    p.add_argument("--occlude-mode", default="rescale", dest="occlude_mode",
                   choices=["rescale", "pad"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("activmap", help="dump per-part activation heatmaps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory for part_<r>.png files")
    p.add_argument("--upscale", type=int, default=1, help="nearest-neighbour upscale factor")
    p.set_defaults(func=cmd_activmap)

    p = sub.add_parser("sweep", help="train/evaluate across one ablation axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=["R", "lambda"])
    p.add_argument("--values", required=True, nargs="+")
    p.add_argument("--out", required=True, help="aggregate CSV path")
    p.add_argument("--occlude-fraction", type=float, default=None, dest="occlude_fraction")
    p.add_argument("--occlude-anchor", default="alternate", dest="occlude_anchor",
                   choices=["top", "bottom", "alternate"])
    p.add_argument("--occlude-mode", default="rescale", dest="occlude_mode",
                   choices=["rescale", "pad"])
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_EXIT
    except (TrainingDiverged, CheckpointError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
