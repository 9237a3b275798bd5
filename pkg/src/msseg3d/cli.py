"""Command-line pipeline: generate → partition → train → evaluate → analyze.

Every command is deterministic given (config, seed). All artifacts are plain
files; exit codes: 0 success, 2 usage/config error, 3 data error, 4 training
abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import dataset_report, embed_features, source_separability, write_figures
from .config import ConfigError, ExperimentConfig, ablation_flags, default_config, merge_overrides
from .dataset import load_dataset, load_manifest, write_dataset
from .metrics import evaluate_segmentation
from .partition import PartitionResult, partition_sources
from .trainer import (
    CheckpointError,
    ModelBundle,
    Trainer,
    TrainingAbort,
    latest_checkpoint,
    load_checkpoint,
)
from .volumes import PlacementError, VolumeFormatError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_TRAINING = 4


class DataError(RuntimeError):
    """Bad or missing input artifacts (exit code 3)."""


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return ExperimentConfig.load(args.config)
    return default_config()


def _apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    if not overrides:
        return config
    return ExperimentConfig.from_dict(merge_overrides(config.as_dict(), overrides))


def cmd_init_config(args) -> int:
    path = Path(args.out)
    default_config().save(path)
    print(f"wrote default config to {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output dir {out} is not empty (use --force to overwrite)")
    manifest = write_dataset(config.data, out)
    n_train, n_test = len(manifest["train"]), len(manifest["test"])
    print(f"generated {n_train} train + {n_test} test volumes in {out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    config = _load_config(args)
    overrides = {}
    if args.mixed_fraction is not None:
        overrides["mixed_fraction"] = args.mixed_fraction
    if args.per_source:
        overrides["per_source"] = True
    config = _apply_overrides(config, {"partition": overrides} if overrides else {})
    cohort = load_dataset(args.dataset)
    if not cohort.labeled or not cohort.unlabeled:
        raise DataError(
            f"dataset {args.dataset} needs labeled and unlabeled training volumes to partition"
        )
    pc = config.partition
    result = partition_sources(
        cohort.labeled,
        cohort.unlabeled,
        mixed_fraction=pc.mixed_fraction,
        bins=pc.bins,
        per_source=pc.per_source,
    )
    out = Path(args.out) if args.out else Path(args.dataset) / "partition.json"
    out.write_text(json.dumps(result.as_dict(), indent=1, sort_keys=True))
    print(
        f"partitioned {len(result.mixed_ids)} mixed / {len(result.other_ids)} other "
        f"(main={len(result.main_ids)}) -> {out}"
    )
    return EXIT_OK


def _split_unlabeled(cohort, partition: PartitionResult):
    by_id = {v.sample_id: v for v in cohort.unlabeled}
    missing = (set(partition.mixed_ids) | set(partition.other_ids)) ^ set(by_id)
    if missing:
        raise DataError(f"partition does not match dataset; mismatched ids: {sorted(missing)[:6]}")
    mixed = [by_id[i] for i in partition.mixed_ids]
    other = [by_id[i] for i in partition.other_ids]
    return mixed, other


def _read_partition(path) -> PartitionResult:
    path = Path(path)
    if not path.exists():
        raise DataError(f"partition file {path} does not exist")
    try:
        return PartitionResult.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"{path}: not a valid partition file ({e})") from e


def cmd_train(args) -> int:
    config = _load_config(args)
    overrides: dict = {"train": {}}
    if args.ablation:
        ablation_flags(args.ablation)  # usage error on bad name
        overrides["ablation"] = args.ablation
    if args.epochs is not None:
        overrides["train"]["epochs"] = args.epochs
    if args.seed is not None:
        overrides["train"]["seed"] = args.seed
    config = _apply_overrides(config, overrides)

    cohort = load_dataset(args.dataset)
    if not cohort.labeled:
        raise DataError(f"dataset {args.dataset} has no labeled training volumes")
    manifest = load_manifest(args.dataset)
    if manifest["class_count"] != config.data.class_count:
        raise DataError(
            f"config class_count {config.data.class_count} != dataset "
            f"class_count {manifest['class_count']}"
        )
    partition = _read_partition(args.partition)
    mixed, other = _split_unlabeled(cohort, partition)

    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        ckpt = latest_checkpoint(run_dir)
        trainer = Trainer.restore(ckpt, cohort.labeled, mixed, other)
        done = trainer.step // trainer.schedule.steps_per_epoch
        epochs = max(0, trainer.config.train.epochs - done)
    else:
        config.save(run_dir / "config.json")
        trainer = Trainer(config, cohort.labeled, mixed, other)
        epochs = None
    report = trainer.run(run_dir, epochs=epochs)
    print(
        f"trained {report['steps']} steps ({config.ablation}); "
        f"final checkpoint {report['final_checkpoint']}"
    )
    return EXIT_OK


def _resolve_bundle(args) -> ModelBundle:
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    if not args.run:
        raise DataError("evaluate needs --run or --checkpoint")
    return load_checkpoint(latest_checkpoint(args.run))


def cmd_evaluate(args) -> int:
    bundle = _resolve_bundle(args)
    cohort = load_dataset(args.dataset)
    if not cohort.test:
        raise DataError(f"dataset {args.dataset} has no test volumes")
    class_count = bundle.config.data.class_count
    out_dir = Path(args.run) if args.run else Path(args.out or ".").parent
    pred_dir = out_dir / f"predictions-{args.mode}"
    pred_dir.mkdir(parents=True, exist_ok=True)

    preds, gts = [], []
    per_source: dict[str, dict[str, list]] = {}
    for v in sorted(cohort.test, key=lambda v: v.sample_id):
        if v.labels is None:
            raise DataError(f"test volume {v.sample_id} has no labels")
        pred = bundle.predict(v, mode=args.mode)
        np.save(pred_dir / f"{v.sample_id}.npy", pred)
        preds.append(pred)
        gts.append(v.labels)
        bucket = per_source.setdefault(v.source_id or "unknown", {"pred": [], "gt": []})
        bucket["pred"].append(pred)
        bucket["gt"].append(v.labels)

    scores = evaluate_segmentation(np.stack(preds), np.stack(gts), class_count)
    report = {
        "step": bundle.step,
        "mode": args.mode,
        "mIoU": scores.mean_iou,
        "Dice": scores.mean_dice,
        "Recall": scores.mean_recall,
        "Acc": scores.accuracy,
        "per_class": scores.as_dict(),
        "per_source": {
            sid: evaluate_segmentation(
                np.stack(b["pred"]), np.stack(b["gt"]), class_count
            ).as_dict()
            for sid, b in sorted(per_source.items())
        },
        "n_test": len(preds),
    }
    out = Path(args.out) if args.out else out_dir / f"eval-{args.mode}.json"
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    print(
        f"step {bundle.step} [{args.mode}] mIoU {scores.mean_iou:.2f} "
        f"Dice {scores.mean_dice:.2f} Recall {scores.mean_recall:.2f} "
        f"Acc {scores.accuracy:.2f} -> {out}"
    )
    return EXIT_OK


def cmd_analyze(args) -> int:
    config = _load_config(args)
    cohort = load_dataset(args.dataset)
    volumes = cohort.labeled + cohort.unlabeled + cohort.test
    out_dir = Path(args.out) if args.out else (
        Path(args.run) / "analysis" if args.run else Path(args.dataset) / "analysis"
    )
    out_dir.mkdir(parents=True, exist_ok=True)

    ac = config.analyze
    report: dict = {"dataset": dataset_report(volumes, ac.kde_bandwidth, ac.kde_points)}
    embeddings = None

    if args.run:
        trained = load_checkpoint(latest_checkpoint(args.run))
        run_config = trained.config
        # untrained reference: same init path as the run's step-0 state
        untrained = Trainer(run_config, cohort.labeled or cohort.test, [], []).bundle
        test = sorted(cohort.test, key=lambda v: v.sample_id)
        if len({v.source_id for v in test}) < 2:
            raise DataError("feature separability needs >= 2 sources in the test split")
        labels = [v.source_id for v in test]
        embeddings = {}
        report["separability"] = {}
        for name, bundle in (("untrained", untrained), ("trained", trained)):
            feats = np.stack([bundle.features(v) for v in test])
            emb = embed_features(feats, method=ac.embedding, seed=ac.seed)
            sil = source_separability(feats, labels)
            report["separability"][name] = sil
            embeddings[name] = {
                "points": emb.tolist(),
                "source_labels": labels,
                "silhouette": sil,
            }
        report["embedding"] = embeddings

    (out_dir / "analysis.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    figures = write_figures(report["dataset"], embeddings, out_dir)
    if "separability" in report:
        s = report["separability"]
        print(
            f"separability silhouette: untrained {s['untrained']:.4f} "
            f"-> trained {s['trained']:.4f}"
        )
    print(f"analysis written to {out_dir} ({', '.join(['analysis.json'] + figures)})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msseg3d",
        description="Multi-source semi-supervised 3D segmentation on synthetic phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write the default config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("generate", help="materialize the synthetic multi-source dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("partition", help="split unlabeled volumes into mixed/other")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mixed-fraction", type=float, default=None)
    p.add_argument("--per-source", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=["exp1", "exp2", "exp3", "exp4", "exp5"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--run")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["main", "ensemble"], default="main")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="source-gap diagnostics (KDE, profiles, features)")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--run")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAbort as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except (
        DataError,
        VolumeFormatError,
        CheckpointError,
        PlacementError,
        FileNotFoundError,
        ValueError,
    ) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
