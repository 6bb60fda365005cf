"""Command-line entry point driving the full pipeline."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset, evaluation, models, pipeline, synthdata, training
from .backbones import BACKBONES, BackboneError, WeightsUnavailableError
from .dataset import DatasetError
from .models import CheckpointError
from .training import SweepError, TrainingDiverged


class CliError(Exception):
    pass


def _run_index(out_dir: Path, subcommand: str, args: dict, outputs: list[str]) -> None:
    """Append this run to the out-directory index for reproducibility audits."""
    index_path = out_dir / "manifest.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    if "runs" not in index:
        index = {"runs": []}
    index["runs"].append(
        {"subcommand": subcommand, "args": args, "outputs": outputs, "timestamp": time.time()}
    )
    index_path.write_text(json.dumps(index, indent=2))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_manifest(args) -> dataset.DatasetManifest:
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise CliError(f"manifest not found: {manifest_path}")
    data_root = getattr(args, "data", None) or os.environ.get("NAILGUARD_DATA")
    if data_root is None:
        raise CliError("dataset root required: pass --data or set NAILGUARD_DATA")
    if not Path(data_root).is_dir():
        raise CliError(f"dataset root is not a directory: {data_root}")
    return dataset.DatasetManifest.load(manifest_path, source_root=str(data_root))


def _load_split(args) -> dataset.SplitAssignment:
    split_path = Path(args.split)
    if not split_path.exists():
        raise CliError(f"split not found: {split_path}")
    return dataset.SplitAssignment.load(split_path)


def _training_config(args, adversarial: training.AdversarialConfig | None = None) -> training.TrainingConfig:
    augment = pipeline.AugmentationConfig() if args.augment else None
    return training.TrainingConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=args.seed,
        augment=augment,
        adversarial=adversarial,
    )


def _build_factory(args):
    def factory() -> models.Classifier:
        return models.build(args.arch, seed=args.seed)

    return factory


def cmd_synth_data(args) -> int:
    out = _out_dir(args)
    counts = synthdata.generate(synthdata.SynthSpec(per_category=args.per_category, seed=args.seed), out)
    total = sum(counts.values())
    print(f"wrote {total} images across {len(counts)} categories under {out}")
    return 0


def cmd_ingest(args) -> int:
    data_root = args.data or os.environ.get("NAILGUARD_DATA")
    if data_root is None:
        raise CliError("dataset root required: pass --data or set NAILGUARD_DATA")
    out = _out_dir(args)
    manifest = dataset.ingest(data_root)
    manifest.save(out / "dataset_manifest.json")
    skip_path = out / "skip_report.json"
    skip_path.write_text(json.dumps([{"path": p, "reason": r} for p, r in manifest.skipped], indent=2))
    _run_index(out, "ingest", {"data": str(data_root)}, ["dataset_manifest.json", "skip_report.json"])
    print(
        f"manifest: {manifest.total} images, {len(manifest.skipped)} skipped "
        f"-> {out / 'dataset_manifest.json'}"
    )
    return 0


def cmd_split(args) -> int:
    out = _out_dir(args)
    manifest = dataset.DatasetManifest.load(Path(args.manifest), source_root=".")
    assignment = dataset.split(manifest, seed=args.seed)
    assignment.save(out / "split.json")
    sizes = {part: len(assignment.ids(part)) for part in ("train", "val", "test")}
    _run_index(out, "split", {"manifest": args.manifest, "seed": args.seed}, ["split.json"])
    print(f"split: {sizes} -> {out / 'split.json'}")
    return 0


def _finish_training(args, out: Path, checkpoint: models.Checkpoint, history: training.TrainingHistory, tag: str) -> int:
    ckpt_dir = out / "checkpoint"
    checkpoint.save(ckpt_dir)
    history.save_csv(out / "history.csv")
    history.save_json(out / "history.json")
    training.save_curves_png(history, out / "curves.png")
    _run_index(out, tag, {k: v for k, v in vars(args).items() if k != "func"},
               ["checkpoint", "history.csv", "history.json", "curves.png"])
    best = history.records[history.best_epoch]
    print(
        f"trained {args.arch}: best epoch {history.best_epoch} "
        f"(val_loss {best.val_loss:.4f}, val_acc {best.val_acc:.4f}) -> {ckpt_dir}"
    )
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    manifest = _load_manifest(args)
    split = _load_split(args)
    store = pipeline.ImageStore(manifest)
    config = _training_config(args)
    classifier = models.build(args.arch, seed=args.seed)
    checkpoint, history = training.fit(classifier, store, split, config)
    return _finish_training(args, out, checkpoint, history, "train")


def cmd_adv_train(args) -> int:
    out = _out_dir(args)
    manifest = _load_manifest(args)
    split = _load_split(args)
    store = pipeline.ImageStore(manifest)
    config = _training_config(
        args, adversarial=training.AdversarialConfig(epsilon=args.epsilon, mix_ratio=args.mix_ratio)
    )
    classifier = models.build(args.arch, seed=args.seed)
    checkpoint, history = training.adversarial_fit(classifier, store, split, config)
    return _finish_training(args, out, checkpoint, history, "adv-train")


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    manifest = _load_manifest(args)
    split = _load_split(args)
    store = pipeline.ImageStore(manifest)
    base = _training_config(args)
    lrs = [float(v) for v in args.lrs.split(",")]
    batch_sizes = [int(v) for v in args.batch_sizes.split(",")]
    best_config, leaderboard = training.hyperparameter_sweep(
        _build_factory(args), store, split, base, learning_rates=lrs, batch_sizes=batch_sizes
    )
    doc = [
        {
            "learning_rate": r.learning_rate,
            "batch_size": r.batch_size,
            "val_loss": r.val_loss,
            "val_accuracy": r.val_accuracy,
            "optimal_epochs": r.optimal_epochs,
            "error": r.error,
        }
        for r in leaderboard
    ]
    (out / "leaderboard.json").write_text(json.dumps(doc, indent=2))
    import csv as _csv

    with open(out / "leaderboard.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["learning_rate", "batch_size", "val_loss", "val_accuracy", "optimal_epochs"])
        for r in leaderboard:
            writer.writerow([r.learning_rate, r.batch_size, r.val_loss, r.val_accuracy, r.optimal_epochs])
    _run_index(out, "sweep", {"lrs": args.lrs, "batch_sizes": args.batch_sizes},
               ["leaderboard.csv", "leaderboard.json"])
    print(f"winner: lr={best_config.learning_rate} batch_size={best_config.batch_size}")
    return 0


def cmd_adv_sweep(args) -> int:
    out = _out_dir(args)
    manifest = _load_manifest(args)
    split = _load_split(args)
    store = pipeline.ImageStore(manifest)
    base = _training_config(args)
    epsilons = [float(v) for v in args.epsilons.split(",")]
    table = training.epsilon_sweep(_build_factory(args), store, split, base, epsilons=epsilons)
    table.save_csv(out / "epsilon_sweep.csv")
    table.save_json(out / "epsilon_sweep.json")
    _run_index(out, "adv-sweep", {"epsilons": args.epsilons}, ["epsilon_sweep.csv", "epsilon_sweep.json"])
    best = table.best_row()
    print(f"best epsilon {best.epsilon}: val_acc {best.val_accuracy:.4f} val_loss {best.val_loss:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    manifest = _load_manifest(args)
    split = _load_split(args)
    store = pipeline.ImageStore(manifest)
    classifier = models.load(args.checkpoint)
    report = evaluation.evaluate(classifier, store, split, partition=args.partition)
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    evaluation.save_confusion_png(report.matrix, classifier.taxonomy, out / "confusion.png")
    _run_index(out, "evaluate", {"checkpoint": args.checkpoint, "partition": args.partition},
               ["report.json", "report.csv", "confusion.png"])
    print(f"accuracy {report.accuracy:.4f}, macro F1 {report.macro_f1:.4f} -> {out / 'report.json'}")
    return 0


def cmd_compare(args) -> int:
    out = _out_dir(args)
    results = []
    for spec in args.report:
        if "=" not in spec:
            raise CliError(f"--report expects NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        doc = json.loads(Path(path).read_text())
        matrix = evaluation.ConfusionMatrix(counts=np.array(doc["confusion_matrix"]))
        report = evaluation.classification_report(matrix)
        results.append(evaluation.ModelResult(name=name, report=report))
    table = evaluation.compare_models(results, include_reference=args.include_reference)
    table.save_csv(out / "comparison.csv")
    table.save_json(out / "comparison.json")
    _run_index(out, "compare", {"reports": args.report}, ["comparison.csv", "comparison.json"])
    for row in table.rows:
        marker = "" if row.reproduced else " (published, not reproduced)"
        print(f"{row.name}: test accuracy {row.test_accuracy:.4f}{marker}")
    return 0


def cmd_explain(args) -> int:
    from . import explain as explain_mod

    out = _out_dir(args)
    classifier = models.load(args.checkpoint)
    image_path = Path(args.image)
    if not image_path.exists():
        raise CliError(f"image not found: {image_path}")
    img = pipeline.load_and_resize(image_path.read_bytes(), source_id=image_path.name)
    if args.target is not None:
        target = classifier.taxonomy.index(args.target)
    else:
        _, probs = classifier.forward(img.pixels[None])
        target = int(probs[0].argmax())

    if args.method == "gradcam":
        attribution = explain_mod.grad_cam(classifier, img, target)
        explain_mod.export_attribution(attribution, out / "attribution.json")
    else:
        seg = explain_mod.segment_grid((args.grid, args.grid))
        mode = "exact" if seg.n_segments <= explain_mod.MAX_EXACT_SEGMENTS else "sampled"
        result = explain_mod.shapley_attribution(
            classifier, img, seg, target, mode=mode, n_samples=args.samples, sample_seed=args.seed
        )
        attribution = explain_mod.to_pixel_map(result, seg, target)
        explain_mod.export_attribution(attribution, out / "attribution.json", shapley=result, seg=seg)
    png = explain_mod.overlay(img, attribution, alpha=args.alpha)
    (out / "overlay.png").write_bytes(png)
    _run_index(out, "explain", {"method": args.method, "target": classifier.taxonomy.name(target)},
               ["attribution.json", "overlay.png"])
    print(f"{args.method} for {classifier.taxonomy.name(target)} -> {out / 'overlay.png'}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import CaseStore, InferenceService, create_app

    store = CaseStore(args.store)
    service = InferenceService(store, args.models)
    if args.activate:
        service.activate(args.activate)
    app = create_app(service)
    print(f"serving on http://{args.host}:{args.port} (store={args.store}, models={args.models})")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nailguard", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic 6-category dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-category", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("ingest", help="scan a dataset tree into a manifest")
    p.add_argument("--data", default=None, help="dataset root (default: NAILGUARD_DATA)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="stratified 70/20/10 split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    def add_training_flags(p, batch_default=32):
        p.add_argument("--arch", default="tiny_test", choices=sorted(BACKBONES))
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", required=True)
        p.add_argument("--data", default=None, help="dataset root (default: NAILGUARD_DATA)")
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--batch-size", type=int, default=batch_default)
        p.add_argument("--max-epochs", type=int, default=200)
        p.add_argument("--patience", type=int, default=10)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
        p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fit a classifier with early stopping")
    add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adv-train", help="adversarial training at a fixed epsilon")
    add_training_flags(p)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--mix-ratio", type=float, default=0.5)
    p.set_defaults(func=cmd_adv_train)

    p = sub.add_parser("sweep", help="learning-rate x batch-size grid search")
    add_training_flags(p)
    p.add_argument("--lrs", default="0.1,0.01,0.001,0.0001")
    p.add_argument("--batch-sizes", default="16,32,64")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("adv-sweep", help="adversarial-training epsilon sweep")
    add_training_flags(p)
    p.add_argument("--epsilons", default="0,0.1,0.12,0.14,0.16,0.18,0.2")
    p.set_defaults(func=cmd_adv_sweep)

    p = sub.add_parser("evaluate", help="confusion matrix + classification report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--partition", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="model comparison table")
    p.add_argument("--report", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--include-reference", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("explain", help="Grad-CAM or Shapley attribution for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", default="gradcam", choices=("gradcam", "shapley"))
    p.add_argument("--target", default=None, help="category name (default: predicted)")
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("serve", help="run the inference + triage HTTP service")
    p.add_argument("--store", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--activate", default=None, help="model id to activate at startup")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        CliError,
        DatasetError,
        BackboneError,
        WeightsUnavailableError,
        CheckpointError,
        TrainingDiverged,
        SweepError,
        ValueError,
        FileNotFoundError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
