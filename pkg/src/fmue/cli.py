"""Command-line entry point tying the pipeline together.

Subcommands: synth, split, train, calibrate, evaluate, ood, explain, plot.
Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
4 computation error. Reports are timestamp-free; timestamps go to run.log.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import calibration as calib
from . import data as datamod
from . import metrics as metricsmod
from .config import DEFAULTS, ConfigError, RunConfig, parse_config_file
from .gradcam import grad_cam, save_heatmap
from .modeling import (
    CheckpointError,
    build_model,
    freeze_base,
    inject_lora,
    load_bundle,
    load_pretrained_encoder,
)
from .training import ImageArrayDataset, TrainConfig, predict_dataset, train


class MissingArtifactError(RuntimeError):
    pass


class ComputationError(RuntimeError):
    pass


def _log_run(out_dir: Path, argv) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(out_dir / "run.log", "a") as fh:
        fh.write(f"{stamp} fmue {' '.join(argv)}\n")


def _require(path, what: str) -> Path:
    if path is None:
        raise MissingArtifactError(f"missing required {what}")
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{what} not found: {path}")
    return path


def _write_json(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {out}: {exc}") from exc
    return out


def _run_config(args) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else None
    overrides = {key: vars(args).get(key) for key in DEFAULTS}
    return RunConfig(file_values, overrides)


def _load_manifest(path, classes=None) -> datamod.DatasetManifest:
    path = _require(path, "manifest")
    if classes is not None:
        _require(classes, "class vocabulary")
    try:
        return datamod.load_manifest(path, classes)
    except datamod.ManifestError as exc:
        raise ConfigError(str(exc)) from exc


def _load_split(path) -> datamod.SplitAssignment:
    path = _require(path, "split assignment")
    with open(path) as fh:
        return datamod.SplitAssignment.from_json(json.load(fh))


def _dataset(manifest, manifest_path, cfg: RunConfig, split=None, subset=None):
    return ImageArrayDataset.from_manifest(
        manifest,
        root=Path(manifest_path).parent,
        image_size=cfg["encoder.image_size"],
        split=split,
        subset=subset,
        mean=cfg["preprocess.mean"],
        std=cfg["preprocess.std"],
    )


def _predictions(model, dataset):
    results = predict_dataset(model, dataset)
    preds = np.array([pred for _, pred in results], dtype=np.int64)
    uncertainties = np.array([op.uncertainty for op, _ in results], dtype=np.float64)
    beliefs = np.stack([op.belief for op, _ in results])
    return preds, uncertainties, beliefs


def _write_predictions_csv(path, dataset, preds, uncertainties):
    labels = dataset.labels.numpy()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", "label_index", "label", "pred_index", "pred", "uncertainty", "correct"])
        for i in range(len(preds)):
            label_idx = int(labels[i])
            label = dataset.class_names[label_idx] if label_idx >= 0 else "ood"
            writer.writerow(
                [
                    dataset.paths[i],
                    label_idx,
                    label,
                    int(preds[i]),
                    dataset.class_names[int(preds[i])],
                    f"{uncertainties[i]:.12g}",
                    int(preds[i] == label_idx),
                ]
            )


def _write_confusion_csv(report: metricsmod.EvaluationReport, class_names, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + list(class_names))
        for i, row in enumerate(report.confusion.tolist()):
            writer.writerow([class_names[i]] + row)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    if args.spec_file:
        spec_path = _require(args.spec_file, "synthetic spec file")
        try:
            spec = datamod.SyntheticSpec.from_dict(json.loads(spec_path.read_text()))
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"invalid synthetic spec: {exc}") from exc
    else:
        try:
            spec = datamod.default_synthetic_spec(
                samples_per_class=args.samples_per_class,
                patients_per_class=args.patients_per_class,
                ood_samples_per_def=args.ood_samples,
                noise_sigma=args.noise_sigma,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    manifest, ood_manifest, _ = datamod.generate_synthetic(spec, out, seed=args.seed)
    print(
        f"wrote {len(manifest.records)} in-distribution and "
        f"{len(ood_manifest.records)} OOD images to {out}"
    )
    return 0


def cmd_split(args) -> int:
    out = _out_dir(args)
    cfg = _run_config(args)
    manifest = _load_manifest(args.manifest, args.classes)
    ratios = cfg.ratios()
    split = datamod.patient_split(manifest, ratios=ratios, seed=args.seed)
    counts = {name: 0 for name in datamod.SplitAssignment.SPLITS}
    for rec in manifest.records:
        if not rec.is_ood and rec.patient_id in split.assignment:
            counts[split.assignment[rec.patient_id]] += 1
    payload = split.to_json()
    payload["image_counts"] = counts
    _write_json(payload, out / "split.json")
    print(f"split images: {counts}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _run_config(args)
    manifest_path = _require(args.manifest, "manifest")
    manifest = _load_manifest(manifest_path, args.classes)
    split = _load_split(args.split)
    train_set = _dataset(manifest, manifest_path, cfg, split, "train")
    val_set = _dataset(manifest, manifest_path, cfg, split, "val")

    model = build_model(cfg.encoder_config(), manifest.class_count, seed=args.seed)
    if args.pretrained:
        model, report = load_pretrained_encoder(model, _require(args.pretrained, "pretrained checkpoint"))
        print(report.summary())
    lora_cfg = cfg.lora_config()
    if lora_cfg is not None:
        inject_lora(model, lora_cfg)
    freeze_base(model)

    train_cfg = cfg.train_config(seed=args.seed)
    report = train(model, train_set, val_set, train_cfg, out)
    best = report.epochs[report.best_epoch]
    print(
        f"best epoch {report.best_epoch}: {train_cfg.selection_metric}="
        f"{best[train_cfg.selection_metric]:.4f} -> {report.best_checkpoint_path}"
    )
    return 0


def cmd_calibrate(args) -> int:
    out = _out_dir(args)
    cfg = _run_config(args)
    manifest_path = _require(args.manifest, "manifest")
    manifest = _load_manifest(manifest_path, args.classes)
    split = _load_split(args.split)
    model = load_bundle(_require(args.checkpoint, "model checkpoint"))
    dataset = _dataset(manifest, manifest_path, cfg, split, args.subset)

    preds, uncertainties, _ = _predictions(model, dataset)
    labels = dataset.labels.numpy()
    normal = cfg["eval.normal_label"]
    abnormal = np.array([dataset.class_names[i] != normal for i in labels])
    try:
        report = calib.calibrate_threshold(
            calib.CalibrationInput(
                uncertainties=uncertainties,
                correct=preds == labels,
                abnormal=abnormal,
            ),
            compare_to=cfg["calibration.compare_to"],
        )
    except ValueError as exc:
        raise ComputationError(str(exc)) from exc
    report.save(out / "calibration.json")
    _write_predictions_csv(out / "calibration_predictions.csv", dataset, preds, uncertainties)
    print(
        f"theta={report.theta:.6g} excluded={report.excluded_count}/{len(dataset)} "
        f"stop={report.stop_reason}"
    )
    return 0


def _null_report(n_total: int, theta: float) -> dict:
    return {
        "n": 0,
        "empty": True,
        "theta": theta,
        "excluded_fraction": 1.0 if n_total else 0.0,
        "note": "no samples below threshold; metrics undefined",
    }


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    cfg = _run_config(args)
    manifest_path = _require(args.manifest, "manifest")
    manifest = _load_manifest(manifest_path, args.classes)
    split = _load_split(args.split)
    model = load_bundle(_require(args.checkpoint, "model checkpoint"))
    dataset = _dataset(manifest, manifest_path, cfg, split, args.subset)

    theta = None
    if not args.no_threshold:
        if args.calibration is None:
            raise MissingArtifactError(
                "calibration report required (pass --calibration or --no-threshold)"
            )
        theta = calib.CalibrationReport.load(_require(args.calibration, "calibration report")).theta

    preds, uncertainties, beliefs = _predictions(model, dataset)
    labels = dataset.labels.numpy()
    try:
        raw = metricsmod.compute_metrics(preds, labels, beliefs, dataset.class_names)
        curve = metricsmod.coverage_curve(uncertainties, preds == labels)
    except ValueError as exc:
        raise ComputationError(str(exc)) from exc
    raw.save(out / "evaluation_raw.json")
    _write_confusion_csv(raw, dataset.class_names, out / "confusion_raw.csv")
    curve.save(out / "coverage_curve.json")
    _write_predictions_csv(out / "predictions.csv", dataset, preds, uncertainties)
    print(f"raw: n={raw.n} accuracy={raw.accuracy:.4f} macro_f1={raw.macro_f1:.4f}")

    if theta is not None:
        keep = uncertainties < theta
        if keep.sum() == 0:
            payload = _null_report(len(preds), theta)
        else:
            try:
                thresholded = metricsmod.compute_metrics(
                    preds[keep], labels[keep], beliefs[keep], dataset.class_names
                )
            except ValueError as exc:
                raise ComputationError(str(exc)) from exc
            payload = thresholded.to_json()
            payload["theta"] = theta
            payload["excluded_fraction"] = float((~keep).sum() / len(keep))
            _write_confusion_csv(thresholded, dataset.class_names, out / "confusion_thresholded.csv")
            print(
                f"thresholded: n={thresholded.n} accuracy={thresholded.accuracy:.4f} "
                f"excluded_fraction={payload['excluded_fraction']:.4f}"
            )
        _write_json(payload, out / "evaluation_thresholded.json")
    return 0


def cmd_ood(args) -> int:
    out = _out_dir(args)
    cfg = _run_config(args)
    manifest_path = _require(args.ood_manifest, "OOD manifest")
    manifest = _load_manifest(manifest_path, args.classes)
    model = load_bundle(_require(args.checkpoint, "model checkpoint"))
    dataset = _dataset(manifest, manifest_path, cfg)

    if args.theta is not None:
        theta = args.theta
    else:
        theta = calib.CalibrationReport.load(_require(args.calibration, "calibration report")).theta

    preds, uncertainties, _ = _predictions(model, dataset)
    try:
        report = metricsmod.ood_detection_rate(uncertainties, theta)
    except ValueError as exc:
        raise ComputationError(str(exc)) from exc
    report.save(out / "ood_report.json")
    with open(out / "ood_histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "density"])
        for left, density in zip(report.bin_edges[:-1], report.densities):
            writer.writerow([f"{left:.6g}", f"{density:.12g}"])
    _write_predictions_csv(out / "ood_predictions.csv", dataset, preds, uncertainties)
    print(f"OOD detection rate at theta={theta:.6g}: {report.detection_rate:.4f} (n={report.n})")
    return 0


def cmd_explain(args) -> int:
    out = _out_dir(args)
    cfg = _run_config(args)
    model = load_bundle(_require(args.checkpoint, "model checkpoint"))
    if args.image:
        image_path = _require(args.image, "image")
    else:
        manifest_path = _require(args.manifest, "manifest")
        manifest = _load_manifest(manifest_path, args.classes)
        if not 0 <= args.index < len(manifest.records):
            raise ConfigError(f"--index {args.index} out of range")
        image_path = Path(manifest_path).parent / manifest.records[args.index].image_path

    arr = datamod.preprocess(
        image_path,
        image_size=cfg["encoder.image_size"],
        mean=cfg["preprocess.mean"],
        std=cfg["preprocess.std"],
    )
    import torch

    with torch.inference_mode():
        logits = model(torch.from_numpy(arr)[None])
    target = args.target_class if args.target_class is not None else int(logits.argmax())
    try:
        heatmap = grad_cam(model, arr, target_class=target, source_block=args.block)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    stem = Path(image_path).stem
    save_heatmap(heatmap, out / f"heatmap_{stem}.png", out / f"heatmap_{stem}.json")
    print(f"heatmap for class {target} (block {heatmap.source_block}) -> heatmap_{stem}.png")
    return 0


def _parse_named_paths(pairs, what):
    out = []
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"{what} must be NAME=PATH, got {pair!r}")
        name, _, path = pair.partition("=")
        out.append((name, _require(path, f"{what} {name}")))
    return out


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _out_dir(args)
    made = []

    densities = _parse_named_paths(args.density, "density input")
    if densities:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for name, path in densities:
            u = []
            with open(path, newline="") as fh:
                for row in csv.DictReader(fh):
                    u.append(float(row["uncertainty"]))
            hist, edges = np.histogram(u, bins=40, range=(0.0, 1.0), density=True)
            centers = (edges[:-1] + edges[1:]) / 2
            style = "--" if name.lower().startswith("ood") else "-"
            ax.plot(centers, hist, style, label=f"{name} (n={len(u)})")
        if args.theta is not None:
            ax.axvline(args.theta, color="gray", lw=1, label=f"theta={args.theta:.3g}")
        ax.set_xlabel("uncertainty score")
        ax.set_ylabel("density")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "uncertainty_density.png", dpi=120)
        plt.close(fig)
        made.append("uncertainty_density.png")

    curves = _parse_named_paths(args.coverage, "coverage input")
    if curves:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for name, path in curves:
            with open(path) as fh:
                payload = json.load(fh)
            points = payload["points"]
            ax.plot(
                [100 * p[0] for p in points],
                [100 * p[1] for p in points],
                label=f"{name} (AUC={100 * payload['auc']:.2f}%)",
            )
        ax.set_xlabel("% of samples retained")
        ax.set_ylabel("accuracy (%)")
        ax.invert_xaxis()
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "coverage_curves.png", dpi=120)
        plt.close(fig)
        made.append("coverage_curves.png")

    overlays = _parse_named_paths(args.overlay, "overlay input")
    for i, (image_path, heatmap_path) in enumerate(overlays):
        from PIL import Image

        base = np.asarray(Image.open(_require(image_path, "overlay image")).convert("L")) / 255.0
        heat = np.asarray(Image.open(heatmap_path).convert("L")) / 255.0
        if heat.shape != base.shape:
            heat = datamod.resize_bilinear(heat, base.shape[0])
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(base, cmap="gray", vmin=0, vmax=1)
        ax.imshow(heat, cmap="jet", alpha=0.45, vmin=0, vmax=1)
        ax.axis("off")
        fig.tight_layout()
        fig.savefig(out / f"overlay_{i}.png", dpi=120)
        plt.close(fig)
        made.append(f"overlay_{i}.png")

    if not made:
        raise ConfigError("nothing to plot; pass --density, --coverage, or --overlay")
    print(f"wrote {', '.join(made)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="output directory")
    group = parser.add_argument_group("config overrides")
    for key in DEFAULTS:
        group.add_argument(f"--{key}", dest=key, metavar="V", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmue", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--spec-file", help="JSON synthetic spec (default: built-in 4-class spec)")
    p.add_argument("--samples-per-class", type=int, default=60)
    p.add_argument("--patients-per-class", type=int, default=6)
    p.add_argument("--ood-samples", type=int, default=40)
    p.add_argument("--noise-sigma", type=float, default=0.03)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="patient-based train/val/test split")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", help="vocabulary sidecar (default: classes.txt next to manifest)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fine-tune the adapter-equipped model")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes")
    p.add_argument("--split", required=True)
    p.add_argument("--pretrained", help="encoder checkpoint to start from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="search the referral threshold on a split")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes")
    p.add_argument("--split", required=True)
    p.add_argument("--subset", default="val", choices=["train", "val", "test"])
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="metrics with and without thresholding")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes")
    p.add_argument("--split", required=True)
    p.add_argument("--subset", default="test", choices=["train", "val", "test"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calibration", help="calibration.json from the calibrate step")
    p.add_argument("--no-threshold", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ood", help="detection rate on an OOD manifest")
    _add_common(p)
    p.add_argument("--ood-manifest", required=True)
    p.add_argument("--classes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calibration")
    p.add_argument("--theta", type=float, help="override threshold")
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("explain", help="gradient class-activation heatmap")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--classes")
    p.add_argument("--image", help="explain this image instead of a manifest entry")
    p.add_argument("--index", type=int, default=0, help="manifest record index")
    p.add_argument("--target-class", type=int)
    p.add_argument("--block", type=int, help="encoder block (default: last)")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("plot", help="density, coverage, and overlay figures")
    _add_common(p)
    p.add_argument("--density", action="append", metavar="NAME=PRED_CSV")
    p.add_argument("--coverage", action="append", metavar="NAME=CURVE_JSON")
    p.add_argument("--overlay", action="append", metavar="IMAGE=HEATMAP")
    p.add_argument("--theta", type=float)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _log_run(Path(args.out), argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MissingArtifactError, CheckpointError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except ComputationError as exc:
        print(f"computation error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
