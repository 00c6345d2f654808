"""Deterministic fine-tuning loop for the adapter-equipped model with the
evidential loss, plus dataset plumbing and batched prediction."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .data import DatasetManifest, SplitAssignment, preprocess, split_records
from .evidential import (
    DirichletOpinion,
    LossConfig,
    edl_loss,
    evidence_from_logits,
    opinion_from_evidence,
)
from .metrics import compute_metrics
from .modeling import ModelBundle, save_bundle


class TrainingDiverged(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    anneal_horizon: int = 10
    seed: int = 0
    selection_metric: str = "macro_f1"
    flip_augment: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.selection_metric not in ("macro_f1", "accuracy"):
            raise ValueError("selection_metric must be 'macro_f1' or 'accuracy'")


class ImageArrayDataset(Dataset):
    """Preloaded tensors; small images make eager loading the simple choice."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, class_names, paths=None):
        if len(images) != len(labels):
            raise ValueError("images and labels must have equal length")
        self.images = images
        self.labels = labels
        self.class_names = list(class_names)
        self.paths = list(paths) if paths is not None else [""] * len(images)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx], self.labels[idx]

    @staticmethod
    def from_manifest(
        manifest: DatasetManifest,
        root,
        image_size: int,
        split: SplitAssignment = None,
        subset: str = None,
        mean: float = 0.5,
        std: float = 0.5,
    ) -> "ImageArrayDataset":
        """Load (a subset of) a manifest into memory. OOD records keep label -1."""
        root = Path(root)
        if split is not None and subset is not None:
            records = split_records(manifest, split, subset)
        else:
            records = list(manifest.records)
        if not records:
            raise ValueError("no records selected")
        images, labels, paths = [], [], []
        for rec in records:
            arr = preprocess(root / rec.image_path, image_size=image_size, mean=mean, std=std)
            images.append(torch.from_numpy(arr))
            labels.append(-1 if rec.is_ood else manifest.class_index(rec.label))
            paths.append(rec.image_path)
        return ImageArrayDataset(
            images=torch.stack(images),
            labels=torch.tensor(labels, dtype=torch.long),
            class_names=manifest.class_vocabulary,
            paths=paths,
        )


@dataclasses.dataclass
class TrainReport:
    epochs: list  # per-epoch dicts: loss means + validation metrics
    best_epoch: int
    best_checkpoint_path: str
    selection_metric: str

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _warm_start_head_center(model: ModelBundle, train_set, limit: int = 512) -> None:
    """Start the head's feature center at the training pooled-feature mean.

    The off-manifold penalty otherwise saturates every logit at init and the
    loss gradient vanishes; centering puts in-distribution inputs in the
    active regime from the first step.
    """
    if not hasattr(model.head, "center"):
        return
    model.eval()
    sums = None
    count = 0
    with torch.inference_mode():
        for start in range(0, min(len(train_set), limit), 128):
            images = train_set.images[start : start + 128]
            tokens = model.encoder(images)
            pooled = tokens[:, 1:, :].mean(dim=1)
            sums = pooled.sum(dim=0) if sums is None else sums + pooled.sum(dim=0)
            count += len(images)
    with torch.no_grad():
        model.head.center.copy_(sums / count)


def _epoch_validation(model: ModelBundle, dataset, batch_size: int) -> dict:
    preds, labels, beliefs = [], [], []
    for opinion, pred in predict_dataset(model, dataset, batch_size=batch_size):
        preds.append(pred)
        beliefs.append(opinion.belief)
    labels = dataset.labels.numpy()
    report = compute_metrics(preds, labels, np.stack(beliefs), dataset.class_names)
    return {"macro_f1": report.macro_f1, "accuracy": report.accuracy}


def train(
    model: ModelBundle,
    train_set: ImageArrayDataset,
    val_set: ImageArrayDataset,
    cfg: TrainConfig,
    out_dir,
) -> TrainReport:
    """Fine-tune the trainable parameters; keep the best validation checkpoint.

    With a fixed seed and the single-worker loader used here, two runs yield
    identical loss traces and reports.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("datasets must be nonempty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "best_model.npz"

    torch.manual_seed(cfg.seed)
    _warm_start_head_center(model, train_set)
    generator = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(
        train_set,
        batch_size=cfg.batch_size,
        shuffle=True,
        num_workers=0,
        generator=generator,
        drop_last=False,
    )
    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if not trainable:
        raise ValueError("model has no trainable parameters")
    # decay only the head: pushing the fit into the adapters grows class
    # separation in feature space instead of just scaling the output map
    decay = [p for n, p in trainable if n.startswith("head.")]
    no_decay = [p for n, p in trainable if not n.startswith("head.")]
    optimizer = torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.learning_rate,
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs)
    loss_cfg = LossConfig(anneal_horizon=cfg.anneal_horizon)
    k = model.class_count

    history = []
    best_value = -1.0
    best_epoch = -1
    last_finite = None
    for epoch in range(cfg.epochs):
        model.train()
        sums = {"expected_ce": 0.0, "kl_term": 0.0, "total": 0.0}
        count = 0
        for step, (images, labels) in enumerate(loader):
            if cfg.flip_augment:
                flip = torch.rand(len(images), generator=generator) < 0.5
                images = images.clone()
                images[flip] = torch.flip(images[flip], dims=[-1])
            one_hot = torch.nn.functional.one_hot(labels, num_classes=k).to(images.dtype)
            evidence = evidence_from_logits(model(images))
            breakdown = edl_loss(evidence, one_hot, epoch, loss_cfg)
            if not torch.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"last finite step: {last_finite}"
                )
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            n = len(images)
            parts = breakdown.to_floats()
            for key in sums:
                sums[key] += parts[key] * n
            count += n
            last_finite = {"epoch": epoch, "step": step, **parts}
        scheduler.step()

        entry = {key: sums[key] / count for key in sums}
        entry["epoch"] = epoch
        entry["kl_weight"] = loss_cfg.kl_weight(epoch)
        entry.update(_epoch_validation(model, val_set, cfg.batch_size))
        history.append(entry)

        # ties prefer the later epoch: equal-metric checkpoints keep maturing
        # in confidence as the evidence magnitudes grow
        value = entry[cfg.selection_metric]
        if value >= best_value:
            best_value = value
            best_epoch = epoch
            save_bundle(model, checkpoint_path)

    report = TrainReport(
        epochs=history,
        best_epoch=best_epoch,
        best_checkpoint_path=str(checkpoint_path),
        selection_metric=cfg.selection_metric,
    )
    report.save(out_dir / "train_report.json")
    return report


def predict_dataset(model: ModelBundle, dataset, batch_size: int = 64):
    """Opinions and argmax-belief predictions, in dataset order."""
    model.eval()
    results = []
    with torch.inference_mode():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            evidence = evidence_from_logits(model(images))
            for row in evidence:
                opinion = opinion_from_evidence(row)
                results.append((opinion, opinion.predicted_class))
    return results
