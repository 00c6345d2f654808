"""Dataset manifests, patient-based splitting, preprocessing, and the
synthetic layered-stripe image generator used for desk-scale runs.

Manifests are plain CSV with a one-class-per-line vocabulary sidecar.
Labels beginning with ``ood:`` are out-of-distribution tags and bypass the
vocabulary check.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import random
import warnings
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

OOD_PREFIX = "ood:"
MANIFEST_COLUMNS = ["image_path", "label", "patient_id", "dataset_tag", "device_tag"]
DISTORTIONS = ("none", "dome", "detachment", "thinning")
OOD_PATTERNS = ("vertical", "checker", "blobs", "speckle")


class ManifestError(ValueError):
    pass


class IngestionError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label: str
    patient_id: str
    dataset_tag: str = ""
    device_tag: str = ""

    @property
    def is_ood(self) -> bool:
        return self.label.startswith(OOD_PREFIX)


@dataclasses.dataclass
class DatasetManifest:
    records: list
    class_vocabulary: list

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(set(self.class_vocabulary)) != len(self.class_vocabulary):
            raise ManifestError("class vocabulary contains duplicates")
        seen = set()
        vocab = set(self.class_vocabulary)
        for i, rec in enumerate(self.records):
            if rec.image_path in seen:
                raise ManifestError(f"record {i}: duplicate image_path {rec.image_path!r}")
            seen.add(rec.image_path)
            if not rec.is_ood and rec.label not in vocab:
                raise ManifestError(f"record {i}: unknown label {rec.label!r}")

    def class_index(self, label: str) -> int:
        return self.class_vocabulary.index(label)

    @property
    def class_count(self) -> int:
        return len(self.class_vocabulary)


def load_manifest(path, classes_path=None) -> DatasetManifest:
    """Read a manifest CSV and its vocabulary sidecar.

    The sidecar defaults to ``classes.txt`` next to the manifest. Violations
    are reported with the offending file line number (header is line 1).
    """
    path = Path(path)
    if classes_path is None:
        classes_path = path.parent / "classes.txt"
    classes_path = Path(classes_path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    if not classes_path.exists():
        raise ManifestError(f"class vocabulary not found: {classes_path}")
    vocabulary = [line.strip() for line in classes_path.read_text().splitlines() if line.strip()]
    if len(set(vocabulary)) != len(vocabulary):
        raise ManifestError(f"duplicate class names in {classes_path}")

    records = []
    seen_paths = {}
    vocab = set(vocabulary)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise ManifestError(
                f"line 1: expected header {','.join(MANIFEST_COLUMNS)!r}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"line {lineno}: expected {len(MANIFEST_COLUMNS)} columns")
            rec = SampleRecord(*row)
            if rec.image_path in seen_paths:
                raise ManifestError(
                    f"line {lineno}: duplicate image_path {rec.image_path!r} "
                    f"(first seen on line {seen_paths[rec.image_path]})"
                )
            seen_paths[rec.image_path] = lineno
            if not rec.is_ood and rec.label not in vocab:
                raise ManifestError(f"line {lineno}: label {rec.label!r} not in vocabulary")
            records.append(rec)
    return DatasetManifest(records=records, class_vocabulary=vocabulary)


def save_manifest(manifest: DatasetManifest, path, classes_path=None) -> None:
    path = Path(path)
    if classes_path is None:
        classes_path = path.parent / "classes.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest.records:
            writer.writerow(
                [rec.image_path, rec.label, rec.patient_id, rec.dataset_tag, rec.device_tag]
            )
    Path(classes_path).write_text("".join(c + "\n" for c in manifest.class_vocabulary))


# ---------------------------------------------------------------------------
# patient-based splitting


@dataclasses.dataclass
class SplitAssignment:
    assignment: dict
    ratios: tuple
    seed: int

    SPLITS = ("train", "val", "test")

    def split_of(self, patient_id: str) -> str:
        return self.assignment[patient_id]

    def to_json(self) -> dict:
        return {
            "assignment": self.assignment,
            "ratios": list(self.ratios),
            "seed": self.seed,
        }

    @staticmethod
    def from_json(data: dict) -> "SplitAssignment":
        return SplitAssignment(
            assignment=dict(data["assignment"]),
            ratios=tuple(data["ratios"]),
            seed=int(data["seed"]),
        )


def _patient_class(records) -> str:
    counts = {}
    for rec in records:
        counts[rec.label] = counts.get(rec.label, 0) + 1
    best = max(counts.values())
    return sorted(label for label, n in counts.items() if n == best)[0]


def patient_split(
    manifest: DatasetManifest,
    ratios=(6, 2, 2),
    seed: int = 0,
    force_small_classes: bool = False,
) -> SplitAssignment:
    """Assign whole patients to train/val/test, stratified by class.

    Patients of each class are shuffled deterministically, then assigned
    greedily to the split with the largest remaining image deficit, so image
    counts per split approach the requested ratio. A class with fewer than 3
    patients goes entirely to train (with a warning) unless forced.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    fractions = [r / sum(ratios) for r in ratios]

    by_patient: dict = {}
    for rec in manifest.records:
        if rec.is_ood:
            continue
        by_patient.setdefault(rec.patient_id, []).append(rec)
    by_class: dict = {}
    for patient_id, recs in by_patient.items():
        by_class.setdefault(_patient_class(recs), []).append((patient_id, len(recs)))

    rng = random.Random(seed)
    assignment = {}
    for class_name in sorted(by_class):
        patients = sorted(by_class[class_name])
        rng.shuffle(patients)
        if len(patients) < 3 and not force_small_classes:
            warnings.warn(
                f"class {class_name!r} has only {len(patients)} patient(s); "
                "assigning all of them to train"
            )
            for patient_id, _ in patients:
                assignment[patient_id] = "train"
            continue
        total = sum(n for _, n in patients)
        targets = [f * total for f in fractions]
        counts = [0, 0, 0]
        for patient_id, n in patients:
            deficits = [targets[i] - counts[i] for i in range(3)]
            pick = max(range(3), key=lambda i: (deficits[i], -i))
            assignment[patient_id] = SplitAssignment.SPLITS[pick]
            counts[pick] += n
    return SplitAssignment(assignment=assignment, ratios=tuple(ratios), seed=seed)


def split_records(manifest: DatasetManifest, split: SplitAssignment, subset: str) -> list:
    if subset not in SplitAssignment.SPLITS:
        raise ValueError(f"unknown subset {subset!r}")
    return [
        rec
        for rec in manifest.records
        if not rec.is_ood and split.assignment.get(rec.patient_id) == subset
    ]


# ---------------------------------------------------------------------------
# preprocessing


def _decode_image(image) -> np.ndarray:
    """Return a float array in [0, 1], shape (H, W) or (H, W, 3)."""
    if isinstance(image, np.ndarray):
        arr = image.astype(np.float64)
        if arr.max() > 1.0:
            arr = arr / 255.0
        return arr
    if isinstance(image, Image.Image):
        pil = image
    else:
        try:
            pil = Image.open(image)
            pil.load()
        except (UnidentifiedImageError, OSError) as exc:
            raise IngestionError(f"cannot decode image {image}: {exc}") from exc
    if pil.mode not in ("L", "RGB"):
        pil = pil.convert("RGB")
    return np.asarray(pil, dtype=np.float64) / 255.0


def resize_bilinear(array: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers, channels-last or 2-D input."""
    if array.ndim == 2:
        t = torch.from_numpy(array)[None, None]
    else:
        t = torch.from_numpy(array).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    out = out[0].numpy()
    if array.ndim == 2:
        return out[0]
    return np.moveaxis(out, 0, -1)


def preprocess(image, image_size: int = 64, mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    """Decode, resize, replicate grayscale to 3 channels, and normalize.

    Returns a float32 array of shape (3, image_size, image_size).
    """
    arr = _decode_image(image)
    arr = resize_bilinear(arr, image_size)
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=0)
    else:
        arr = np.moveaxis(arr, -1, 0)
    arr = (arr - mean) / std
    return arr.astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic dataset generator


@dataclasses.dataclass(frozen=True)
class ClassDef:
    """One layered-stripe class: stripe count plus an optional distortion.

    ``amplitude_range`` is the distortion bump height as a fraction of image
    height; ``wobble`` gives undistorted classes a small benign bump of at
    most that height, so part of the class sits near the decision boundary.
    """

    name: str
    layer_count: int = 4
    distortion: str = "none"
    amplitude_range: tuple = (0.12, 0.20)
    wobble: float = 0.0

    def __post_init__(self):
        if self.distortion not in DISTORTIONS:
            raise ValueError(f"unknown distortion {self.distortion!r}")
        if self.layer_count < 2:
            raise ValueError("layer_count must be >= 2")

    def signature(self) -> tuple:
        return (self.layer_count, self.distortion, self.amplitude_range, self.wobble)


@dataclasses.dataclass(frozen=True)
class OODDef:
    name: str
    pattern: str

    def __post_init__(self):
        if self.pattern not in OOD_PATTERNS:
            raise ValueError(f"unknown OOD pattern {self.pattern!r}")


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    class_defs: tuple = ()
    ood_defs: tuple = ()
    noise_sigma: float = 0.03
    samples_per_class: int = 60
    patients_per_class: int = 6
    ood_samples_per_def: int = 40

    def __post_init__(self):
        if not self.class_defs:
            raise ValueError("at least one class definition required")
        names = [c.name for c in self.class_defs]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        sigs = [c.signature() for c in self.class_defs]
        if len(set(sigs)) != len(sigs):
            raise ValueError("class definitions must be pairwise distinct")
        ood_names = [o.name for o in self.ood_defs]
        if set(ood_names) & set(names) or len(set(ood_names)) != len(ood_names):
            raise ValueError("OOD names must be unique and disjoint from classes")
        if self.samples_per_class < 1 or self.patients_per_class < 1:
            raise ValueError("samples_per_class and patients_per_class must be >= 1")
        if self.samples_per_class < self.patients_per_class:
            raise ValueError("need at least one sample per patient")

    @staticmethod
    def from_dict(data: dict) -> "SyntheticSpec":
        class_defs = tuple(
            ClassDef(
                name=c["name"],
                layer_count=int(c.get("layer_count", 4)),
                distortion=c.get("distortion", "none"),
                amplitude_range=tuple(c.get("amplitude_range", (0.12, 0.20))),
                wobble=float(c.get("wobble", 0.0)),
            )
            for c in data["class_defs"]
        )
        ood_defs = tuple(
            OODDef(name=o["name"], pattern=o["pattern"]) for o in data.get("ood_defs", ())
        )
        return SyntheticSpec(
            image_size=int(data.get("image_size", 64)),
            class_defs=class_defs,
            ood_defs=ood_defs,
            noise_sigma=float(data.get("noise_sigma", 0.03)),
            samples_per_class=int(data.get("samples_per_class", 60)),
            patients_per_class=int(data.get("patients_per_class", 6)),
            ood_samples_per_def=int(data.get("ood_samples_per_def", 40)),
        )


def default_synthetic_spec(
    samples_per_class: int = 60,
    patients_per_class: int = 6,
    ood_samples_per_def: int = 40,
    noise_sigma: float = 0.03,
) -> SyntheticSpec:
    """Four-class retina-like set: one benign class and three distortions."""
    return SyntheticSpec(
        image_size=64,
        class_defs=(
            ClassDef(name="normal", layer_count=4, distortion="none", wobble=0.11),
            ClassDef(name="dome", layer_count=4, distortion="dome", amplitude_range=(0.18, 0.24)),
            ClassDef(
                name="detachment",
                layer_count=4,
                distortion="detachment",
                amplitude_range=(0.18, 0.24),
            ),
            ClassDef(
                name="thinning",
                layer_count=4,
                distortion="thinning",
                amplitude_range=(0.18, 0.24),
            ),
        ),
        ood_defs=(
            OODDef(name="vertical", pattern="vertical"),
            OODDef(name="checker", pattern="checker"),
            OODDef(name="speckle", pattern="speckle"),
        ),
        noise_sigma=noise_sigma,
        samples_per_class=samples_per_class,
        patients_per_class=patients_per_class,
        ood_samples_per_def=ood_samples_per_def,
    )


def _render_stripe_image(size, params, rng, noise_sigma):
    """Render one layered-stripe image; returns (image, region or None).

    region is the distortion bounding box [x0, y0, x1, y1] (exclusive upper
    bounds) when a distortion is drawn.
    """
    s = size
    x = np.arange(s, dtype=np.float64)
    top = (params["band_top"] + params["tilt"] * (x / s - 0.5)) * s
    bottom = (params["band_bottom"] + params["tilt"] * (x / s - 0.5)) * s

    amp = params["amp"] * s
    cx = params["cx"] * s
    width = params["width"] * s
    bump = amp * np.exp(-((x - cx) ** 2) / (2.0 * width**2))

    distortion = params["distortion"]
    layer_count = params["layer_count"]
    palette = params["palette"]

    # dome lifts the band rigidly (dark pocket left beneath); thinning
    # squeezes it from below; detachment drops the last layer downward
    top_adj = top.copy()
    bottom_adj = bottom.copy()
    if distortion == "dome":
        top_adj = top - bump
        bottom_adj = bottom - bump
    elif distortion == "thinning":
        bottom_adj = bottom - bump

    img = np.full((s, s), 0.10, dtype=np.float64)
    rows = np.arange(s, dtype=np.float64)[:, None]

    boundaries = [top_adj + (bottom_adj - top_adj) * (i / layer_count) for i in range(layer_count + 1)]
    if distortion == "detachment":
        for i in range(layer_count - 1):
            mask = (rows >= boundaries[i]) & (rows < boundaries[i + 1])
            img = np.where(mask, palette[i], img)
        gap_mask = (rows >= boundaries[layer_count - 1]) & (rows < boundaries[layer_count - 1] + bump)
        img = np.where(gap_mask, 0.02, img)
        mask = (rows >= boundaries[layer_count - 1] + bump) & (rows < boundaries[layer_count] + bump)
        img = np.where(mask, palette[layer_count - 1], img)
        top_extent = boundaries[0]
        bottom_extent = boundaries[layer_count] + bump
    else:
        for i in range(layer_count):
            mask = (rows >= boundaries[i]) & (rows < boundaries[i + 1])
            img = np.where(mask, palette[i], img)
        if distortion == "dome":
            # dark fluid pocket under the lifted band
            pocket = (rows >= bottom_adj) & (rows < bottom)
            img = np.where(pocket, 0.02, img)
        top_extent = np.minimum(top_adj, top)
        bottom_extent = np.maximum(bottom_adj, bottom)

    region = None
    if distortion != "none" and amp > 0:
        half = 2.0 * width
        x0 = int(max(0, math.floor(cx - half)))
        x1 = int(min(s, math.ceil(cx + half)))
        sl = slice(x0, max(x1, x0 + 1))
        y0 = int(max(0, math.floor(top_extent[sl].min()) - 1))
        y1 = int(min(s, math.ceil(bottom_extent[sl].max()) + 1))
        region = [x0, y0, x1, y1]

    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0), region


def _render_ood_image(size, pattern, rng, noise_sigma):
    s = size
    img = np.full((s, s), 0.10, dtype=np.float64)
    if pattern == "vertical":
        stripe = int(rng.integers(4, 9))
        cols = (np.arange(s) // stripe) % 2
        img = np.where(cols[None, :] == 0, rng.uniform(0.55, 0.9), rng.uniform(0.15, 0.35))
        img = np.broadcast_to(img, (s, s)).copy()
    elif pattern == "checker":
        cell = int(rng.integers(6, 13))
        yy, xx = np.meshgrid(np.arange(s) // cell, np.arange(s) // cell, indexing="ij")
        img = np.where((yy + xx) % 2 == 0, rng.uniform(0.6, 0.9), rng.uniform(0.05, 0.25))
    elif pattern == "blobs":
        yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        for _ in range(int(rng.integers(8, 14))):
            cy, cx = rng.uniform(0, s, size=2)
            sig = rng.uniform(2.0, 6.0)
            img += rng.uniform(0.3, 0.8) * np.exp(
                -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2)
            )
    elif pattern == "speckle":
        img = rng.uniform(0.0, 1.0, size=(s, s))
    else:
        raise ValueError(f"unknown OOD pattern {pattern!r}")
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _save_gray_png(img: np.ndarray, path: Path) -> None:
    data = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def _default_palette(layer_count, rng):
    base = [0.85, 0.45, 0.70, 0.35, 0.78, 0.52, 0.62, 0.40]
    values = [base[i % len(base)] + rng.uniform(-0.03, 0.03) for i in range(layer_count)]
    return [float(np.clip(v, 0.15, 0.95)) for v in values]


def generate_synthetic(spec: SyntheticSpec, out_dir, seed: int = 0):
    """Write PNG images and manifests; returns (manifest, ood_manifest, meta).

    Each synthetic patient contributes several images drawn from shared
    patient-level pattern parameters. OOD records carry ``ood:`` labels and
    live in a separate manifest sharing the class vocabulary.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"cannot create output directory {images_dir}: {exc}") from exc

    rng = np.random.default_rng(seed)
    records = []
    meta = {}
    vocabulary = [c.name for c in spec.class_defs]

    per_patient = [
        spec.samples_per_class // spec.patients_per_class
        + (1 if i < spec.samples_per_class % spec.patients_per_class else 0)
        for i in range(spec.patients_per_class)
    ]

    for cdef in spec.class_defs:
        for p in range(spec.patients_per_class):
            patient_id = f"{cdef.name}_p{p:03d}"
            patient = {
                "band_top": rng.uniform(0.32, 0.38),
                "band_bottom": rng.uniform(0.64, 0.70),
                "tilt": rng.uniform(-0.02, 0.02),
                "palette": _default_palette(cdef.layer_count, rng),
                "cx": rng.uniform(0.38, 0.62),
                "width": rng.uniform(0.11, 0.15),
                "layer_count": cdef.layer_count,
            }
            if cdef.distortion != "none":
                patient["amp"] = rng.uniform(*cdef.amplitude_range)
                patient["distortion"] = cdef.distortion
            elif cdef.wobble > 0:
                # benign bump: some normal patients sit near the boundary
                patient["amp"] = rng.uniform(0.0, cdef.wobble)
                patient["distortion"] = "dome" if rng.random() < 0.5 else "thinning"
            else:
                patient["amp"] = 0.0
                patient["distortion"] = "none"

            for j in range(per_patient[p]):
                params = dict(patient)
                params["cx"] = float(np.clip(patient["cx"] + rng.uniform(-0.02, 0.02), 0.2, 0.8))
                params["amp"] = patient["amp"] * rng.uniform(0.95, 1.05)
                params["band_top"] = patient["band_top"] + rng.uniform(-0.01, 0.01)
                img, region = _render_stripe_image(spec.image_size, params, rng, spec.noise_sigma)
                rel = f"images/{cdef.name}_{patient_id}_{j:03d}.png"
                _save_gray_png(img, out_dir / rel)
                records.append(
                    SampleRecord(
                        image_path=rel,
                        label=cdef.name,
                        patient_id=patient_id,
                        dataset_tag="synthetic",
                        device_tag="synthgen",
                    )
                )
                meta[rel] = {
                    "label": cdef.name,
                    "patient_id": patient_id,
                    "distortion": cdef.distortion if cdef.distortion != "none" else None,
                    "region": region if cdef.distortion != "none" else None,
                }

    ood_records = []
    for odef in spec.ood_defs:
        for j in range(spec.ood_samples_per_def):
            img = _render_ood_image(spec.image_size, odef.pattern, rng, spec.noise_sigma)
            rel = f"images/ood_{odef.name}_{j:03d}.png"
            _save_gray_png(img, out_dir / rel)
            ood_records.append(
                SampleRecord(
                    image_path=rel,
                    label=f"{OOD_PREFIX}{odef.name}",
                    patient_id=f"ood_{odef.name}_{j:03d}",
                    dataset_tag="synthetic-ood",
                    device_tag="synthgen",
                )
            )
            meta[rel] = {"label": f"{OOD_PREFIX}{odef.name}", "pattern": odef.pattern}

    manifest = DatasetManifest(records=records, class_vocabulary=vocabulary)
    ood_manifest = DatasetManifest(records=ood_records, class_vocabulary=vocabulary)
    save_manifest(manifest, out_dir / "manifest.csv", out_dir / "classes.txt")
    save_manifest(ood_manifest, out_dir / "ood_manifest.csv", out_dir / "classes.txt")
    with open(out_dir / "synthetic_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest, ood_manifest, meta
