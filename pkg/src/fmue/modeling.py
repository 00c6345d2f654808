"""Transformer encoder, evidential head, LoRA adapters, and checkpoint I/O.

The encoder is a small pre-norm ViT with separately named query/key/value
projections so adapters can target them by name. The classifier head is a
single linear map on mean-pooled patch tokens (class token excluded).
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import zipfile

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1

# fixed zip entry timestamp so checkpoints are byte-stable across runs
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    scaling: float = 8.0
    targets: tuple = ("query", "value")
    adapt_all_blocks: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.scaling <= 0:
            raise ConfigError("scaling must be > 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["targets"] = list(self.targets)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LoRAConfig":
        return LoRAConfig(
            rank=int(d["rank"]),
            scaling=float(d["scaling"]),
            targets=tuple(d["targets"]),
            adapt_all_blocks=bool(d["adapt_all_blocks"]),
        )


class LoRALinear(nn.Linear):
    """Linear map with a trainable low-rank residual: Wx + (scale/r) * B(Ax).

    The base weight keeps its original parameter name so checkpoints written
    before adapter injection still match by name.
    """

    def __init__(self, base: nn.Linear, rank: int, scaling: float):
        super().__init__(base.in_features, base.out_features, bias=base.bias is not None)
        if rank > min(base.in_features, base.out_features):
            raise ConfigError(
                f"rank {rank} exceeds min dimension of a {base.in_features}x"
                f"{base.out_features} map"
            )
        with torch.no_grad():
            self.weight.copy_(base.weight)
            if base.bias is not None:
                self.bias.copy_(base.bias)
        self.rank = rank
        self.scaling = scaling
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.normal_(self.lora_a, mean=0.0, std=0.02)

    def forward(self, x):
        out = F.linear(x, self.weight, self.bias)
        lora = F.linear(F.linear(x, self.lora_a), self.lora_b)
        return out + (self.scaling / self.rank) * lora


class EvidentialHead(nn.Module):
    """Class logits from pooled features, built to starve off-manifold inputs.

    Per-class part: scale * (unit_direction . f - margin), an affine map whose
    bias is tied negative so sub-margin projections give no evidence. Shared
    part: a quadratic distance to a learned feature center, subtracted from
    every class logit. Inputs far from the training feature cloud are
    penalized equally across classes, so their evidence collapses and the
    uncertainty score rises, while in-distribution inputs pay a near-constant
    penalty and keep the plain linear-head behavior (ambiguous samples split
    their projections and come out uncertain).
    """

    def __init__(self, dim: int, class_count: int, margin: float = 0.3, penalty_tau: float = 2.0):
        super().__init__()
        if penalty_tau <= 0:
            raise ConfigError("penalty_tau must be > 0")
        self.margin = margin
        self.penalty_tau = penalty_tau
        self.direction = nn.Parameter(torch.empty(class_count, dim))
        self.log_scale = nn.Parameter(torch.tensor(math.log(4.0)))
        self.center = nn.Parameter(torch.zeros(dim))
        nn.init.trunc_normal_(self.direction, std=0.02)

    def forward(self, pooled):
        unit = F.normalize(self.direction, dim=1)
        scale = torch.exp(self.log_scale)
        linear = scale * (pooled @ unit.t() - self.margin)
        penalty = ((pooled - self.center) ** 2).sum(dim=-1, keepdim=True) / self.penalty_tau
        return linear - penalty


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q = self.query(x).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.key(x).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.value(x).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class Encoder(nn.Module):
    """Patchify, prepend a class token, run transformer blocks, normalize."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(
            3, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)

    def forward(self, images):
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] != self.cfg.image_size or images.shape[3] != self.cfg.image_size:
            raise ValueError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} input, "
                f"got {images.shape[2]}x{images.shape[3]}"
            )
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class ModelBundle(nn.Module):
    """Encoder plus evidential head producing per-class logits."""

    def __init__(
        self,
        enc_cfg: EncoderConfig,
        class_count: int,
        head_margin: float = 0.3,
        head_penalty_tau: float = 2.0,
    ):
        super().__init__()
        if class_count < 2:
            raise ConfigError("class_count must be >= 2")
        self.enc_cfg = enc_cfg
        self.class_count = class_count
        self.lora_cfg: LoRAConfig | None = None
        self.head_margin = head_margin
        self.head_penalty_tau = head_penalty_tau
        self.encoder = Encoder(enc_cfg)
        self.head = EvidentialHead(
            enc_cfg.embed_dim, class_count, margin=head_margin, penalty_tau=head_penalty_tau
        )

    def forward(self, images):
        tokens = self.encoder(images)
        pooled = tokens[:, 1:, :].mean(dim=1)
        return self.head(pooled)

    def trainable_flags(self) -> dict:
        return {name: p.requires_grad for name, p in self.named_parameters()}

    def trainable_parameter_names(self) -> list:
        return [name for name, p in self.named_parameters() if p.requires_grad]


def build_model(
    enc_cfg: EncoderConfig,
    class_count: int,
    seed: int = 0,
    head_margin: float = 0.3,
    head_penalty_tau: float = 2.0,
) -> ModelBundle:
    """Deterministic construction: same seed, same parameters bit-for-bit."""
    torch.manual_seed(seed)
    return ModelBundle(
        enc_cfg, class_count, head_margin=head_margin, head_penalty_tau=head_penalty_tau
    )


def inject_lora(model: ModelBundle, cfg: LoRAConfig) -> ModelBundle:
    """Wrap targeted attention projections with zero-initialized adapters.

    B starts at zero, so outputs are unchanged until training moves it.
    """
    valid = {"query", "key", "value", "proj"}
    unknown = set(cfg.targets) - valid
    if unknown:
        raise ConfigError(f"unknown LoRA targets {sorted(unknown)}; valid: {sorted(valid)}")
    blocks = list(model.encoder.blocks)
    if not cfg.adapt_all_blocks:
        blocks = blocks[-1:]
    for block in blocks:
        for target in cfg.targets:
            base = getattr(block.attn, target)
            if isinstance(base, LoRALinear):
                raise ConfigError(f"target {target} already has an adapter")
            setattr(block.attn, target, LoRALinear(base, cfg.rank, cfg.scaling))
    model.lora_cfg = cfg
    return model


def freeze_base(model: ModelBundle) -> ModelBundle:
    """Leave only adapter factors and the head trainable."""
    for name, param in model.named_parameters():
        is_lora = "lora_" in name
        is_head = name.startswith("head.")
        param.requires_grad = is_lora or is_head
    return model


def forward(model: ModelBundle, images) -> torch.Tensor:
    return model(images)


@dataclasses.dataclass
class LoadReport:
    loaded: list
    skipped: list
    missing: list

    def summary(self) -> str:
        return (
            f"loaded {len(self.loaded)} arrays, skipped {len(self.skipped)}, "
            f"{len(self.missing)} model parameters left at initialization"
        )


def _write_npy(zf: zipfile.ZipFile, name: str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    buf = io.BytesIO()
    np.lib.format.write_array(buf, arr, version=(1, 0))
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, buf.getvalue())


def save_bundle(model: ModelBundle, path) -> None:
    """Write a single-file archive of named parameter arrays plus a manifest."""
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "encoder_config": model.enc_cfg.to_dict(),
        "class_count": model.class_count,
        "head_margin": model.head_margin,
        "head_penalty_tau": model.head_penalty_tau,
        "lora_config": model.lora_cfg.to_dict() if model.lora_cfg else None,
    }
    with zipfile.ZipFile(path, "w") as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for name, tensor in model.state_dict().items():
            _write_npy(zf, f"params/{name}.npy", tensor.detach().cpu().numpy())


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (manifest, {name: ndarray}) from a checkpoint archive."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {}
            for entry in zf.namelist():
                if entry.startswith("params/") and entry.endswith(".npy"):
                    name = entry[len("params/") : -len(".npy")]
                    arrays[name] = np.lib.format.read_array(io.BytesIO(zf.read(entry)))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {manifest.get('format_version')}"
        )
    return manifest, arrays


def load_bundle(path) -> ModelBundle:
    """Rebuild a bundle exactly as saved (adapters included)."""
    manifest, arrays = read_checkpoint(path)
    enc_cfg = EncoderConfig(**manifest["encoder_config"])
    model = build_model(
        enc_cfg,
        manifest["class_count"],
        seed=0,
        head_margin=manifest.get("head_margin", 0.3),
        head_penalty_tau=manifest.get("head_penalty_tau", 2.0),
    )
    if manifest.get("lora_config"):
        inject_lora(model, LoRAConfig.from_dict(manifest["lora_config"]))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
    model.load_state_dict(state, strict=True)
    return model


def load_pretrained_encoder(model: ModelBundle, path) -> tuple[ModelBundle, LoadReport]:
    """Copy encoder arrays that match by name and shape; leave the head fresh.

    A name present in both with a different shape is a hard error; arrays
    with no counterpart in the model (e.g. decoder leftovers) are skipped.
    """
    _, arrays = read_checkpoint(path)
    params = dict(model.state_dict())
    loaded, skipped = [], []
    for name, arr in sorted(arrays.items()):
        if name not in params:
            skipped.append(name)
            continue
        if tuple(params[name].shape) != arr.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {arr.shape} vs "
                f"model {tuple(params[name].shape)}"
            )
        if not name.startswith("encoder."):
            skipped.append(name)
            continue
        with torch.no_grad():
            tensor = dict(model.named_parameters()).get(name)
            if tensor is None:
                tensor = dict(model.named_buffers())[name]
            tensor.copy_(torch.from_numpy(arr.copy()))
        loaded.append(name)
    missing = [n for n in params if n.startswith("encoder.") and n not in arrays]
    return model, LoadReport(loaded=loaded, skipped=skipped, missing=missing)


def count_parameters(model: ModelBundle) -> tuple[int, int]:
    """(trainable, total) parameter counts."""
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    return trainable, total
