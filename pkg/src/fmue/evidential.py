"""Evidence vectors, Dirichlet opinions, and the evidential training loss.

Everything in this module is a pure function of its inputs. Tensors are
accepted with the class dimension last, so the same code handles a single
K-vector and an (N, K) batch. Non-tensor inputs are promoted to float64.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


def _as_tensor(values) -> Tensor:
    if isinstance(values, Tensor):
        return values
    return torch.as_tensor(np.asarray(values), dtype=torch.float64)


def validate_evidence(evidence) -> Tensor:
    """Check the evidence contract: finite, non-negative, K >= 2 classes."""
    e = _as_tensor(evidence)
    if e.shape[-1] < 2:
        raise ValueError(f"need at least 2 classes, got {e.shape[-1]}")
    if not torch.isfinite(e).all():
        raise ValueError("evidence must be finite")
    if (e < 0).any():
        raise ValueError("evidence must be non-negative")
    return e


@dataclasses.dataclass(frozen=True)
class DirichletOpinion:
    """Belief mass per class plus scalar uncertainty, induced by evidence.

    alpha = evidence + 1, strength = sum(alpha), belief = evidence / strength,
    uncertainty = K / strength. belief sums with uncertainty to 1.
    """

    belief: np.ndarray
    uncertainty: float
    alpha: np.ndarray
    strength: float

    @property
    def class_count(self) -> int:
        return len(self.alpha)

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.belief))


def evidence_from_logits(logits) -> Tensor:
    """Map raw logits to non-negative evidence with a stable softplus."""
    t = _as_tensor(logits)
    if not torch.isfinite(t).all():
        raise ValueError("logits must be finite")
    return F.softplus(t)


def opinion_from_evidence(evidence) -> DirichletOpinion:
    """Build the subjective-logic opinion for a single evidence vector."""
    e = validate_evidence(evidence)
    if e.dim() != 1:
        raise ValueError("opinion_from_evidence expects a single evidence vector")
    e = e.detach().to(torch.float64).numpy()
    k = e.shape[0]
    alpha = e + 1.0
    strength = float(alpha.sum())
    belief = e / strength
    uncertainty = k / strength
    return DirichletOpinion(
        belief=belief,
        uncertainty=uncertainty,
        alpha=alpha,
        strength=strength,
    )


def kl_dirichlet_uniform(alpha) -> Tensor:
    """KL divergence from Dir(alpha) to the uniform Dirichlet Dir(1, ..., 1).

    Accepts (K,) or (N, K); returns a scalar or (N,) tensor. Requires every
    concentration parameter to be at least 1.
    """
    a = _as_tensor(alpha)
    if (a < 1.0).any():
        raise ValueError("all concentration parameters must be >= 1")
    k = a.shape[-1]
    s = a.sum(dim=-1)
    kl = torch.lgamma(s) - torch.lgamma(torch.as_tensor(float(k), dtype=a.dtype))
    kl = kl - torch.lgamma(a).sum(dim=-1)
    kl = kl + ((a - 1.0) * (torch.digamma(a) - torch.digamma(s).unsqueeze(-1))).sum(dim=-1)
    return kl


@dataclasses.dataclass(frozen=True)
class LossConfig:
    """Annealing schedule for the KL regularizer: weight = min(cap, t / T)."""

    anneal_horizon: int = 10
    anneal_cap: float = 1.0

    def __post_init__(self):
        if self.anneal_horizon < 1:
            raise ValueError("anneal_horizon must be >= 1")

    def kl_weight(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        return min(self.anneal_cap, epoch / self.anneal_horizon)


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    """Loss components; tensors keep the autograd graph for training."""

    expected_ce: Tensor
    kl_term: Tensor
    kl_weight: float
    total: Tensor

    def to_floats(self) -> dict:
        return {
            "expected_ce": float(self.expected_ce.detach()),
            "kl_term": float(self.kl_term.detach()),
            "kl_weight": self.kl_weight,
            "total": float(self.total.detach()),
        }


def _validate_one_hot(y: Tensor) -> None:
    is_binary = ((y == 0.0) | (y == 1.0)).all()
    rows_sum_one = (y.sum(dim=-1) == 1.0).all()
    if not (is_binary and rows_sum_one):
        raise ValueError("labels must be one-hot vectors")


def edl_loss(evidence, one_hot, epoch: int, cfg: LossConfig) -> LossBreakdown:
    """Evidential classification loss.

    expected_ce is the expected cross-entropy under Dir(evidence + 1); the
    regularizer is the KL to the uniform Dirichlet of the label-masked
    concentration (true-class entry clamped to 1), annealed by epoch. Means
    are taken over the batch when the input is 2-D.
    """
    e = validate_evidence(evidence)
    y = _as_tensor(one_hot).to(e.dtype)
    if y.shape != e.shape:
        raise ValueError(f"label shape {tuple(y.shape)} != evidence shape {tuple(e.shape)}")
    _validate_one_hot(y)

    alpha = e + 1.0
    strength = alpha.sum(dim=-1)
    expected_ce = (y * (torch.digamma(strength).unsqueeze(-1) - torch.digamma(alpha))).sum(dim=-1)

    alpha_masked = y + (1.0 - y) * alpha
    kl = kl_dirichlet_uniform(alpha_masked)

    weight = cfg.kl_weight(epoch)
    expected_ce = expected_ce.mean()
    kl = kl.mean()
    total = expected_ce + weight * kl
    return LossBreakdown(expected_ce=expected_ce, kl_term=kl, kl_weight=weight, total=total)
