"""Training objectives: the hybrid segmentation loss, masked-reconstruction
loss, feature cosine regularizer, and the composite centralized / server /
client objectives built from them."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Union

import torch

from .masking import BlockMask

Scalar = Union[torch.Tensor, float]

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class HyperParams:
    """Loss weights: beta for masked/unmasked supervised terms, gamma and
    delta for the auxiliary global and cosine terms, eps for zero-division
    guards."""

    beta: float = 0.5
    gamma: float = 0.05
    delta: float = 0.025
    eps: float = 1e-5

    def __post_init__(self):
        if min(self.beta, self.gamma, self.delta) < 0:
            raise ValueError("beta, gamma, delta must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")


@dataclass
class LossReport:
    """Per-iteration decomposition of the centralized objective. Each field
    already carries its weight, so ``total`` is the plain sum of the parts."""

    iteration: int
    fss: float = 0.0
    mpl_target: float = 0.0
    mpl_source: float = 0.0
    glc_source_seg: float = 0.0
    glc_target_seg: float = 0.0
    cos_source: float = 0.0
    cos_source_masked: float = 0.0
    cos_target_masked: float = 0.0
    total: float = 0.0

    def parts_sum(self) -> float:
        return (
            self.fss
            + self.mpl_target
            + self.mpl_source
            + self.glc_source_seg
            + self.glc_target_seg
            + self.cos_source
            + self.cos_source_masked
            + self.cos_target_masked
        )

    def to_dict(self) -> dict:
        return asdict(self)


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(``*S``,) integer ids -> (C, ``*S``) one-hot float field."""
    oh = torch.nn.functional.one_hot(labels.long(), num_classes)
    return oh.movedim(-1, 0).to(torch.get_default_dtype())


def _as_target(target: torch.Tensor, num_classes: int) -> torch.Tensor:
    if target.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8, torch.int8):
        return one_hot(target, num_classes)
    return target


def seg_loss(pred_probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Cross-entropy plus negative soft-Dice over a (C, *spatial) probability
    field and a matching one-hot or soft target.

    The cross-entropy is averaged over voxels; the Dice ratio is computed over
    the fully flattened class-by-voxel tensors. Approaches -1 as the
    prediction approaches a one-hot target.
    """
    if pred_probs.shape != target.shape:
        raise ValueError(f"pred {tuple(pred_probs.shape)} vs target {tuple(target.shape)}")
    n_voxels = pred_probs[0].numel()
    ce = -(target * torch.log(pred_probs.clamp_min(LOG_CLAMP))).sum() / n_voxels
    inter = (target * pred_probs).sum()
    dice = (2.0 * inter + eps) / (target.sum() + pred_probs.sum() + eps)
    return ce - dice


def seg_loss_from_logits(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """seg_loss on softmax(logits) along the class axis; integer targets are one-hot encoded."""
    probs = torch.softmax(logits, dim=0)
    return seg_loss(probs, _as_target(target, logits.shape[0]), eps)


def mae_loss(recon: torch.Tensor, original: torch.Tensor, mask: BlockMask | torch.Tensor) -> torch.Tensor:
    """Mean squared error over the hidden voxels only; visible voxels never
    contribute."""
    grid = mask.grid.copy() if isinstance(mask, BlockMask) else mask
    m = torch.as_tensor(grid, dtype=torch.bool, device=recon.device)
    # tolerate a singleton channel axis on (optionally batched) volumes
    r = recon.squeeze(-4) if recon.dim() == m.dim() + 1 else recon
    o = original.squeeze(-4) if original.dim() == m.dim() + 1 else original
    if r.shape != o.shape or r.shape != m.shape:
        raise ValueError(f"shape mismatch: recon {tuple(r.shape)}, original {tuple(o.shape)}, mask {tuple(m.shape)}")
    if not bool(m.any()):
        raise ValueError("mask hides no voxels; reconstruction objective is empty")
    diff = (r - o)[m]
    return (diff * diff).mean()


def cosine_loss(chi_a: torch.Tensor, chi_b: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """1 minus the mean over spatial locations of the channel-wise cosine
    similarity; always in [0, 2]."""
    if chi_a.shape != chi_b.shape:
        raise ValueError(f"shape mismatch: {tuple(chi_a.shape)} vs {tuple(chi_b.shape)}")
    a = chi_a.reshape(chi_a.shape[0], -1) if chi_a.dim() > 1 else chi_a.reshape(-1, 1)
    b = chi_b.reshape(chi_b.shape[0], -1) if chi_b.dim() > 1 else chi_b.reshape(-1, 1)
    dot = (a * b).sum(dim=0)
    denom = torch.clamp(a.norm(dim=0) * b.norm(dim=0), min=eps)
    return 1.0 - (dot / denom).mean()


def mpl_loss(
    student_target_masked_probs: torch.Tensor,
    teacher_pseudo: torch.Tensor,
    student_source_masked_probs: torch.Tensor,
    y_source: torch.Tensor,
    beta: float = 0.5,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Masked pseudo-labeling objective: the student must reproduce the
    teacher's (gradient-free) labels from the masked target patch, plus a
    beta-weighted supervised term on the masked source patch."""
    num_classes = student_target_masked_probs.shape[0]
    target_term = seg_loss(student_target_masked_probs, _as_target(teacher_pseudo, num_classes), eps)
    source_term = seg_loss(student_source_masked_probs, _as_target(y_source, num_classes), eps)
    return target_term + beta * source_term


def glc_source_loss(
    seg_global: Scalar,
    seg_global_masked: Scalar,
    cos_plain: Scalar,
    cos_masked: Scalar,
    gamma: float,
    delta: float,
) -> Scalar:
    """Auxiliary global supervision and feature-consistency terms on source data."""
    return gamma * (seg_global + seg_global_masked) + delta * (cos_plain + cos_masked)


def glc_target_loss(seg_global_masked: Scalar, cos_masked: Scalar, gamma: float, delta: float) -> Scalar:
    """Target-side counterpart: one pseudo-labeled global term and one cosine
    term, each carrying a factor 2 to balance the two source terms."""
    return 2.0 * gamma * seg_global_masked + 2.0 * delta * cos_masked


@dataclass
class CentralizedParts:
    """Raw (unweighted) constituent values of one centralized iteration."""

    seg_source_local: Scalar
    seg_source_local_masked: Scalar
    seg_target_local_masked: Scalar
    seg_source_global: Scalar
    seg_source_global_masked: Scalar
    seg_target_global_masked: Scalar
    cos_source: Scalar
    cos_source_masked: Scalar
    cos_target_masked: Scalar


def _scalar(v: Scalar) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_centralized(parts: CentralizedParts, hp: HyperParams, iteration: int = 0):
    """Combine one iteration's constituents into the full centralized
    objective; returns (total, LossReport) with weighted parts."""
    fss = hp.beta * parts.seg_source_local
    mpl_target = parts.seg_target_local_masked
    mpl_source = hp.beta * parts.seg_source_local_masked
    glc_s = hp.gamma * (parts.seg_source_global + parts.seg_source_global_masked)
    glc_t = 2.0 * hp.gamma * parts.seg_target_global_masked
    cos_s = hp.delta * parts.cos_source
    cos_sm = hp.delta * parts.cos_source_masked
    cos_tm = 2.0 * hp.delta * parts.cos_target_masked
    total = fss + mpl_target + mpl_source + glc_s + glc_t + cos_s + cos_sm + cos_tm
    report = LossReport(
        iteration=iteration,
        fss=_scalar(fss),
        mpl_target=_scalar(mpl_target),
        mpl_source=_scalar(mpl_source),
        glc_source_seg=_scalar(glc_s),
        glc_target_seg=_scalar(glc_t),
        cos_source=_scalar(cos_s),
        cos_source_masked=_scalar(cos_sm),
        cos_target_masked=_scalar(cos_tm),
        total=_scalar(total),
    )
    return total, report


def server_loss(
    seg_local: Scalar,
    seg_local_masked: Scalar,
    seg_global: Scalar,
    seg_global_masked: Scalar,
    cos_plain: Scalar,
    cos_masked: Scalar,
    hp: HyperParams,
) -> Scalar:
    """Labeled-data objective used by the server (and test-time phase 1);
    touches no target quantities by construction."""
    return (
        hp.beta * (seg_local + seg_local_masked)
        + hp.gamma * (seg_global + seg_global_masked)
        + hp.delta * (cos_plain + cos_masked)
    )


def client_loss(
    seg_local_masked: Scalar,
    seg_local: Scalar,
    seg_global_masked: Scalar,
    seg_global: Scalar,
    cos_plain: Scalar,
    cos_masked: Scalar,
    hp: HyperParams,
) -> Scalar:
    """Unlabeled-data objective used by clients (and test-time phase 2); all
    segmentation targets are teacher pseudo-labels, never ground truth."""
    return (
        hp.beta * (seg_local_masked + seg_local)
        + hp.gamma * (seg_global_masked + seg_global)
        + hp.delta * (cos_plain + cos_masked)
    )
