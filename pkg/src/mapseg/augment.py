"""Stochastic scan-level augmentation for the source, target, and pretraining streams.

Geometric and intensity transforms are applied to the whole scan before any
patch extraction, so the local patch, the downsampled global volume, and
their labels stay mutually consistent.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .volume import LabelGrid, VolumeGrid


@dataclass(frozen=True)
class AugmentPolicy:
    """Which transforms may fire for a data stream, each gated independently
    by a Bernoulli(probability) draw."""

    stream: str = "source"
    probability: float = 0.35
    scale_range: tuple[float, float] = (0.7, 1.4)
    rotation_deg: float = 30.0
    bias_field: bool = True
    bias_order: int = 3
    bias_coeff_range: float = 0.3
    gamma: bool = True
    gamma_log_range: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}")


def source_policy(**overrides) -> AugmentPolicy:
    """Affine + bias field + gamma, the labeled-stream recipe."""
    kw = dict(stream="source", scale_range=(0.7, 1.4), rotation_deg=30.0, bias_field=True, gamma=True)
    kw.update(overrides)
    return AugmentPolicy(**kw)


def target_policy(**overrides) -> AugmentPolicy:
    """Affine only, the unlabeled-stream recipe."""
    kw = dict(stream="target", scale_range=(0.7, 1.3), rotation_deg=30.0, bias_field=False, gamma=False)
    kw.update(overrides)
    return AugmentPolicy(**kw)


def pretrain_policy(**overrides) -> AugmentPolicy:
    """Affine only with wider ranges, used during autoencoder pretraining."""
    kw = dict(stream="pretrain", scale_range=(0.75, 1.5), rotation_deg=40.0, bias_field=False, gamma=False)
    kw.update(overrides)
    return AugmentPolicy(**kw)


def _rotation_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    rot = rz @ ry @ rx
    # Snap trig residue (sin(pi) ~ 1e-16) so axis-aligned rotations map the
    # grid onto itself exactly instead of drifting voxels out of field.
    rot[np.abs(rot) < 1e-12] = 0.0
    return rot


def affine_resample(
    v: VolumeGrid,
    labels: Optional[LabelGrid],
    scale: float,
    angles_rad: tuple[float, float, float],
) -> tuple[VolumeGrid, Optional[LabelGrid]]:
    """Resample under "scale then rotate about the array center": trilinear
    for the image, nearest-neighbor for labels, with the identical transform.
    Output dims are unchanged; out-of-field voxels become 0 / background."""
    rot = _rotation_matrix(*angles_rad)
    # Output voxel o samples input at A @ o + b, the inverse transform.
    inv = rot.T / scale
    center = (np.asarray(v.dims, dtype=np.float64) - 1.0) / 2.0
    offset = center - inv @ center
    out = ndimage.affine_transform(v.data, inv, offset=offset, order=1, mode="grid-constant", cval=0.0)
    if v.normalized:
        out = np.clip(out, 0.0, 1.0)
    out_v = VolumeGrid(out.astype(np.float32), normalized=v.normalized)
    out_l = None
    if labels is not None:
        lab = ndimage.affine_transform(
            labels.data, inv, offset=offset, order=0, mode="grid-constant", cval=0
        )
        out_l = LabelGrid(lab.astype(np.int64), num_classes=labels.num_classes)
    return out_v, out_l


def random_affine(
    v: VolumeGrid,
    labels: Optional[LabelGrid],
    scale_range: tuple[float, float],
    rotation_deg: float,
    rng: np.random.Generator,
) -> tuple[VolumeGrid, Optional[LabelGrid]]:
    """One isotropic scale and three Euler angles, drawn uniformly."""
    scale = rng.uniform(*scale_range)
    angles = np.radians(rng.uniform(-rotation_deg, rotation_deg, size=3))
    return affine_resample(v, labels, scale, tuple(angles))


def gamma_transform(v: VolumeGrid, gamma: float) -> VolumeGrid:
    if gamma == 1.0:
        return v
    return VolumeGrid(np.power(v.data, gamma, dtype=np.float32), normalized=v.normalized)


def random_gamma(v: VolumeGrid, log_range: float, rng: np.random.Generator) -> VolumeGrid:
    """v ** gamma with gamma drawn log-uniformly from [e^-log_range, e^log_range]."""
    gamma = float(np.exp(rng.uniform(-log_range, log_range)))
    return gamma_transform(v, gamma)


def polynomial_terms(order: int) -> list[tuple[int, int, int]]:
    """Canonical ordering of monomial exponents with total degree <= order."""
    return [
        (i, j, k)
        for i, j, k in itertools.product(range(order + 1), repeat=3)
        if i + j + k <= order
    ]


def polynomial_field(dims: tuple[int, int, int], order: int, coeffs: np.ndarray) -> np.ndarray:
    """exp(P) for the polynomial P with the given coefficients (one per
    polynomial_terms entry) over normalized coordinates [-1, 1]^3."""
    terms = polynomial_terms(order)
    if len(coeffs) != len(terms):
        raise ValueError(f"expected {len(terms)} coefficients, got {len(coeffs)}")
    coords = [np.linspace(-1.0, 1.0, d, dtype=np.float64) if d > 1 else np.zeros(1) for d in dims]
    powers = [np.stack([c**k for k in range(order + 1)]) for c in coords]
    log_field = np.zeros(dims, dtype=np.float64)
    for c, (i, j, k) in zip(coeffs, terms):
        if c == 0.0:
            continue
        log_field += c * (
            powers[0][i][:, None, None] * powers[1][j][None, :, None] * powers[2][k][None, None, :]
        )
    return np.exp(log_field)


def sample_bias_field(
    dims: tuple[int, int, int], order: int, coeff_range: float, rng: np.random.Generator
) -> np.ndarray:
    """Multiplicative field exp(P) for a random polynomial P of the given total
    degree, coefficients uniform in [-coeff_range, coeff_range]."""
    coeffs = rng.uniform(-coeff_range, coeff_range, size=len(polynomial_terms(order)))
    return polynomial_field(dims, order, coeffs)


def random_bias_field(
    v: VolumeGrid, rng: np.random.Generator, order: int = 3, coeff_range: float = 0.3
) -> VolumeGrid:
    """Multiply by a smooth random exponential-polynomial field, re-clamped to [0, 1]."""
    field = sample_bias_field(v.dims, order, coeff_range, rng)
    out = np.clip(v.data * field, 0.0, 1.0)
    return VolumeGrid(out.astype(np.float32), normalized=True)


def apply_policy(
    v: VolumeGrid,
    labels: Optional[LabelGrid],
    policy: AugmentPolicy,
    rng: np.random.Generator,
) -> tuple[VolumeGrid, Optional[LabelGrid]]:
    """Run the policy on a whole scan. Every enabled transform fires
    independently with the policy probability; gates are drawn in a fixed
    order so a given seed always produces the same output."""
    fire_affine, fire_bias, fire_gamma = rng.random(3) < policy.probability
    if fire_affine:
        v, labels = random_affine(v, labels, policy.scale_range, policy.rotation_deg, rng)
    if policy.bias_field and fire_bias:
        v = random_bias_field(v, rng, order=policy.bias_order, coeff_range=policy.bias_coeff_range)
    if policy.gamma and fire_gamma:
        v = random_gamma(v, policy.gamma_log_range, rng)
    return v, labels
