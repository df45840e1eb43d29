"""Training objectives: pixel, 2.5D perceptual, and adversarial losses.

The perceptual term slices both volumes along the axial, coronal, and
sagittal axes, runs every slice stack through a 2D feature extractor, and
sums the per-layer mean absolute feature differences over the three views.
Means (not sums) keep the loss magnitude independent of volume size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .models import FeatureExtractor2D, extract_features_2d
from .nn import (
    Tensor,
    absolute,
    as_tensor,
    mean_all,
    moveaxis,
    neg,
    reshape,
    slice_axis,
    softplus,
)


class LossError(ValueError):
    """Loss inputs violate a shape or size precondition."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the generator objective: lambda1 pixel + lambda2
    perceptual + lambda3 adversarial.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.01

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise LossError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    """Scalar loss terms of one training step."""

    pixel: float
    perceptual: float
    adversarial: float
    generator_total: float
    discriminator: float

    @classmethod
    def from_terms(
        cls,
        pixel: float,
        perceptual: float,
        adversarial: float,
        discriminator: float,
        weights: LossWeights,
    ) -> "LossReport":
        total = (
            weights.lambda1 * pixel
            + weights.lambda2 * perceptual
            + weights.lambda3 * adversarial
        )
        return cls(pixel, perceptual, adversarial, total, discriminator)


LOG_FIELDS = ("step", "pixel", "perc", "adv", "gen_total", "disc")


def log_row(step: int, report: LossReport) -> list:
    """One training-log CSV row, ordered as LOG_FIELDS."""
    return [
        step,
        report.pixel,
        report.perceptual,
        report.adversarial,
        report.generator_total,
        report.discriminator,
    ]


def pixel_loss(sr: Tensor, hr: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    if sr.shape != hr.shape:
        raise LossError(f"pixel_loss: shape mismatch {sr.shape} vs {hr.shape}")
    return mean_all(absolute(sr - hr))


def _view_slices(x: Tensor, axis: int, stride: int) -> Tensor:
    """Stack all slices along a spatial axis into the batch dimension."""
    if stride > 1:
        x = slice_axis(x, axis, step=stride)
    moved = moveaxis(x, axis, 1)
    n, m = moved.shape[0], moved.shape[1]
    return reshape(moved, (n * m,) + moved.shape[2:])


def perceptual_2_5d(
    sr: Tensor, hr: Tensor, fx: FeatureExtractor2D, slice_stride: int = 1
) -> Tensor:
    """Sum over the three orthogonal views of per-layer mean absolute
    feature differences between slice stacks of sr and hr.

    ``slice_stride`` subsamples every view's slices (stride 1 uses all of
    them). Differentiable with respect to both volumes.
    """
    if sr.ndim != 5:
        raise LossError(f"perceptual_2_5d: inputs must be 5-D, got shape {sr.shape}")
    if sr.shape != hr.shape:
        raise LossError(f"perceptual_2_5d: shape mismatch {sr.shape} vs {hr.shape}")
    if slice_stride < 1:
        raise LossError(f"perceptual_2_5d: slice_stride must be >= 1, got {slice_stride}")
    if min(sr.shape[2:]) < fx.min_input_size:
        raise LossError(
            f"perceptual_2_5d: every slice plane needs at least "
            f"{fx.min_input_size} per side, got spatial dims {sr.shape[2:]}"
        )
    total = None
    for axis in (2, 3, 4):  # axial (z), coronal (y), sagittal (x)
        fa = extract_features_2d(_view_slices(sr, axis, slice_stride), fx)
        fb = extract_features_2d(_view_slices(hr, axis, slice_stride), fx)
        for a, b in zip(fa, fb):
            term = mean_all(absolute(a - b))
            total = term if total is None else total + term
    return total


def adversarial_losses(d_on_sr_logits: Tensor, d_on_hr_logits: Tensor) -> tuple[Tensor, Tensor]:
    """Voxel-wise binary cross-entropy with logits.

    Returns (gen_adv, disc): gen_adv scores super-resolved voxels against
    the real label; disc scores real voxels as real plus super-resolved
    voxels as fake. Both are pure functions of the given logits; the caller
    arranges gradient isolation (detach the super-resolved batch before the
    discriminator phase, run the discriminator on detached parameters for
    the generator phase).
    """
    if d_on_sr_logits.shape != d_on_hr_logits.shape:
        raise LossError(
            f"adversarial_losses: shape mismatch {d_on_sr_logits.shape} "
            f"vs {d_on_hr_logits.shape}"
        )
    # BCE(z, 1) = softplus(-z); BCE(z, 0) = softplus(z).
    disc = mean_all(softplus(neg(d_on_hr_logits))) + mean_all(softplus(d_on_sr_logits))
    gen_adv = mean_all(softplus(neg(d_on_sr_logits)))
    return gen_adv, disc


def total_generator_loss(pixel, perc, adv, w: LossWeights) -> Tensor:
    """Exact weighted sum of the three generator terms."""
    return (
        as_tensor(pixel) * w.lambda1
        + as_tensor(perc) * w.lambda2
        + as_tensor(adv) * w.lambda3
    )
