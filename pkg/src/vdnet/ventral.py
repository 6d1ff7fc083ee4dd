"""Binary attention masks from the input sensitivity of a classifier.

The Gestalt Total (GT) of an image is the sum, over every filter of the
classifier's last convolutional layer, of that filter's spatially summed
activation. Its absolute input gradient marks the pixels that drive the
convolutional response; aggregating over channels, blurring with a Gaussian
and thresholding at the mean turns that into a binary mask that is
multiplied into the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .network import Model, ModelShapeError, forward
from .tensor import Tensor

REFERENCE_SIDE = 224


class MaskError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class VentralConfig:
    """Mask construction settings.

    ``gaussian_variance`` is in squared pixels of a 224x224 image. With
    ``rescale`` set it is scaled by ``(m * n) / 224**2`` for an ``m x n``
    input, so the blur keeps the same size relative to the image.
    ``kernel_radius`` of ``None`` means ``ceil(3 * sigma)``.
    """

    aggregation: Literal["mean", "max"] = "mean"
    gaussian_variance: float = 30.0
    kernel_radius: int | None = None
    threshold_rule: Literal["mean"] = "mean"
    rescale: bool = True

    def __post_init__(self):
        if self.aggregation not in ("mean", "max"):
            raise ValueError(f"aggregation must be 'mean' or 'max', got {self.aggregation!r}")
        if not self.gaussian_variance > 0:
            raise ValueError("gaussian_variance must be positive")
        if self.kernel_radius is not None and self.kernel_radius < 1:
            raise ValueError("kernel_radius must be >= 1")
        if self.threshold_rule != "mean":
            raise ValueError(f"unsupported threshold rule {self.threshold_rule!r}")

    def effective_variance(self, height: int, width: int) -> float:
        if not self.rescale:
            return self.gaussian_variance
        return self.gaussian_variance * height * width / REFERENCE_SIDE ** 2

    def radius(self, variance: float) -> int:
        if self.kernel_radius is not None:
            return self.kernel_radius
        return max(1, math.ceil(3.0 * math.sqrt(variance)))

    def to_json(self) -> dict:
        return {"aggregation": self.aggregation, "gaussian_variance": self.gaussian_variance,
                "kernel_radius": self.kernel_radius, "threshold_rule": self.threshold_rule,
                "rescale": self.rescale}


@dataclass
class SaliencyArtifacts:
    raw_sensitivity: np.ndarray  # |dGT/dX|, [c, m, n]
    aggregated: np.ndarray       # [m, n]
    smoothed: np.ndarray         # [m, n]
    mask: np.ndarray             # [m, n], exactly 0.0 / 1.0
    masked_image: np.ndarray     # [c, m, n]

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


def gap_per_filter(features: Tensor) -> Tensor:
    """Per-filter spatial sum ``[k, h, w] -> [k]`` (batched: ``[b, k, h, w] -> [b, k]``)."""
    if features.ndim not in (3, 4):
        raise ShapeError(f"expected [k,h,w] features, got {features.shape}")
    return T.spatial_sum(features)


def gestalt_total(filter_totals: Tensor) -> Tensor:
    return T.sum_all(filter_totals)


def sensitivity_map(classifier: Model, image) -> np.ndarray:
    """``|dGT/dX|`` at ``image`` from one forward and one backward pass.

    ``image`` may be ``[c, m, n]`` or a batch ``[b, c, m, n]``. The GT of a
    batch is the sum of per-image GTs and images do not interact, so every
    slice of the batched gradient is that image's own sensitivity.
    """
    x = Tensor(image, requires_grad=True)
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected [c,m,n] or [b,c,m,n], got {x.shape}")
    idx = classifier.last_conv_activation_index()
    _, captured = forward(classifier, x, capture={idx}, stop_after=idx)
    gt = gestalt_total(gap_per_filter(captured[idx]))
    if not gt.requires_grad:
        raise ModelShapeError("GT does not depend on the input")
    grads = T.backward(gt)
    return np.abs(grads.array(x))


def aggregate_channels(sensitivity: np.ndarray, mode: str = "mean") -> np.ndarray:
    s = np.asarray(sensitivity, dtype=np.float64)
    if s.ndim != 3:
        raise ShapeError(f"expected [c,m,n], got {s.shape}")
    if mode == "mean":
        return s.mean(axis=0)
    if mode == "max":
        return s.max(axis=0)
    raise ValueError(f"unknown aggregation {mode!r}")


def gaussian_kernel(variance: float, radius: int) -> np.ndarray:
    """Isotropic Gaussian sampled on ``[-radius, radius]^2``, normalised to sum 1."""
    if not variance > 0:
        raise ValueError(f"variance must be positive, got {variance}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * variance))
    return k / k.sum()


def smooth(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size correlation with ``kernel`` using reflect padding (edge not repeated)."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ShapeError(f"expected [m,n], got {plane.shape}")
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise T.GeometryError(f"kernel {kernel.shape} must have odd extents")
    ry, rx = kh // 2, kw // 2
    m, n = plane.shape
    if ry > m - 1 or rx > n - 1:
        raise T.GeometryError(
            f"kernel radius ({ry}, {rx}) too large for reflect padding of a {m}x{n} map")
    padded = np.pad(plane, ((ry, ry), (rx, rx)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def binarize_mean_threshold(smoothed: np.ndarray) -> np.ndarray:
    """1 where the value is at least the mean, else 0. Constant maps give all ones."""
    s = np.asarray(smoothed, dtype=np.float64)
    if s.size == 0 or s.max() == s.min():
        return np.ones_like(s)
    mean = math.fsum(s.ravel().tolist()) / s.size
    return (s >= mean).astype(np.float64)


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.ndim != 3 or mask.shape != image.shape[1:]:
        raise ShapeError(f"mask {mask.shape} does not fit image {image.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise MaskError("mask must be binary")
    return T.mul(Tensor(image), Tensor(mask)).data.copy()


def mask_from_sensitivity(sensitivity: np.ndarray, config: VentralConfig):
    _, m, n = sensitivity.shape
    variance = config.effective_variance(m, n)
    agg = aggregate_channels(sensitivity, config.aggregation)
    smoothed = smooth(agg, gaussian_kernel(variance, config.radius(variance)))
    return agg, smoothed, binarize_mean_threshold(smoothed)


def ventral_pipeline(classifier: Model, image: np.ndarray,
                     config: VentralConfig = VentralConfig()) -> SaliencyArtifacts:
    image = np.asarray(image, dtype=np.float64)
    s = sensitivity_map(classifier, image)
    agg, smoothed, mask = mask_from_sensitivity(s, config)
    return SaliencyArtifacts(s, agg, smoothed, mask, apply_mask(image, mask))


def mask_images(classifier: Model, images: np.ndarray, config: VentralConfig,
                batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Masked copies of a ``[b, c, m, n]`` stack and their masks."""
    images = np.asarray(images, dtype=np.float64)
    masked = np.empty_like(images)
    masks = np.empty((images.shape[0],) + images.shape[2:])
    for i in range(0, len(images), batch_size):
        sens = sensitivity_map(classifier, images[i:i + batch_size])
        for j, s in enumerate(sens):
            _, _, mask = mask_from_sensitivity(s, config)
            masks[i + j] = mask
            masked[i + j] = apply_mask(images[i + j], mask)
    return masked, masks


@dataclass
class Ventral:
    """A trained classifier plus mask settings, usable as the detector's input stage."""

    classifier: Model
    config: VentralConfig = VentralConfig()

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return ventral_pipeline(self.classifier, image, self.config).masked_image

    def mask_batch(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return mask_images(self.classifier, images, self.config)
