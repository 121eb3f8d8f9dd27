"""Training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, detach, ops
from .nn import Conv2d, Module, init

Extractor = Callable[[Tensor], Sequence[Tensor]]


@dataclass
class LossWeights:
    perceptual: float = 10.0
    equivariance: float = 10.0
    distance: float = 10.0
    consistency: float = 10.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {v}")


def identity_extractor(x: Tensor) -> list[Tensor]:
    return [x]


class RandomFeatureExtractor(Module):
    """Frozen two-layer random conv stack; also returns the raw pixels.

    Stands in for a pretrained perceptual network. Its weights carry no
    gradient flag, so they never show up among trainable parameters.
    """

    def __init__(self, widths: Sequence[int] = (8, 16), seed: int = 1234, dtype=np.float32):
        chans = [3] + list(widths)
        self.convs = [Conv2d(a, b, 3, dtype=dtype) for a, b in zip(chans[:-1], chans[1:])]
        init(self, seed)
        for conv in self.convs:
            conv.weight.requires_grad = False
            conv.bias.requires_grad = False

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = [x]
        for conv in self.convs:
            x = ops.relu(conv(x))
            feats.append(x)
        return feats


def perceptual_loss(generated: Tensor, target: Tensor, extractor: Extractor = identity_extractor,
                    scales: int = 4) -> Tensor:
    """Sum over an average-pooled pyramid of mean L1 between extractor features."""
    if generated.shape != target.shape:
        raise ValueError(f"perceptual loss needs equal shapes, got {generated.shape} and {target.shape}")
    factor = 2 ** (scales - 1)
    h, w = generated.shape[2:]
    if h < factor or w < factor or h % factor or w % factor:
        raise ValueError(f"image {h}x{w} too small for a {scales}-level pyramid")
    total = None
    for level in range(scales):
        if level:
            generated, target = ops.avg_pool2(generated), ops.avg_pool2(target)
        for fg, ft in zip(extractor(generated), extractor(target)):
            term = ops.l1(fg, detach(ft))
            total = term if total is None else ops.add(total, term)
    return total


@dataclass
class SpatialTransform:
    """Random similarity transform acting on normalized coordinates.

    Points move by ``p -> A p + t``; images are resampled so that content
    at ``p`` ends up at ``A p + t``.
    """

    angle: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def random(cls, rng: np.random.Generator, max_angle_deg: float = 15.0,
               scale_range: tuple[float, float] = (0.8, 1.2), max_shift: float = 0.1) -> "SpatialTransform":
        return cls(math.radians(rng.uniform(-max_angle_deg, max_angle_deg)),
                   rng.uniform(*scale_range), rng.uniform(-max_shift, max_shift),
                   rng.uniform(-max_shift, max_shift))

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    @property
    def shift(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def transform_points(self, kp: Tensor) -> Tensor:
        a = Tensor(self.matrix.T.astype(kp.dtype))
        return ops.add(ops.matmul(kp, a), Tensor(self.shift.astype(kp.dtype)))

    def warp_image(self, image: Tensor) -> Tensor:
        B, _, h, w = image.shape
        grid = ops.identity_grid(h, w, np.float64)
        inv = np.linalg.inv(self.matrix)
        src = (grid - self.shift) @ inv.T
        src = np.broadcast_to(src.astype(image.dtype), (B, h, w, 2))
        return ops.grid_sample_bilinear(image, Tensor(src))


def _coords(out) -> Tensor:
    return out[0] if isinstance(out, tuple) else out


def equivariance_loss(image: Tensor, detector: Callable, transform: SpatialTransform,
                      keypoints: Optional[Tensor] = None) -> Tensor:
    """Mean L1 between transformed detections and detections on the transformed image."""
    kp = _coords(detector(image)) if keypoints is None else keypoints
    moved = transform.transform_points(kp)
    detected = _coords(detector(transform.warp_image(image)))
    return ops.l1(moved, detected)


def pairwise_l1(kp: Tensor) -> Tensor:
    B, K, _ = kp.shape
    diff = ops.sub(ops.reshape(kp, (B, K, 1, 2)), ops.reshape(kp, (B, 1, K, 2)))
    return ops.sum(ops.abs(diff), axis=-1)


def keypoint_distance_loss(kp: Tensor, alpha: float = 0.2, exact: bool = False) -> Tensor:
    """Penalty on keypoint pairs closer than ``alpha`` in L1, averaged over the batch.

    ``exact`` evaluates ``sum_{i!=j} 1 - sign(d_ij - alpha)`` (zero
    gradient almost everywhere); otherwise the hinge
    ``sum_{i!=j} max(0, alpha - d_ij)`` is used, which vanishes on the
    same set.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    B, K, _ = kp.shape
    off_diag = (1.0 - np.eye(K)).astype(kp.dtype)
    if exact:
        d = pairwise_l1(Tensor(kp.data)).data
        terms = (1.0 - np.sign(d - alpha)) * off_diag
        return Tensor(np.asarray(terms.sum(axis=(1, 2)).mean()))
    d = pairwise_l1(kp)
    hinge = ops.mul(ops.relu(ops.sub(alpha, d)), Tensor(off_diag))
    return ops.mean(ops.sum(hinge, axis=(1, 2)))


def consistency_loss(values: Sequence[Tensor], projections: Sequence[Tensor]) -> Tensor:
    """Mean over levels of L1(values resized to the projection grid, detached projection)."""
    if len(values) != len(projections) or not values:
        raise ValueError("consistency loss needs one value map per projection")
    total = None
    for v, p in zip(values, projections):
        term = ops.l1(ops.resize_bilinear(v, *p.shape[2:]), detach(p))
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, 1.0 / len(values))


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of ``perceptual``, ``equivariance``, ``distance`` and ``consistency``."""
    lam = {"perceptual": weights.perceptual, "equivariance": weights.equivariance,
           "distance": weights.distance, "consistency": weights.consistency}
    total = None
    for name, value in parts.items():
        if name not in lam:
            raise KeyError(f"unknown loss part {name!r}")
        if not np.isfinite(value.data).all():
            raise NonFiniteError(f"loss part {name!r} is not finite: {value.data}")
        term = ops.mul(value, lam[name])
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("no loss parts given")
    return total
