"""Keypoint detection, dense motion estimation and feature warping.

Keypoints are ``Tensor[B, K, 2]`` holding (x, y) in ``[-1, 1]`` with x to
the right and y downward, on the same pixel-center convention as
:func:`mcnet.autodiff.ops.identity_grid`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, ops
from .nn import Conv2d, Hourglass, Module


@dataclass
class DenseMotion:
    flow: Tensor  # [B, H_f, W_f, 2] backward sampling grid
    masks: Tensor  # [B, K+1, H_f, W_f], last channel is the static background
    candidates: Tensor  # [B, K+1, H_f, W_f, 2]
    occlusion: Optional[Tensor] = None  # [B, 1, H_f, W_f] when enabled


def soft_argmax(raw: Tensor, temperature: float) -> tuple[Tensor, Tensor]:
    """Spatial softmax of ``raw / temperature`` and its coordinate expectation."""
    B, K, H, W = raw.shape
    flat = ops.reshape(ops.mul(raw, 1.0 / temperature), (B, K, H * W))
    heat = ops.softmax(flat, axis=-1)
    grid = Tensor(ops.identity_grid(H, W, raw.dtype).reshape(H * W, 2))
    kp = ops.matmul(heat, grid)
    return kp, ops.reshape(heat, (B, K, H, W))


def keypoint_gaussians(kp: Tensor, sigma: float, h: int, w: int) -> Tensor:
    """Unnormalized isotropic Gaussian bump around every keypoint, ``[B,K,h,w]``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    B, K, _ = kp.shape
    grid = Tensor(ops.identity_grid(h, w, kp.dtype)[None, None])
    diff = ops.sub(grid, ops.reshape(kp, (B, K, 1, 1, 2)))
    sq = ops.sum(ops.square(diff), axis=-1)
    return ops.exp(ops.mul(sq, -0.5 / sigma ** 2))


def sparse_motions(kp_s: Tensor, kp_d: Tensor, h: int, w: int) -> Tensor:
    """Per-keypoint translated grids plus the identity grid, ``[B,K+1,h,w,2]``.

    Candidate m samples the source at ``z + kp_s[m] - kp_d[m]`` so the
    driving neighborhood of keypoint m pulls from its source location.
    """
    if kp_s.shape != kp_d.shape:
        raise ValueError(f"keypoint sets differ in shape: {kp_s.shape} vs {kp_d.shape}")
    B, K, _ = kp_s.shape
    ident = ops.identity_grid(h, w, kp_s.dtype)
    shift = ops.reshape(ops.sub(kp_s, kp_d), (B, K, 1, 1, 2))
    moved = ops.add(shift, Tensor(ident[None, None]))
    background = Tensor(np.broadcast_to(ident, (B, 1, h, w, 2)).copy())
    return ops.concat([moved, background], axis=1)


def combine_motions(masks: Tensor, candidates: Tensor) -> Tensor:
    """Mask-weighted sum over the K+1 candidate grids."""
    return ops.sum(ops.mul(ops.reshape(masks, masks.shape + (1,)), candidates), axis=1)


def downsample_to(image: Tensor, size: int) -> Tensor:
    while image.shape[2] > size:
        image = ops.avg_pool2(image)
    if image.shape[2] != size:
        raise ValueError(f"cannot reach size {size} from {image.shape} by halving")
    return image


class KeypointDetector(Module):
    """Hourglass over a downsampled image, K heatmaps, soft-argmax."""

    def __init__(self, num_kp: int, size: int, block: int, depth: int, max_channels: int,
                 temperature: float = 0.1, dtype=np.float32):
        self.size = size
        self.temperature = temperature
        self.hourglass = Hourglass(3, block, depth, max_channels, dtype=dtype)
        self.head = Conv2d(self.hourglass.out_channels, num_kp, 3, dtype=dtype)

    def heatmap_logits(self, image: Tensor) -> Tensor:
        return self.head(self.hourglass(downsample_to(image, self.size)))

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor]:
        return soft_argmax(self.heatmap_logits(image), self.temperature)


class DenseMotionNetwork(Module):
    """Predicts soft assignment masks over the K+1 candidate motions."""

    def __init__(self, num_kp: int, size: int, block: int, depth: int, max_channels: int,
                 sigma: float = 0.1, occlusion: bool = False, dtype=np.float32):
        self.num_kp = num_kp
        self.size = size
        self.sigma = sigma
        in_channels = num_kp + 3 * (num_kp + 1)
        self.hourglass = Hourglass(in_channels, block, depth, max_channels, dtype=dtype)
        self.mask_head = Conv2d(self.hourglass.out_channels, num_kp + 1, 3, dtype=dtype)
        self.occlusion_head = Conv2d(self.hourglass.out_channels, 1, 3, dtype=dtype) if occlusion else None

    def masks(self, source: Tensor, kp_s: Tensor, kp_d: Tensor, candidates: Tensor) -> tuple[Tensor, Tensor]:
        B, K = kp_s.shape[:2]
        h = w = self.size
        small = downsample_to(source, self.size)
        C = small.shape[1]
        tiled = ops.reshape(ops.concat([ops.reshape(small, (B, 1, C, h, w))] * (K + 1), axis=1),
                            (B * (K + 1), C, h, w))
        warped = ops.grid_sample_bilinear(tiled, ops.reshape(candidates, (B * (K + 1), h, w, 2)))
        heat = ops.sub(keypoint_gaussians(kp_d, self.sigma, h, w), keypoint_gaussians(kp_s, self.sigma, h, w))
        feats = self.hourglass(ops.concat([heat, ops.reshape(warped, (B, (K + 1) * C, h, w))], axis=1))
        return ops.softmax(self.mask_head(feats), axis=1), feats

    def __call__(self, source: Tensor, kp_s: Tensor, kp_d: Tensor) -> DenseMotion:
        candidates = sparse_motions(kp_s, kp_d, self.size, self.size)
        masks, feats = self.masks(source, kp_s, kp_d, candidates)
        occlusion = ops.sigmoid(self.occlusion_head(feats)) if self.occlusion_head is not None else None
        return DenseMotion(combine_motions(masks, candidates), masks, candidates, occlusion)


def resize_flow(flow: Tensor, h: int, w: int) -> Tensor:
    """Resample a sampling grid to ``h x w``.

    Only the displacement from the identity grid is interpolated, so an
    identity flow stays exactly the identity at any resolution.
    """
    fh, fw = flow.shape[1:3]
    if (fh, fw) == (h, w):
        return flow
    disp = ops.sub(flow, Tensor(ops.identity_grid(fh, fw, flow.dtype)))
    chw = ops.resize_bilinear(ops.transpose(disp, (0, 3, 1, 2)), h, w)
    return ops.add(ops.transpose(chw, (0, 2, 3, 1)), Tensor(ops.identity_grid(h, w, flow.dtype)))


def warp_feature(feature: Tensor, motion: DenseMotion, use_occlusion: bool = False) -> Tensor:
    """Resample ``feature`` along the motion flow, resized to its resolution."""
    h, w = feature.shape[2:]
    out = ops.grid_sample_bilinear(feature, resize_flow(motion.flow, h, w))
    if use_occlusion and motion.occlusion is not None:
        out = ops.mul(out, ops.resize_bilinear(motion.occlusion, h, w))
    return out
