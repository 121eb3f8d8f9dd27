"""Full animation network: keypoints, dense motion, multi-level memory compensation, decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, ops
from .config import ModelConfig
from .memory import LevelOutput, MemoryCompensation, MetaMemory
from .motion import DenseMotion, DenseMotionNetwork, KeypointDetector, warp_feature
from .nn import Conv2d, Module, count_parameters, init

__all__ = ["Animation", "MCNet", "count_parameters", "init"]


@dataclass
class Animation:
    image: Tensor
    kp_source: Tensor
    kp_driving: Tensor
    heat_source: Tensor
    heat_driving: Tensor
    motion: DenseMotion
    encoded: list[Tensor]
    warped: list[Tensor]
    levels: list[LevelOutput] = field(default_factory=list)

    @property
    def compensated(self) -> list[Tensor]:
        return [lv.compensated for lv in self.levels]


class MCNet(Module):
    """Encoder levels are numbered from full resolution (1) to coarsest (N).

    The decoder starts from the coarsest compensated map and walks back up,
    concatenating the compensated map of each level on the way.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32, seed: int = 0):
        self.config = config
        cfg = config
        K = cfg.keypoints
        self.kp_detector = KeypointDetector(K, cfg.motion_size, cfg.kp_block, cfg.kp_depth,
                                            cfg.max_channels, cfg.temperature, dtype=dtype)
        self.dense_motion = DenseMotionNetwork(K, cfg.motion_size, cfg.motion_block, cfg.motion_depth,
                                               cfg.max_channels, cfg.kp_sigma, cfg.occlusion, dtype=dtype)
        chans = [cfg.channels(i) for i in range(1, cfg.levels + 1)]
        self.encoder = [Conv2d(3, chans[0], 3, dtype=dtype)]
        self.encoder += [Conv2d(chans[i - 1], chans[i], 3, dtype=dtype) for i in range(1, cfg.levels)]
        self.memory = MetaMemory(cfg.memory_c, cfg.memory_h, cfg.memory_w, dtype=dtype)
        self.compensation = [
            MemoryCompensation(c, cfg.memory_c, K, cfg.pe_L, cfg.n_kernels, cfg.attention_scaling,
                               cfg.query_bias, cfg.demod_eps, dtype=dtype)
            for c in chans
        ]
        # decoder[0] lifts the coarsest map; decoder[j] consumes concat(decoded, compensated) of
        # encoder level N-j and outputs the width of level N-j-1
        self.decoder = []
        if cfg.levels > 1:
            self.decoder.append(Conv2d(chans[-1], chans[-2], 3, dtype=dtype))
            for lv in range(cfg.levels - 2, 0, -1):
                self.decoder.append(Conv2d(2 * chans[lv], chans[lv - 1], 3, dtype=dtype))
        self.final = Conv2d(2 * chans[0], 3, 3, dtype=dtype)
        self.dtype = dtype
        init(self, seed)

    def encode(self, image: Tensor) -> list[Tensor]:
        feats = []
        x = image
        for i, conv in enumerate(self.encoder):
            if i > 0:
                x = ops.avg_pool2(x)
            x = ops.relu(conv(x))
            feats.append(x)
        return feats

    def detect(self, source: Tensor, driving: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        B = source.shape[0]
        kp, heat = self.kp_detector(ops.concat([source, driving], axis=0))
        kp_s, kp_d = ops.split(kp, [B, B], axis=0)
        heat_s, heat_d = ops.split(heat, [B, B], axis=0)
        return kp_s, kp_d, heat_s, heat_d

    def decode(self, compensated: list[Tensor]) -> Tensor:
        n = len(compensated)
        d = compensated[-1]
        if n > 1:
            d = ops.upsample_nearest2(ops.relu(self.decoder[0](d)))
            for j, lv in enumerate(range(n - 2, 0, -1), start=1):
                x = ops.concat([d, compensated[lv]], axis=1)
                d = ops.upsample_nearest2(ops.relu(self.decoder[j](x)))
        return ops.sigmoid(self.final(ops.concat([d, compensated[0]], axis=1)))

    def animate(self, source: Tensor, driving: Tensor, ablate_memory: bool = False,
                keypoints: tuple[Tensor, Tensor] | None = None) -> Animation:
        """Re-render ``source`` with the pose of ``driving``.

        ``keypoints`` optionally overrides the detected (source, driving)
        keypoints; heatmaps are still computed by the detector.
        """
        if source.shape != driving.shape:
            raise ValueError(f"source {source.shape} and driving {driving.shape} differ in size")
        size = self.config.image_size
        if source.shape[1:] != (3, size, size):
            raise ValueError(f"expected images of shape [B,3,{size},{size}], got {source.shape}")
        kp_s, kp_d, heat_s, heat_d = self.detect(source, driving)
        if keypoints is not None:
            kp_s, kp_d = keypoints
        motion = self.dense_motion(source, kp_s, kp_d)
        encoded = self.encode(source)
        warped = [warp_feature(f, motion, self.config.occlusion) for f in encoded]
        levels = [block(w, kp_s, self.memory, ablate=ablate_memory)
                  for block, w in zip(self.compensation, warped)]
        image = self.decode([lv.compensated for lv in levels])
        return Animation(image, kp_s, kp_d, heat_s, heat_d, motion, encoded, warped, levels)

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        groups = {
            "keypoint_detector": self.kp_detector.parameters(),
            "dense_motion": self.dense_motion.parameters(),
            "encoder": [p for m in self.encoder for p in m.parameters()],
            "decoder": [p for m in self.decoder + [self.final] for p in m.parameters()],
            "iicm": [],
            "mcm": [],
            "meta_memory": [self.memory.bank],
        }
        for block in self.compensation:
            groups["iicm"] += block.identity_mlp.parameters() + block.memory_conv.parameters()
            groups["mcm"] += (block.project.parameters() + block.key_conv.parameters()
                              + block.value_conv.parameters() + block.query.parameters()
                              + block.output.parameters())
        return groups
