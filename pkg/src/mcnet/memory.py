"""Identity-conditioned meta-memory and cross-attention feature compensation.

One :class:`MetaMemory` cube is shared by every decoder level. Each level
owns a :class:`MemoryCompensation` block which

1. splits the warped feature by channels and projects the second half,
2. encodes an identity vector from the pooled projection and the source
   keypoints,
3. convolves the shared memory with identity-modulated, demodulated
   3x3 weights to get a per-source memory,
4. derives keys and values from it with two dynamic convolutions and
   queries from the projection, and
5. concatenates the attended features with the untouched first half.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, detach, ops
from .nn import MLP, Conv2d, Linear, Module, he_normal


class MetaMemory(Module):
    """Learnable ``[C_m, H_m, W_m]`` cube."""

    def __init__(self, channels: int, height: int, width: int, dtype=np.float32):
        self.bank = Tensor(np.zeros((channels, height, width), dtype=dtype), requires_grad=True)

    def reset(self, rng):
        self.bank.data = (rng.standard_normal(self.bank.shape) * 0.02).astype(self.bank.dtype)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.bank.shape


@dataclass
class SplitFeature:
    keep: Tensor
    modulate: Tensor
    proj: Tensor


def split_channels(feature: Tensor) -> tuple[Tensor, Tensor]:
    """First ceil(C/2) channels pass through, the remaining floor(C/2) are modulated."""
    c = feature.shape[1]
    if c < 2:
        raise ValueError(f"channel split needs at least 2 channels, got {c}")
    keep = (c + 1) // 2
    first, second = ops.split(feature, [keep, c - keep], axis=1)
    return first, second


def positional_encoding(coords: Tensor, num_freqs: int) -> Tensor:
    """Map each coordinate c to (c, sin(2^l pi c), cos(2^l pi c) for l < L).

    ``coords`` is ``[B, D]``; the result is ``[B, D * (1 + 2L)]`` with the
    terms of one coordinate kept adjacent.
    """
    if num_freqs < 0:
        raise ValueError("number of frequencies must be >= 0")
    if num_freqs == 0:
        return coords
    B, D = coords.shape
    freqs = Tensor((np.pi * 2.0 ** np.arange(num_freqs)).astype(coords.dtype))
    angles = ops.mul(ops.reshape(coords, (B, D, 1)), freqs)
    pairs = ops.concat([ops.reshape(ops.sin(angles), (B, D, num_freqs, 1)),
                        ops.reshape(ops.cos(angles), (B, D, num_freqs, 1))], axis=-1)
    per_coord = ops.concat([ops.reshape(coords, (B, D, 1)),
                            ops.reshape(pairs, (B, D, 2 * num_freqs))], axis=-1)
    return ops.reshape(per_coord, (B, D * (1 + 2 * num_freqs)))


def modulate_demodulate(weight: Tensor, style: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale input channels by ``style`` then normalize each output filter.

    ``weight`` is ``[C_out, C_in, k, k]``, ``style`` is ``[B, C_in]``;
    returns ``[B, C_out, C_in, k, k]`` where every output filter is divided
    by sqrt(sum of its squared entries + eps).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    B, c_in = style.shape
    if weight.shape[1] != c_in:
        raise ValueError(f"style length {c_in} != weight input channels {weight.shape[1]}")
    modulated = ops.mul(ops.reshape(weight, (1,) + weight.shape), ops.reshape(style, (B, 1, c_in, 1, 1)))
    norm = ops.sqrt(ops.add(ops.sum(ops.square(modulated), axis=(2, 3, 4), keepdims=True), eps))
    return ops.div(modulated, norm)


def condition_memory(bank: Tensor, weights: Tensor) -> Tensor:
    """3x3 convolution (padding 1, no bias) of the shared bank with per-sample weights.

    All samples read the same input, so the per-sample filters are stacked
    along the output axis and applied in a single convolution.
    """
    B, c_out, c_in, k, _ = weights.shape
    C, H, W = bank.shape
    stacked = ops.reshape(weights, (B * c_out, c_in, k, k))
    out = ops.conv2d(ops.reshape(bank, (1, C, H, W)), stacked, padding=k // 2)
    return ops.reshape(out, (B, c_out, H, W))


class DynamicConv(Module):
    """Convolution whose kernel is a softmax-weighted mix of ``n_kernels`` candidates.

    The mixing weights come from a small MLP over the pooled conditioning
    feature.
    """

    def __init__(self, channels: int, n_kernels: int = 4, k: int = 3, temperature: float = 1.0,
                 dtype=np.float32):
        if n_kernels < 1:
            raise ValueError("n_kernels must be >= 1")
        self.channels, self.n_kernels, self.k = channels, n_kernels, k
        self.temperature = temperature
        hidden = max(channels // 4, 4)
        self.fc1 = Linear(channels, hidden, dtype)
        self.fc2 = Linear(hidden, n_kernels, dtype)
        self.bank = Tensor(np.zeros((n_kernels, channels, channels, k, k), dtype=dtype), requires_grad=True)

    def reset(self, rng):
        super().reset(rng)
        self.bank.data = he_normal(rng, self.bank.shape, self.channels * self.k * self.k, self.bank.dtype)

    def attention(self, cond: Tensor) -> Tensor:
        logits = self.fc2(ops.relu(self.fc1(ops.global_avg_pool(cond))))
        return ops.softmax(ops.mul(logits, 1.0 / self.temperature), axis=-1)

    def kernels(self, attention: Tensor) -> Tensor:
        B = attention.shape[0]
        flat = ops.reshape(self.bank, (self.n_kernels, -1))
        return ops.reshape(ops.matmul(attention, flat), (B,) + self.bank.shape[1:])

    def __call__(self, x: Tensor, cond: Tensor, attention: Optional[Tensor] = None) -> Tensor:
        if attention is None:
            attention = self.attention(cond)
        return ops.conv2d(x, self.kernels(attention), padding=self.k // 2)


def attend(query: Tensor, key: Tensor, value: Tensor, scale: bool = True) -> tuple[Tensor, Tensor]:
    """Softmax(Q^T K) V over memory positions.

    ``query`` is ``[B, C, N_q]``, ``key``/``value`` are ``[B, C, N_k]``.
    Returns the attended values ``[B, C, N_q]`` and the attention
    ``[B, N_q, N_k]`` (rows sum to one).
    """
    logits = ops.matmul(ops.transpose(query, (0, 2, 1)), key)
    if scale:
        logits = ops.mul(logits, 1.0 / np.sqrt(query.shape[1]))
    attn = ops.softmax(logits, axis=-1)
    out = ops.matmul(attn, ops.transpose(value, (0, 2, 1)))
    return ops.transpose(out, (0, 2, 1)), attn


def compensate(attended: Tensor, keep: Tensor) -> Tensor:
    if attended.shape[2:] != keep.shape[2:] or attended.shape[0] != keep.shape[0]:
        raise ValueError(f"cannot concatenate {attended.shape} with {keep.shape}")
    return ops.concat([attended, keep], axis=1)


@dataclass
class LevelOutput:
    compensated: Tensor  # attended ++ kept channels, fed to the decoder
    proj: Tensor  # 1x1 projection of the modulated half
    identity: Tensor  # [B, C_m] identity vector
    conditioned: Tensor  # [B, C_m, H_m, W_m] per-source memory
    value: Tensor  # [B, C_m, H_m, W_m]
    attended: Tensor  # memory read-out in feature channels
    value_for_consistency: Tensor  # values recomputed from detached conditioning inputs


class MemoryCompensation(Module):
    """Identity-conditioned memory retrieval plus cross-attention for one level."""

    def __init__(self, channels: int, memory_channels: int, num_kp: int, pe_freqs: int = 0,
                 n_kernels: int = 4, attention_scaling: bool = True, query_bias: bool = True,
                 eps: float = 1e-8, dtype=np.float32):
        self.channels = channels
        self.memory_channels = memory_channels
        self.pe_freqs = pe_freqs
        self.attention_scaling = attention_scaling
        self.eps = eps
        keep = (channels + 1) // 2
        cm = memory_channels
        self.project = Conv2d(channels - keep, cm, 1, dtype=dtype)
        self.identity_mlp = MLP([cm + 2 * num_kp * (1 + 2 * pe_freqs), cm, cm, cm], dtype=dtype)
        self.memory_conv = Conv2d(cm, cm, 3, bias=False, dtype=dtype)
        self.key_conv = DynamicConv(cm, n_kernels, dtype=dtype)
        self.value_conv = DynamicConv(cm, n_kernels, dtype=dtype)
        self.query = Conv2d(cm, cm, 1, bias=query_bias, dtype=dtype)
        self.output = Conv2d(cm, channels - keep, 1, dtype=dtype)

    def reset(self, rng):
        super().reset(rng)
        # style vectors start around one so modulation begins near the plain conv
        self.identity_mlp.layers[-1].bias.data = np.ones_like(self.identity_mlp.layers[-1].bias.data)

    def project_warped(self, warped: Tensor) -> SplitFeature:
        keep, modulate = split_channels(warped)
        return SplitFeature(keep, modulate, self.project(modulate))

    def encode_identity(self, proj: Tensor, kp_s: Tensor) -> Tensor:
        B = proj.shape[0]
        coords = positional_encoding(ops.reshape(kp_s, (B, -1)), self.pe_freqs)
        return self.identity_mlp(ops.concat([ops.global_avg_pool(proj), coords], axis=1))

    def condition(self, bank: Tensor, identity: Tensor) -> Tensor:
        return condition_memory(bank, modulate_demodulate(self.memory_conv.weight, identity, self.eps))

    def keys_values(self, conditioned: Tensor, proj: Tensor) -> tuple[Tensor, Tensor]:
        return self.key_conv(conditioned, proj), self.value_conv(conditioned, proj)

    def cross_attention(self, proj: Tensor, key: Tensor, value: Tensor) -> Tensor:
        B, C, H, W = proj.shape
        q = ops.reshape(ops.relu(self.query(proj)), (B, C, H * W))
        out, _ = attend(q, ops.reshape(key, (B, C, -1)), ops.reshape(value, (B, C, -1)),
                        scale=self.attention_scaling)
        return self.output(ops.reshape(out, (B, C, H, W)))

    def __call__(self, warped: Tensor, kp_s: Tensor, memory: MetaMemory, ablate: bool = False) -> LevelOutput:
        split = self.project_warped(warped)
        identity = self.encode_identity(split.proj, kp_s)
        conditioned = self.condition(memory.bank, identity)
        key, value = self.keys_values(conditioned, split.proj)
        if ablate:
            attended = Tensor(np.zeros((warped.shape[0], self.output.c_out) + warped.shape[2:], warped.dtype))
        else:
            attended = self.cross_attention(split.proj, key, value)
        # The consistency target is detached; the conditioning inputs are
        # detached too so that loss only reaches the memory-side parameters.
        proj_d, kp_d = detach(split.proj), detach(kp_s)
        cond_d = self.condition(memory.bank, self.encode_identity(proj_d, kp_d))
        value_d = self.value_conv(cond_d, proj_d)
        return LevelOutput(compensate(attended, split.keep), split.proj, identity, conditioned,
                           value, attended, value_d)
