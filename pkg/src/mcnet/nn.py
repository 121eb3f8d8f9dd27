"""Parameter containers and the few layer types the network is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, ops


class Module:
    """Base class: parameters are grad-flagged ``Tensor`` attributes.

    Children are discovered from instance attributes in definition order,
    which keeps parameter naming and initialization order stable.
    """

    dtype = np.float32

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                if id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def reset(self, rng: np.random.Generator) -> None:
        for child in self.children():
            child.reset(rng)


def _param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, bias: bool = True, dtype=np.float32):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.weight = _param((c_out, c_in, k, k), dtype)
        self.bias = _param((c_out,), dtype) if bias else None

    def reset(self, rng):
        self.weight.data = he_normal(rng, self.weight.shape, self.c_in * self.k * self.k, self.weight.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, padding=self.k // 2)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, dtype=np.float32):
        self.n_in, self.n_out = n_in, n_out
        self.weight = _param((n_in, n_out), dtype)
        self.bias = _param((n_out,), dtype)

    def reset(self, rng):
        self.weight.data = he_normal(rng, self.weight.shape, self.n_in, self.weight.dtype)
        self.bias.data = np.zeros_like(self.bias.data)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.weight), self.bias)


class MLP(Module):
    """Linear layers with ReLU between them and no output activation."""

    def __init__(self, sizes: list[int], dtype=np.float32):
        self.layers = [Linear(a, b, dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x


class Hourglass(Module):
    """U-Net style encoder/decoder; output is ``block + in_channels`` wide.

    Each down block is conv+ReLU then 2x average pooling; each up block is
    nearest 2x upsampling, conv+ReLU, then concatenation with the skip.
    """

    def __init__(self, in_channels: int, block: int, depth: int, max_channels: int, dtype=np.float32):
        self.depth = depth
        widths = [in_channels] + [min(max_channels, block * 2 ** i) for i in range(depth)]
        self.down = [Conv2d(widths[i], widths[i + 1], 3, dtype=dtype) for i in range(depth)]
        self.up = []
        c = widths[-1]
        for i in reversed(range(depth)):
            width = widths[i] if i > 0 else block
            self.up.append(Conv2d(c, width, 3, dtype=dtype))
            c = width + widths[i]
        self.out_channels = c

    def __call__(self, x: Tensor) -> Tensor:
        skips = [x]
        for conv in self.down:
            x = ops.avg_pool2(ops.relu(conv(x)))
            skips.append(x)
        skips.pop()
        for conv in self.up:
            x = ops.relu(conv(ops.upsample_nearest2(x)))
            x = ops.concat([x, skips.pop()], axis=1)
        return x


def init(model: Module, seed: int) -> Module:
    """Re-initialize every parameter of ``model`` from ``seed``."""
    model.reset(np.random.default_rng(seed))
    return model


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))
