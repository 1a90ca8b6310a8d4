"""Parameter containers for the network building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import nn, ops
from .autodiff.tensor import Tensor


class Module:
    """Holds parameters (``Tensor`` attributes), buffers and child modules.

    Parameter names are dotted attribute paths, e.g. ``unet.down.0.conv.weight``.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, nn.RunningStats):
                yield f"{full}.mean", value.mean
                yield f"{full}.var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        if strict:
            missing = set(targets) - set(state)
            unexpected = set(state) - set(targets)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name not in targets:
                continue
            if targets[name].shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {targets[name].shape} vs {value.shape}")
            targets[name][...] = value


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Tensor(kaiming_uniform(rng, shape, fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nn.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running = nn.RunningStats.create(channels, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return nn.batchnorm2d(x, self.gamma, self.beta, self.running, training=self.training)


class ConvBlock(Module):
    """3x3 convolution, ReLU, batch norm."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(in_channels, out_channels, 3, rng, dtype)
        self.norm = BatchNorm2d(out_channels, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(ops.relu(self.conv(x)))


class Encoder(Module):
    """Contracting path: one block per resolution, average pooling in between, then the bottleneck."""

    def __init__(self, in_channels: int, filter_depths: list[int], bottleneck_depth: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.down = []
        prev = in_channels
        for depth in filter_depths:
            self.down.append(ConvBlock(prev, depth, rng, dtype))
            prev = depth
        self.bottleneck = ConvBlock(prev, bottleneck_depth, rng, dtype)

    def __call__(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        skips = []
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
            h = nn.avgpool2d(h, 2)
        return skips, self.bottleneck(h)


class UNet(Module):
    def __init__(self, in_channels: int, filter_depths: list[int], bottleneck_depth: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.encoder = Encoder(in_channels, filter_depths, bottleneck_depth, rng, dtype)
        self.up = []
        prev = bottleneck_depth
        for depth in reversed(filter_depths):
            self.up.append(ConvBlock(prev + depth, depth, rng, dtype))
            prev = depth

    def __call__(self, x: Tensor) -> Tensor:
        """Final (full-resolution) feature map."""
        skips, h = self.encoder(x)
        for block, skip in zip(self.up, reversed(skips)):
            h = nn.bilinear_upsample2d(h, 2)
            h = block(ops.concat([h, skip], axis=1))
        return h
