"""Generalized Probabilistic U-Net: U-Net, prior/posterior latent encoders and the combiner."""

from __future__ import annotations

import enum
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .autodiff import nn, ops
from .autodiff.tensor import Tensor
from .distributions import (
    DiagGaussian,
    Distribution,
    FullCovGaussian,
    GaussianMixture,
    LatentNoise,
    draw_noise,
    kl_closed_form,
    kl_monte_carlo,
    rsample,
)
from .layers import Conv2d, Encoder, Module, UNet

CHOL_DIAG_INIT = math.log(0.1)


class Variant(str, enum.Enum):
    AA = "AA"
    FC = "FC"
    MIX_AA = "MixAA"
    MIX_FC = "MixFC"

    @property
    def is_mixture(self) -> bool:
        return self in (Variant.MIX_AA, Variant.MIX_FC)

    @property
    def full_covariance(self) -> bool:
        return self in (Variant.FC, Variant.MIX_FC)

    @classmethod
    def parse(cls, value: Union[str, "Variant"]) -> "Variant":
        if isinstance(value, Variant):
            return value
        aliases = {"aa": cls.AA, "fc": cls.FC, "mix-aa": cls.MIX_AA, "mix-fc": cls.MIX_FC,
                   "mixaa": cls.MIX_AA, "mixfc": cls.MIX_FC}
        try:
            return aliases[value.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown variant {value!r}") from None


@dataclass
class ArchConfig:
    latent_dim: int
    variant: Variant = Variant.AA
    num_blocks: int = 3
    filter_depths: tuple = (32, 64, 128)
    bottleneck_depth: int = 512
    mixture_components: Optional[int] = None
    temperature: Optional[float] = None
    input_channels: int = 1
    image_size: tuple = (32, 32)

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.filter_depths = tuple(int(f) for f in self.filter_depths)
        self.image_size = tuple(int(s) for s in self.image_size)
        self.validate()

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if len(self.filter_depths) != self.num_blocks:
            raise ValueError(f"{self.num_blocks} blocks need {self.num_blocks} filter depths, "
                             f"got {len(self.filter_depths)}")
        factor = 2 ** self.num_blocks
        if any(s % factor for s in self.image_size):
            raise ValueError(f"image size {self.image_size} not divisible by {factor}")
        if self.variant.is_mixture:
            if self.mixture_components is None or self.mixture_components < 1:
                raise ValueError(f"{self.variant.value} needs mixture_components >= 1")
            if self.temperature is None or not self.temperature > 0:
                raise ValueError(f"{self.variant.value} needs a positive temperature")
        elif self.mixture_components is not None or self.temperature is not None:
            raise ValueError(f"{self.variant.value} takes no mixture_components/temperature")

    @property
    def n_components(self) -> int:
        return self.mixture_components if self.variant.is_mixture else 1


def head_output_size(config: ArchConfig) -> int:
    """Number of distribution parameters a latent encoder emits per input."""
    d = config.latent_dim
    per_component = d + (d * d if config.variant.full_covariance else d)
    if config.variant.is_mixture:
        return config.mixture_components * per_component + config.mixture_components
    return per_component


class LatentEncoder(Module):
    """U-Net-style encoder followed by global average pooling and 1x1 parameter heads."""

    def __init__(self, in_channels: int, config: ArchConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        c = config.bottleneck_depth
        d, n = config.latent_dim, config.n_components
        self.encoder = Encoder(in_channels, list(config.filter_depths), c, rng, dtype)
        self.head_mu = Conv2d(c, n * d, 1, rng, dtype)
        if config.variant.full_covariance:
            self.head_chol = Conv2d(c, n * d * d, 1, rng, dtype)
            diag = np.tile(np.eye(d, dtype=bool).reshape(-1), n)
            self.head_chol.bias.data[diag] = CHOL_DIAG_INIT
        else:
            self.head_log_std = Conv2d(c, n * d, 1, rng, dtype)
        if config.variant.is_mixture:
            self.head_logits = Conv2d(c, n, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Distribution:
        cfg = self.config
        _, h = self.encoder(x)
        pooled = nn.global_avgpool2d(h)
        B = x.shape[0]
        d, n = cfg.latent_dim, cfg.n_components
        lead = (B, n) if cfg.variant.is_mixture else (B,)
        mu = self.head_mu(pooled).reshape(lead + (d,))
        if cfg.variant.full_covariance:
            comp = FullCovGaussian(mu, self.head_chol(pooled).reshape(lead + (d, d)))
        else:
            comp = DiagGaussian(mu, self.head_log_std(pooled).reshape(lead + (d,)))
        if not cfg.variant.is_mixture:
            return comp
        logits = self.head_logits(pooled).reshape(B, n)
        return GaussianMixture(comp, logits, cfg.temperature)


class Combiner(Module):
    """Three 1x1 convolutions (F+d -> F -> F -> 1) with ReLU in between."""

    def __init__(self, features: int, latent_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.layers = [
            Conv2d(features + latent_dim, features, 1, rng, dtype),
            Conv2d(features, features, 1, rng, dtype),
            Conv2d(features, 1, 1, rng, dtype),
        ]

    def __call__(self, h: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ops.relu(h)
        return h


class GenProbUNet(Module):
    def __init__(self, config: ArchConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        ch = config.input_channels
        self.unet = UNet(ch, list(config.filter_depths), config.bottleneck_depth, rng, dtype)
        self.prior = LatentEncoder(ch, config, rng, dtype)
        self.posterior = LatentEncoder(ch + 1, config, rng, dtype)
        self.combiner = Combiner(config.filter_depths[0], config.latent_dim, rng, dtype)

    def noise(self, rng: np.random.Generator, batch_shape) -> LatentNoise:
        cfg = self.config
        return draw_noise(rng, batch_shape, cfg.latent_dim,
                          cfg.mixture_components if cfg.variant.is_mixture else None)


def build_variant(config: ArchConfig, seed: int, dtype=np.float32) -> GenProbUNet:
    """Fresh model with Kaiming-uniform kernels and zero biases, seeded."""
    config.validate()
    return GenProbUNet(config, np.random.default_rng(seed), dtype)


def combine_latent(model: GenProbUNet, features: Tensor, z: Tensor) -> Tensor:
    """Tile ``z`` over the feature map, concatenate channel-wise, run the combiner."""
    B, _, H, W = features.shape
    if z.ndim != 2 or z.shape[0] != B:
        raise ValueError(f"z of shape {z.shape} does not match feature batch {B}")
    if z.shape[1] != model.config.latent_dim:
        raise ValueError(f"z has dimension {z.shape[1]}, model expects {model.config.latent_dim}")
    tiled = ops.broadcast_to(z.reshape(B, z.shape[1], 1, 1), (B, z.shape[1], H, W))
    return model.combiner(ops.concat([features, tiled], axis=1))


def _as_input(model: GenProbUNet, x, channels: int, name: str) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype), dtype=model.dtype)
    cfg = model.config
    expected = (channels,) + cfg.image_size
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"{name} must have shape B x {' x '.join(map(str, expected))}, got {x.shape}")
    return x


@dataclass
class TrainOutput:
    logits: Tensor
    prior: Distribution
    posterior: Distribution
    z: Tensor


def forward_train(model: GenProbUNet, x, y, noise: LatentNoise) -> TrainOutput:
    """cVAE training path: posterior sample from (x, y), combined with the U-Net features of x."""
    x = _as_input(model, x, model.config.input_channels, "x")
    y = _as_input(model, y, 1, "y")
    if np.any((x.data < 0) | (x.data > 1)):
        raise ValueError("image intensities must lie in [0, 1]")
    if not np.all((y.data == 0) | (y.data == 1)):
        raise ValueError("labels must be binary")
    features = model.unet(x)
    prior = model.prior(x)
    posterior = model.posterior(ops.concat([x, y], axis=1))
    z = rsample(posterior, noise).z
    return TrainOutput(combine_latent(model, features, z), prior, posterior, z)


def latent_kl(posterior: Distribution, prior: Distribution, mc_samples: int,
              rng: np.random.Generator) -> Tensor:
    """Per-case KL(posterior || prior): closed form for Gaussians, Monte Carlo for mixtures."""
    if isinstance(posterior, GaussianMixture):
        return kl_monte_carlo(posterior, prior, mc_samples, rng)
    return kl_closed_form(posterior, prior)


@contextmanager
def eval_mode(model: Module):
    modes = [(m, m.training) for m in model.modules()]
    model.eval()
    try:
        yield model
    finally:
        for m, mode in modes:
            m.training = mode


@dataclass
class SampleOutput:
    masks: np.ndarray            # n x B x H x W, bool
    logits: np.ndarray           # n x B x 1 x H x W
    component_index: Optional[np.ndarray] = field(default=None)  # n x B for mixtures


def forward_sample(model: GenProbUNet, x, n_samples: int,
                   rng: Union[np.random.Generator, Sequence[np.random.Generator]]) -> SampleOutput:
    """Draw ``n_samples`` segmentations per image from the prior (posterior unused).

    ``rng`` is one generator for the whole batch or one generator per image;
    per-image generators make each image's samples independent of batching.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = _as_input(model, x, model.config.input_channels, "x")
    B = x.shape[0]
    with eval_mode(model):
        features = model.unet(x)
        prior = model.prior(x)
        logits, comps = [], []
        for _ in range(n_samples):
            if isinstance(rng, np.random.Generator):
                noise = model.noise(rng, B)
            else:
                if len(rng) != B:
                    raise ValueError("need one generator per image")
                parts = [model.noise(r, ()) for r in rng]
                uni = None if parts[0].uniform is None else np.stack([p.uniform for p in parts])
                noise = LatentNoise(np.stack([p.eps for p in parts]), uni)
            sample = rsample(prior, noise)
            logits.append(combine_latent(model, features, sample.z).data)
            comps.append(sample.component_index)
    logits = np.stack(logits)
    masks = logits[:, :, 0] > 0  # sigmoid(l) > 0.5
    comp = np.stack(comps) if comps[0] is not None else None
    return SampleOutput(masks, logits, comp)
