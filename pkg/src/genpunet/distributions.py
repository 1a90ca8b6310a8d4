"""Latent-space distributions with reparameterized sampling.

All parameters carry arbitrary leading batch axes: a ``DiagGaussian`` with
``mu`` of shape ``[B, d]`` is ``B`` independent distributions.  Mixture
components are stacked along the axis just before the event axis, so a
mixture of ``N`` Gaussians over ``R^d`` has ``mu`` of shape ``[..., N, d]``.

Noise is always passed in explicitly.  Use :func:`draw_noise` with a seeded
``numpy.random.Generator`` to produce it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Union

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, record

LOG_2PI = math.log(2 * math.pi)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def build_cholesky(chol_raw) -> Tensor:
    """Lower-triangular factor from an unconstrained square matrix.

    The strict lower triangle is copied, the diagonal is exponentiated and the
    upper triangle is masked to zero.
    """
    raw = chol_raw if isinstance(chol_raw, Tensor) else Tensor(np.asarray(chol_raw))
    if raw.ndim < 2 or raw.shape[-1] != raw.shape[-2]:
        raise ValueError(f"build_cholesky needs a square matrix, got shape {raw.shape}")
    d = raw.shape[-1]
    strict = np.tril(np.ones((d, d), dtype=bool), -1)
    eye = np.eye(d, dtype=bool)
    diag_exp = np.exp(np.where(eye, raw.data, 0)).astype(raw.dtype)
    L = np.where(strict, raw.data, 0) + np.where(eye, diag_exp, 0)

    def _backward(g):
        return (np.where(strict, g, 0) + np.where(eye, g * diag_exp, 0),)

    return record(L.astype(raw.dtype), (raw,), _backward)


@dataclass(frozen=True)
class DiagGaussian:
    """Axis-aligned Gaussian parameterized by mean and log standard deviation."""

    mu: Tensor
    log_std: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_std.shape or self.mu.ndim < 1:
            raise ValueError(f"mu {self.mu.shape} and log_std {self.log_std.shape} must match")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def to_full(self) -> "FullCovGaussian":
        """Same distribution expressed through a (diagonal) raw Cholesky block."""
        d = self.dim
        eye = np.eye(d, dtype=self.mu.dtype)
        chol_raw = ops.expand_dims(self.log_std, -1) * Tensor(eye, dtype=self.mu.dtype)
        return FullCovGaussian(self.mu, chol_raw)


@dataclass(frozen=True)
class FullCovGaussian:
    """Gaussian with covariance ``L L^T``, ``L = build_cholesky(chol_raw)``."""

    mu: Tensor
    chol_raw: Tensor

    def __post_init__(self):
        d = self.mu.shape[-1]
        if self.chol_raw.shape[-2:] != (d, d) or self.chol_raw.shape[:-2] != self.mu.shape[:-1]:
            raise ValueError(f"chol_raw {self.chol_raw.shape} does not match mu {self.mu.shape}")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @cached_property
    def scale_tril(self) -> Tensor:
        return build_cholesky(self.chol_raw)

    def covariance(self) -> np.ndarray:
        L = self.scale_tril.data.astype(np.float64)
        return L @ np.swapaxes(L, -1, -2)


Gaussian = Union[DiagGaussian, FullCovGaussian]


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of homogeneous Gaussian components with Gumbel-Softmax selection.

    ``components`` holds the stacked component parameters (component axis at
    ``-2`` of ``mu``); ``mix_logits`` has shape ``[..., N]``.
    """

    components: Gaussian
    mix_logits: Tensor
    temperature: float

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        mu = self.components.mu
        if mu.ndim < 2 or mu.shape[:-1] != self.mix_logits.shape:
            raise ValueError(f"mix_logits {self.mix_logits.shape} do not match components {mu.shape}")

    @classmethod
    def from_components(cls, components: list, mix_logits: Tensor, temperature: float) -> "GaussianMixture":
        if not components:
            raise ValueError("a mixture needs at least one component")
        kind = type(components[0])
        if any(type(c) is not kind for c in components):
            raise TypeError("mixture components must all be of the same kind")
        mu = ops.stack([c.mu for c in components], axis=-2)
        if kind is DiagGaussian:
            stacked = DiagGaussian(mu, ops.stack([c.log_std for c in components], axis=-2))
        else:
            stacked = FullCovGaussian(mu, ops.stack([c.chol_raw for c in components], axis=-3))
        return cls(stacked, mix_logits, temperature)

    @property
    def n_components(self) -> int:
        return self.mix_logits.shape[-1]

    @property
    def dim(self) -> int:
        return self.components.mu.shape[-1]

    def weights(self) -> np.ndarray:
        return ops.softmax(self.mix_logits.detach(), axis=-1).data

    def component(self, i: int) -> Gaussian:
        c = self.components
        if isinstance(c, DiagGaussian):
            return DiagGaussian(c.mu[..., i, :], c.log_std[..., i, :])
        return FullCovGaussian(c.mu[..., i, :], c.chol_raw[..., i, :, :])


Distribution = Union[DiagGaussian, FullCovGaussian, GaussianMixture]


@dataclass(frozen=True)
class LatentSample:
    z: Tensor
    component_index: Optional[np.ndarray] = None


@dataclass(frozen=True)
class LatentNoise:
    """External noise for one reparameterized draw."""

    eps: np.ndarray
    uniform: Optional[np.ndarray] = None


def uniform_open(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws strictly inside (0, 1)."""
    return rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=shape)


def draw_noise(rng: np.random.Generator, batch_shape, dim: int,
               n_components: Optional[int] = None) -> LatentNoise:
    batch_shape = (batch_shape,) if isinstance(batch_shape, (int, np.integer)) else tuple(batch_shape)
    eps = rng.standard_normal(batch_shape + (dim,))
    u = uniform_open(rng, batch_shape + (n_components,)) if n_components else None
    return LatentNoise(eps, u)


# -- sampling -----------------------------------------------------------------

def _check_eps(dist: Gaussian, eps) -> Tensor:
    eps = _const(eps, dist.mu)
    if eps.shape[-1] != dist.dim:
        raise ValueError(f"eps has dimension {eps.shape[-1]}, distribution has {dist.dim}")
    return eps


def _reparameterize(dist: Gaussian, eps: Tensor) -> Tensor:
    if isinstance(dist, DiagGaussian):
        return dist.mu + ops.exp(dist.log_std) * eps
    Leps = ops.matmul(dist.scale_tril, ops.expand_dims(eps, -1))
    return dist.mu + ops.reshape(Leps, Leps.shape[:-1])


def rsample_gaussian(dist: Gaussian, eps) -> LatentSample:
    """``z = mu + L eps`` with ``eps`` treated as a constant."""
    eps = _check_eps(dist, eps)
    return LatentSample(_reparameterize(dist, eps))


def sample_gumbel_softmax(mix_logits: Tensor, tau: float, uniform_draws) -> Tensor:
    """Relaxed one-hot ``softmax((logits + g) / tau)`` with Gumbel noise ``g = -log(-log u)``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    u = np.asarray(uniform_draws, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("uniform draws must lie strictly inside (0, 1)")
    g = -np.log(-np.log(u))
    return ops.softmax((mix_logits + Tensor(g.astype(mix_logits.dtype))) * (1.0 / tau), axis=-1)


def straight_through_select(relaxed: Tensor) -> Tensor:
    """One-hot of the argmax in the forward pass, identity in the backward pass.

    Ties go to the lowest index.
    """
    idx = np.argmax(relaxed.data, axis=-1)
    hard = np.zeros_like(relaxed.data)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return record(hard, (relaxed,), lambda g: (g,))


def rsample_mixture(mix: GaussianMixture, eps, uniform_draws) -> LatentSample:
    """Pick a component by Gumbel-Softmax straight-through, then reparameterize it."""
    eps = _check_eps(mix.components, eps)
    if np.shape(uniform_draws)[-1] != mix.n_components:
        raise ValueError("one uniform draw per mixture component is required")
    one_hot = straight_through_select(sample_gumbel_softmax(mix.mix_logits, mix.temperature, uniform_draws))
    per_component = _reparameterize(mix.components, ops.expand_dims(eps, -2))
    z = ops.sum(ops.expand_dims(one_hot, -1) * per_component, axis=-2)
    return LatentSample(z, np.argmax(one_hot.data, axis=-1))


def rsample(dist: Distribution, noise: LatentNoise) -> LatentSample:
    if isinstance(dist, GaussianMixture):
        return rsample_mixture(dist, noise.eps, noise.uniform)
    return rsample_gaussian(dist, noise.eps)


# -- densities and divergences ------------------------------------------------

def _gaussian_log_prob(dist: Gaussian, z: Tensor) -> Tensor:
    d = dist.dim
    diff = z - dist.mu
    if isinstance(dist, DiagGaussian):
        w = diff * ops.exp(ops.neg(dist.log_std))
        log_det = 2.0 * ops.sum(dist.log_std, axis=-1)
    else:
        w = ops.solve_triangular(dist.scale_tril, ops.expand_dims(diff, -1))
        w = ops.reshape(w, w.shape[:-1])
        # log L_ii is the raw diagonal itself
        log_det = 2.0 * ops.sum(ops.diagonal(dist.chol_raw), axis=-1)
    quad = ops.sum(ops.square(w), axis=-1)
    return -0.5 * (log_det + quad + d * LOG_2PI)


def log_prob(dist: Distribution, z) -> Tensor:
    """Log density at ``z``; mixtures use log-sum-exp over weighted components."""
    like = dist.components.mu if isinstance(dist, GaussianMixture) else dist.mu
    z = _const(z, like)
    if z.shape[-1] != dist.dim:
        raise ValueError(f"z has dimension {z.shape[-1]}, distribution has {dist.dim}")
    if isinstance(dist, GaussianMixture):
        comp = _gaussian_log_prob(dist.components, ops.expand_dims(z, -2))
        return ops.logsumexp(ops.log_softmax(dist.mix_logits, axis=-1) + comp, axis=-1)
    return _gaussian_log_prob(dist, z)


def kl_closed_form(q: Gaussian, p: Gaussian) -> Tensor:
    """KL(q || p) between two Gaussians of the same kind and dimension."""
    if type(q) is not type(p) or isinstance(q, GaussianMixture):
        raise TypeError("kl_closed_form needs two Gaussians of the same kind")
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    d = q.dim
    if isinstance(q, DiagGaussian):
        var_ratio = ops.exp(2.0 * (q.log_std - p.log_std))
        scaled = (p.mu - q.mu) * ops.exp(ops.neg(p.log_std))
        terms = var_ratio + ops.square(scaled) - 1.0 + 2.0 * (p.log_std - q.log_std)
        return 0.5 * ops.sum(terms, axis=-1)
    M = ops.solve_triangular(p.scale_tril, q.scale_tril)
    trace = ops.sum(ops.square(M), axis=(-2, -1))
    v = ops.solve_triangular(p.scale_tril, ops.expand_dims(p.mu - q.mu, -1))
    quad = ops.sum(ops.square(v), axis=(-2, -1))
    log_det = 2.0 * ops.sum(ops.diagonal(p.chol_raw) - ops.diagonal(q.chol_raw), axis=-1)
    return 0.5 * (trace + quad - float(d) + log_det)


def kl_monte_carlo(q: Distribution, p: Distribution, n_samples: int,
                   rng: np.random.Generator) -> Tensor:
    """Pathwise Monte Carlo estimate of KL(q || p) from ``n_samples`` draws of ``q``.

    The estimate is unbiased but can come out slightly negative.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    mu = q.components.mu if isinstance(q, GaussianMixture) else q.mu
    batch_shape = (n_samples,) + mu.shape[:-2 if isinstance(q, GaussianMixture) else -1]
    n_comp = q.n_components if isinstance(q, GaussianMixture) else None
    noise = draw_noise(rng, batch_shape, q.dim, n_comp)
    z = rsample(q, noise).z
    return ops.mean(log_prob(q, z) - log_prob(p, z), axis=0)
