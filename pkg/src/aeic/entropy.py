"""Hyperprior, 4-step quadtree context model and Gaussian rate estimation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, DepthwiseConv2d, Module, param
from .tensor import Tensor
from .transforms import ModelConfig, StarBlock

SIGMA_MIN = 0.04
SIGMA_MAX = 256.0
LOG_SIGMA_MIN = math.log(SIGMA_MIN)
LOG_SIGMA_MAX = math.log(SIGMA_MAX)
PROB_FLOOR = 2.0 ** -16

# (row parity, col parity) of each decoding step, anchor first
PHASES = ((0, 0), (1, 1), (0, 1), (1, 0))


@dataclass(frozen=True)
class QuadtreeGroups:
    height: int
    width: int
    groups: tuple  # four tuples of (row, col), raster order

    def sizes(self) -> list:
        return [len(g) for g in self.groups]

    def mask(self, k: int) -> np.ndarray:
        """(1, 1, H, W) float mask of step k (1-based)."""
        m = np.zeros((1, 1, self.height, self.width), dtype=np.float32)
        r0, c0 = PHASES[k - 1]
        m[..., r0::2, c0::2] = 1.0
        return m

    def decoded_mask(self, k: int) -> np.ndarray:
        """Positions available before step k, i.e. groups 1..k-1."""
        m = np.zeros((1, 1, self.height, self.width), dtype=np.float32)
        for j in range(1, k):
            m += self.mask(j)
        return m


def quadtree_partition(h: int, w: int) -> QuadtreeGroups:
    if h < 1 or w < 1:
        raise ValueError(f"grid must be at least 1x1, got {h}x{w}")
    groups = tuple(
        tuple((r, c) for r in range(r0, h, 2) for c in range(c0, w, 2))
        for r0, c0 in PHASES
    )
    return QuadtreeGroups(h, w, groups)


@dataclass
class EntropyParams:
    mu: Tensor
    sigma: Tensor


def sigma_from_raw(s: Tensor) -> Tensor:
    """exp of the log-scale, bounded to [SIGMA_MIN, SIGMA_MAX]."""
    return T.exp(T.bound(s, LOG_SIGMA_MIN, LOG_SIGMA_MAX))


class HyperAnalysis(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        w = cfg.hyper_width
        self.down1 = Conv2d(cfg.latent_channels, w, 3, rng, stride=2)
        self.block = StarBlock(w, rng)
        self.down2 = Conv2d(w, cfg.hyper_channels, 3, rng, stride=2)

    def forward(self, y: Tensor) -> Tensor:
        return self.down2(self.block(self.down1(y)))


class HyperSynthesis(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        w = cfg.hyper_width
        self.stem = Conv2d(cfg.hyper_channels, w, 3, rng)
        self.up1 = Conv2d(w, w, 3, rng)
        self.block = StarBlock(w, rng)
        self.up2 = Conv2d(w, cfg.hyper_feature_channels, 3, rng)

    def forward(self, z_hat: Tensor, y_hw: tuple) -> Tensor:
        x = self.stem(z_hat)
        x = self.block(self.up1(T.upsample2x(x)))
        x = self.up2(T.upsample2x(x))
        return T.crop(x, *y_hw)


class ContextBlock(Module):
    """x + dw3x3(relu6(conv1x1(x))), shared by all four steps."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.pw = Conv2d(dim, dim, 1, rng)
        self.dw = DepthwiseConv2d(dim, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.dw(T.relu6(self.pw(x)))


class ContextModel(Module):
    """Per-step adapters around a shared stack of context blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.entropy_dim
        cin = cfg.hyper_feature_channels + cfg.latent_channels
        self.latent_channels = cfg.latent_channels
        self.adapters_in = [Conv2d(cin, d, 1, rng) for _ in range(4)]
        self.blocks = [ContextBlock(d, rng) for _ in range(cfg.entropy_depth)]
        self.adapters_out = [Conv2d(d, 2 * cfg.latent_channels, 1, rng, gain=0.1) for _ in range(4)]

    def forward(self, k: int, y_hat_partial: Tensor, hyper_features: Tensor) -> EntropyParams:
        if not 1 <= k <= 4:
            raise ValueError(f"context step must be in 1..4, got {k}")
        # positions of groups >= k are hidden here, whatever the caller left in them
        h, w = y_hat_partial.shape[2:]
        visible = quadtree_partition(h, w).decoded_mask(k).astype(y_hat_partial.dtype)
        x = self.adapters_in[k - 1](T.concat([hyper_features, y_hat_partial * visible], axis=1))
        for block in self.blocks:
            x = block(x)
        mu, s = T.split(self.adapters_out[k - 1](x), [self.latent_channels] * 2, axis=1)
        return EntropyParams(mu, sigma_from_raw(s))


class ZPrior(Module):
    """Learned per-channel discretized Gaussian for z_hat."""

    def __init__(self, channels: int):
        self.mu = param(np.zeros((1, channels, 1, 1)))
        self.log_sigma = param(np.zeros((1, channels, 1, 1)))

    def params(self) -> EntropyParams:
        return EntropyParams(self.mu, sigma_from_raw(self.log_sigma))


def hyper_encode(y: Tensor, model) -> Tensor:
    return model.h_a(y)


def hyper_decode(z_hat: Tensor, model, y_hw: tuple) -> Tensor:
    return model.h_s(z_hat, y_hw)


def context_step(k: int, y_hat_partial: Tensor, hyper_features: Tensor, model) -> EntropyParams:
    """Entropy parameters for step k from the hyper features and groups < k of ``y_hat_partial``."""
    return model.context(k, y_hat_partial, hyper_features)


def quantize_shift(y, mu):
    """round_half_even(y - mu) + mu, on arrays or (straight-through) on tensors."""
    if isinstance(y, Tensor):
        return T.ste_round(y - mu) + mu
    y, mu = np.asarray(y), np.asarray(mu)
    return np.round(y - mu) + mu


def gaussian_likelihood(v: Tensor, sigma: Tensor) -> Tensor:
    """P(bin of width 1 centred at v) under N(0, sigma), computed on |v| for tail accuracy."""
    a = T.absolute(v)
    scale = sigma * math.sqrt(2.0)
    upper = T.erfc((a - 0.5) / scale)
    lower = T.erfc((a + 0.5) / scale)
    return T.scale(upper - lower, 0.5)


def rate_bits(values: Tensor, mu, sigma) -> Tensor:
    """Total -log2 probability of ``values`` (hard symbols or noisy latents) in bits."""
    v = values - mu
    p = T.maximum(gaussian_likelihood(v, sigma), PROB_FLOOR)
    return T.scale(T.sum(T.log2(p)), -1.0)


def z_prior_bits(z_values: Tensor, prior: ZPrior) -> Tensor:
    ep = prior.params()
    return rate_bits(z_values, ep.mu, ep.sigma)

