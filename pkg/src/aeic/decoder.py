"""One-step denoiser and lite pixel decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import Tensor
from .transforms import StarBlock


@dataclass(frozen=True)
class DenoiserConfig:
    width: int = 32
    depth: int = 4
    alpha_bar_T: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.alpha_bar_T < 1.0:
            raise ValueError(f"alpha_bar_T must lie in (0, 1), got {self.alpha_bar_T}")


class Denoiser(Module):
    """Unconditional direct map l_T -> l_0; also exposes per-block features."""

    def __init__(self, latent_channels: int, cfg: DenoiserConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.conv_in = Conv2d(latent_channels, cfg.width, 1, rng)
        self.blocks = [StarBlock(cfg.width, rng) for _ in range(cfg.depth)]
        self.conv_out = Conv2d(cfg.width, latent_channels, 1, rng, zero=True)

    def forward(self, l_T: Tensor, return_features: bool = False):
        h = self.conv_in(l_T)
        feats = []
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        l_0 = self.conv_out(h)
        return (l_0, feats) if return_features else l_0


def one_step_denoise(l_T: Tensor, denoiser: Denoiser) -> Tensor:
    return denoiser(l_T)


def conditional_denoise_wrapper(l_T: Tensor, eps_fn, alpha_bar_T: float) -> Tensor:
    """Clean latent from a single noise prediction: (l_T - sqrt(1-a) eps(l_T)) / sqrt(a)."""
    if not 0.0 < alpha_bar_T < 1.0:
        raise ValueError(f"alpha_bar_T must lie in (0, 1), got {alpha_bar_T}")
    eps = eps_fn(l_T)
    return T.scale(l_T - T.scale(eps, math.sqrt(1.0 - alpha_bar_T)), 1.0 / math.sqrt(alpha_bar_T))


def reparameterize_direct(eps_net: Denoiser, alpha_bar_T: float, rng: np.random.Generator | None = None) -> Denoiser:
    """Fold a noise-predicting net and a fixed alpha_bar_T into one direct denoiser.

    The result computes l_T / sqrt(a) - sqrt((1-a)/a) * eps(l_T) with a single
    forward pass: the output conv is rescaled and a skip path carries the
    l_T / sqrt(a) term.
    """
    if not 0.0 < alpha_bar_T < 1.0:
        raise ValueError(f"alpha_bar_T must lie in (0, 1), got {alpha_bar_T}")
    return _DirectDenoiser(eps_net, alpha_bar_T)


class _DirectDenoiser(Module):
    def __init__(self, eps_net: Denoiser, alpha_bar_T: float):
        a = alpha_bar_T
        c = eps_net.conv_out.out_channels
        self.conv_in = eps_net.conv_in
        self.blocks = eps_net.blocks
        k = -math.sqrt((1.0 - a) / a)
        self.conv_out = Conv2d(eps_net.conv_out.in_channels, c, 1, None, zero=True)
        self.conv_out.weight.data = (eps_net.conv_out.weight.data.astype(np.float64) * k).astype(eps_net.conv_out.weight.dtype)
        self.conv_out.bias.data = (eps_net.conv_out.bias.data.astype(np.float64) * k).astype(eps_net.conv_out.bias.dtype)
        # skip path: identity 1x1 conv scaled by 1/sqrt(a)
        eye = np.eye(c).reshape(c, c, 1, 1) / math.sqrt(a)
        self.skip = Conv2d(c, c, 1, None, zero=True)
        self.skip.weight.data = eye.astype(eps_net.conv_out.weight.dtype)

    def forward(self, l_T: Tensor) -> Tensor:
        h = self.conv_in(l_T)
        for block in self.blocks:
            h = block(h)
        return self.skip(l_T) + self.conv_out(h)


class PixelDecoder(Module):
    """Fused latent at 1/4 resolution -> RGB in [0, 1] via two (nearest x2 + conv) stages."""

    def __init__(self, latent_channels: int, width: int, lite: bool, rng: np.random.Generator):
        w = width // 2 if lite else width
        self.width = w
        self.stem = Conv2d(latent_channels, w, 3, rng)
        self.up1 = Conv2d(w, w, 3, rng)
        self.up2 = Conv2d(w, max(w // 2, 4), 3, rng)
        self.head = Conv2d(max(w // 2, 4), 3, 1, rng, zero=True)

    def forward(self, fused: Tensor) -> Tensor:
        x = T.gelu_approx(self.stem(fused))
        x = T.gelu_approx(self.up1(T.upsample2x(x)))
        x = T.gelu_approx(self.up2(T.upsample2x(x)))
        return T.clamp(self.head(x) + 0.5, 0.0, 1.0)


def pixel_decode(l_0: Tensor, l_res: Tensor, decoder: PixelDecoder) -> Tensor:
    if l_0.shape != l_res.shape:
        raise T.ShapeError(f"pixel_decode: l_0 shape {l_0.shape} != l_res shape {l_res.shape}")
    return decoder(l_0 + l_res)
