"""The full codec parameter set and its differentiable forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import Denoiser, DenoiserConfig, PixelDecoder
from .entropy import (ContextModel, HyperAnalysis, HyperSynthesis, ZPrior, quadtree_partition,
                      quantize_shift, rate_bits)
from .nn import Module
from .tensor import Tensor
from .transforms import AnalysisTransform, ModelConfig, SynthesisTransform


@dataclass
class LatentBundle:
    y: Tensor
    y_hat: Tensor
    z: Tensor
    z_hat: Tensor
    mu: Tensor
    sigma: Tensor
    phi: Tensor
    l_T: Tensor
    l_res: Tensor
    l_0: Tensor
    block_features: list = field(default_factory=list)


@dataclass
class ForwardResult:
    x_hat: Tensor
    latents: LatentBundle
    bits_y: Tensor
    bits_z: Tensor

    @property
    def bits(self) -> Tensor:
        return self.bits_y + self.bits_z


class CodecModel(Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.config = cfg
        self.g_a = AnalysisTransform(cfg, rng)
        self.h_a = HyperAnalysis(cfg, rng)
        self.h_s = HyperSynthesis(cfg, rng)
        self.z_prior = ZPrior(cfg.hyper_channels)
        self.context = ContextModel(cfg, rng)
        self.g_s = SynthesisTransform(cfg, rng)
        dcfg = DenoiserConfig(cfg.denoiser_width, cfg.denoiser_depth, cfg.alpha_bar_T)
        self.denoiser = Denoiser(cfg.decoder_latent_channels, dcfg, rng)
        self.pixel_decoder = PixelDecoder(cfg.decoder_latent_channels, cfg.pixel_width, cfg.lite_decoder, rng)

    @property
    def config_id(self) -> int:
        return self.config.config_id

    def encoder_modules(self) -> dict:
        return {"g_a": self.g_a, "h_a": self.h_a, "h_s": self.h_s, "context": self.context}

    def decoder_modules(self) -> dict:
        return {"h_s": self.h_s, "context": self.context, "g_s": self.g_s,
                "denoiser": self.denoiser, "pixel_decoder": self.pixel_decoder}

    def forward(self, x: Tensor, mode: str = "train", rng: np.random.Generator | None = None,
                noise: dict | None = None) -> ForwardResult:
        """Run the whole codec on a batch.

        mode ``train``: rate on latents plus uniform noise, straight-through
        rounding on the reconstruction path.  ``eval``: hard rounding everywhere.
        ``smooth``: the supplied fixed ``noise`` replaces rounding on both paths,
        which keeps the graph differentiable for finite-difference checks.
        """
        if mode not in ("train", "eval", "smooth"):
            raise ValueError(f"unknown mode {mode!r}")
        if rng is None:
            rng = np.random.default_rng()
        if noise is None:
            noise = {}

        def uniform(name, shape, dtype):
            if name not in noise:
                noise[name] = rng.uniform(-0.5, 0.5, size=shape).astype(dtype)
            return Tensor(noise[name])

        y = self.g_a(x)
        z = self.h_a(y)
        zp = self.z_prior.params()
        if mode == "eval":
            z_hat = quantize_shift(z, zp.mu)
            z_rate = z_hat
        elif mode == "train":
            z_hat = quantize_shift(z, zp.mu)
            z_rate = z + uniform("z", z.shape, z.dtype)
        else:
            z_hat = z_rate = z + uniform("z", z.shape, z.dtype)
        bits_z = rate_bits(z_rate, zp.mu, zp.sigma)

        h, w = y.shape[2:]
        phi = self.h_s(z_hat, (h, w))
        groups = quadtree_partition(h, w)
        y_hat = Tensor(np.zeros(y.shape, dtype=y.dtype))
        mu = sigma = None
        y_noise = uniform("y", y.shape, y.dtype) if mode != "eval" else None
        for k in range(1, 5):
            m = groups.mask(k).astype(y.dtype)
            if not m.any():
                continue
            ep = self.context(k, y_hat, phi)
            if mode == "smooth":
                step_hat = y + y_noise
            else:
                step_hat = quantize_shift(y, ep.mu)
            y_hat = y_hat + step_hat * m
            mu = ep.mu * m if mu is None else mu + ep.mu * m
            sigma = ep.sigma * m if sigma is None else sigma + ep.sigma * m
        y_rate = y_hat if mode == "eval" else y + y_noise
        bits_y = rate_bits(y_rate, mu, sigma)

        shared = self.g_s(y_hat)
        c = self.config.decoder_latent_channels
        l_T, l_res = T.split(shared, [c, c], axis=1)
        l_0, feats = self.denoiser(l_T, return_features=True)
        x_hat = self.pixel_decoder(l_0 + l_res)
        latents = LatentBundle(y, y_hat, z, z_hat, mu, sigma, phi, l_T, l_res, l_0, feats)
        return ForwardResult(x_hat, latents, bits_y, bits_z)


def build_model(cfg: ModelConfig, seed: int | None = None) -> CodecModel:
    if seed is not None:
        cfg = cfg.with_(seed=seed)
    cfg.validate()
    return CodecModel(cfg)
