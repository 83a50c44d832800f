"""Model configuration, StarBlocks and the analysis / synthesis transforms."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .nn import Conv2d, DepthwiseConv2d, Module
from .tensor import Tensor

# Encoder widths are the full-size table entries divided by 8.
_ME_DIMS = (8, 16, 24, 32, 40, 48)
_SE_DIMS = (4, 8, 16, 24, 32, 40)
# the trunk leaves y with std ~0.1-0.3 at init, well under the unit quantization step; from
# there the rate term can win and the latent collapses, so the head starts out amplified
_LATENT_GAIN = 6.0


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "ME"
    spatial_ratio: int = 32
    stage_depths: tuple = (2, 2, 2, 2, 2)
    stage_dims: tuple = (8, 16, 24, 32, 40)
    latent_channels: int = 16
    hyper_channels: int = 8
    entropy_depth: int = 4
    entropy_dim: int = 120
    decoder_latent_channels: int = 8
    synthesis_dims: tuple = (32, 24, 16)
    hyper_feature_channels: int = 32
    denoiser_width: int = 32
    denoiser_depth: int = 4
    alpha_bar_T: float = 0.25
    pixel_width: int = 32
    lite_decoder: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def num_stages(self) -> int:
        return int(round(math.log2(self.spatial_ratio)))

    @property
    def hyper_width(self) -> int:
        return max(8, self.entropy_dim // 4)

    def validate(self) -> None:
        if self.variant not in ("ME", "SE"):
            raise ValueError(f"variant must be ME or SE, got {self.variant!r}")
        if self.spatial_ratio not in (16, 32, 64):
            raise ValueError(f"spatial_ratio must be 16, 32 or 64, got {self.spatial_ratio}")
        n = self.num_stages
        if len(self.stage_dims) != n or len(self.stage_depths) != n:
            raise ValueError(
                f"spatial_ratio {self.spatial_ratio} needs {n} stages, got "
                f"{len(self.stage_depths)} depths and {len(self.stage_dims)} dims")
        if len(self.synthesis_dims) != n - 2:
            raise ValueError(f"synthesis_dims needs {n - 2} entries (one per x2 upsampling), "
                             f"got {len(self.synthesis_dims)}")
        if min(self.stage_depths) < 0 or min(self.stage_dims) < 1:
            raise ValueError("stage depths must be >= 0 and dims >= 1")
        for name in ("latent_channels", "hyper_channels", "entropy_dim", "decoder_latent_channels",
                     "hyper_feature_channels", "denoiser_width", "pixel_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.alpha_bar_T < 1.0:
            raise ValueError(f"alpha_bar_T must lie in (0, 1), got {self.alpha_bar_T}")

    def architecture_text(self) -> str:
        """Canonical key=value text of everything that shapes the parameters."""
        return "\n".join(f"{f.name}={_fmt(getattr(self, f.name))}" for f in fields(self) if f.name != "seed")

    @property
    def config_id(self) -> int:
        return zlib.crc32(self.architecture_text().encode()) & 0xFF

    def with_(self, **changes) -> ModelConfig:
        return replace(self, **changes)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


def toy_config(variant: str = "ME", spatial_ratio: int = 32, **overrides) -> ModelConfig:
    """Toy-width preset of the moderate (ME) or shallow (SE) encoder."""
    n = int(round(math.log2(spatial_ratio)))
    if variant == "ME":
        base = dict(stage_depths=(2,) * n, stage_dims=_ME_DIMS[:n], entropy_depth=4, entropy_dim=120)
    elif variant == "SE":
        base = dict(stage_depths=(1,) * n, stage_dims=_SE_DIMS[:n], entropy_depth=3, entropy_dim=64)
    else:
        raise ValueError(f"variant must be ME or SE, got {variant!r}")
    base.update(variant=variant, spatial_ratio=spatial_ratio, synthesis_dims=default_synthesis_dims(spatial_ratio))
    base.update(overrides)
    return ModelConfig(**base)


def load_config(path) -> ModelConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def parse_config(text: str) -> ModelConfig:
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(types[key], value)
    return ModelConfig(**values)


def _parse_value(kind: str, value: str):
    if kind == "tuple":
        return tuple(int(v) for v in value.split(",") if v.strip())
    if kind == "bool":
        return value.lower() in ("1", "true", "yes")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def dump_config(cfg: ModelConfig) -> str:
    return "\n".join(f"{f.name}={_fmt(getattr(cfg, f.name))}" for f in fields(cfg)) + "\n"


class StarBlock(Module):
    """x + proj(relu6(fa(dw(x))) * fb(dw(x))) with 2x expansion."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.dw = DepthwiseConv2d(channels, 3, rng)
        self.fa = Conv2d(channels, 2 * channels, 1, rng)
        self.fb = Conv2d(channels, 2 * channels, 1, rng)
        self.proj = Conv2d(2 * channels, channels, 1, rng, gain=0.5)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise T.ShapeError(f"StarBlock: input shape {x.shape} has {x.shape[1]} channels, block width is {self.channels}")
        d = self.dw(x)
        return x + self.proj(T.relu6(self.fa(d)) * self.fb(d))


class Stage(Module):
    def __init__(self, cin: int, cout: int, depth: int, rng: np.random.Generator):
        self.down = Conv2d(cin, cout, 3, rng, stride=2)
        self.blocks = [StarBlock(cout, rng) for _ in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.down(x)
        for block in self.blocks:
            x = block(x)
        return x


class AnalysisTransform(Module):
    """Pixels -> latent y at 1/spatial_ratio resolution."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.ratio = cfg.spatial_ratio
        dims = (3,) + tuple(cfg.stage_dims)
        self.stages = [Stage(dims[i], dims[i + 1], cfg.stage_depths[i], rng) for i in range(cfg.num_stages)]
        self.head = Conv2d(dims[-1], cfg.latent_channels, 1, rng, gain=_LATENT_GAIN)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % self.ratio or w % self.ratio:
            raise ValueError(f"image {h}x{w} is not a multiple of {self.ratio}; pad it first with pad_to_multiple")
        x = x - 0.5
        for stage in self.stages:
            x = stage(x)
        return self.head(x)


class SynthesisTransform(Module):
    """y_hat -> shared latent with 2*C_l channels at 1/4 image resolution."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dims = tuple(cfg.synthesis_dims)
        self.latent_channels = cfg.decoder_latent_channels
        self.stem = Conv2d(cfg.latent_channels, dims[0], 3, rng)
        self.ups = [Conv2d(dims[max(i - 1, 0)], dims[i], 3, rng) for i in range(len(dims))]
        self.blocks = [StarBlock(d, rng) for d in dims]
        self.head = Conv2d(dims[-1], 2 * cfg.decoder_latent_channels, 1, rng)

    def forward(self, y_hat: Tensor) -> Tensor:
        x = self.stem(y_hat)
        for up, block in zip(self.ups, self.blocks):
            x = block(up(T.upsample2x(x)))
        return self.head(x)


def analysis_transform(x: Tensor, model) -> Tensor:
    return model.g_a(x)


def synthesis_transform(y_hat: Tensor, model) -> tuple:
    """Return (l_T, l_res): first and second channel halves of the shared output."""
    shared = model.g_s(y_hat)
    c = model.config.decoder_latent_channels
    if shared.shape[1] != 2 * c:
        raise T.ShapeError(f"synthesis output shape {shared.shape} does not have 2*{c} channels")
    l_T, l_res = T.split(shared, [c, c], axis=1)
    return l_T, l_res


def star_block(x: Tensor, block: StarBlock) -> Tensor:
    return block(x)


def default_synthesis_dims(spatial_ratio: int) -> tuple:
    return {16: (32, 16), 32: (32, 24, 16), 64: (32, 32, 24, 16)}[spatial_ratio]

