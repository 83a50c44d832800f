"""Variance study, entropy arithmetic, complexity accounting, RD curves and latency benchmarks."""
from __future__ import annotations

import csv
import io
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .bitstream import decode_image, encode_image, encode_latents, pad_to_multiple
from .decoder import Denoiser, PixelDecoder
from .entropy import ContextBlock, ContextModel, HyperAnalysis, HyperSynthesis
from .imageio import ppm_read
from .nn import Conv2d, DepthwiseConv2d
from .tensor import Tensor
from .training import distortion
from .transforms import AnalysisTransform, StarBlock, Stage, SynthesisTransform


# -- corpus helpers ----------------------------------------------------------

def load_corpus(image_dir) -> list:
    paths = sorted(Path(image_dir).glob("*.ppm"))
    if not paths:
        raise ValueError(f"no .ppm images in {image_dir}")
    return [ppm_read(p) for p in paths]


def _images(images_or_dir) -> list:
    if isinstance(images_or_dir, (str, os.PathLike)):
        return load_corpus(images_or_dir)
    images = list(images_or_dir)
    if not images:
        raise ValueError("empty image corpus")
    return images


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("AEIC_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items) -> list:
    """Ordered map over independent per-image pipelines, capped by AEIC_THREADS."""
    n = _workers()
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- theory helpers ----------------------------------------------------------

def diff_entropy_bits(sigma_sq: float) -> float:
    """Differential entropy of a Gaussian in bits: 0.5 * log2(2 pi e sigma^2)."""
    if sigma_sq <= 0:
        raise ValueError(f"variance must be positive, got {sigma_sq}")
    return 0.5 * math.log2(2.0 * math.pi * math.e * sigma_sq)


def codebook_size(rate_bits: float) -> float:
    """Number of codewords 2^R needed at R bits per symbol."""
    return 2.0 ** rate_bits


# -- variance study ----------------------------------------------------------

def mean_channel_variance(y: np.ndarray) -> float:
    """Mean over channels of each channel's variance across images and positions."""
    y = np.asarray(y, dtype=np.float64)
    return float(y.transpose(1, 0, 2, 3).reshape(y.shape[1], -1).var(axis=1).mean())


def _latent_and_bits(model, img):
    bs, _ = encode_latents(img, model)
    padded, _ = pad_to_multiple(np.asarray(img, dtype=np.float32)[None], model.config.spatial_ratio)
    with T.no_grad():
        y = model.g_a(Tensor(padded)).data
    return y, bs.num_bits, img.shape[1] * img.shape[2]


def variance_report(models, images_or_dir, out_csv=None) -> list:
    """Rows (lambda, mean_var, bpp) for each (lambda, model) pair.

    Variance is pooled over every y element of the corpus (all images must share
    a size, or be padded to one); bpp is total coded bits over total pixels.
    """
    images = _images(images_or_dir)
    rows = []
    for lam, model in models:
        results = _map(lambda im: _latent_and_bits(model, im), images)
        ys = [r[0] for r in results]
        if len({y.shape for y in ys}) == 1:
            var = mean_channel_variance(np.concatenate(ys))
        else:
            var = float(np.mean([mean_channel_variance(y) for y in ys]))
        bpp = sum(r[1] for r in results) / sum(r[2] for r in results)
        rows.append((float(lam), var, bpp))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "mean_var", "bpp"])
            for lam, var, bpp in rows:
                w.writerow([repr(lam), repr(var), repr(bpp)])
    return rows


# -- complexity --------------------------------------------------------------

def _out_hw(h, w, conv):
    k, s, p = conv.kernel_size, conv.stride, conv.padding
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _macs(module, c, h, w):
    """(MACs, (c, h, w) of the output) for one module at input size (c, h, w)."""
    if isinstance(module, Conv2d):
        ho, wo = _out_hw(h, w, module)
        k = module.kernel_size
        return module.in_channels * module.out_channels * k * k * ho * wo, (module.out_channels, ho, wo)
    if isinstance(module, DepthwiseConv2d):
        ho, wo = _out_hw(h, w, module)
        k = module.kernel_size
        return module.in_channels * k * k * ho * wo, (c, ho, wo)
    if isinstance(module, StarBlock):
        total, (_, hd, wd) = _macs(module.dw, c, h, w)
        for conv in (module.fa, module.fb):
            total += _macs(conv, c, hd, wd)[0]
        total += _macs(module.proj, 2 * c, hd, wd)[0]
        return total, (c, h, w)
    if isinstance(module, ContextBlock):
        a, _ = _macs(module.pw, c, h, w)
        b, _ = _macs(module.dw, c, h, w)
        return a + b, (c, h, w)
    if isinstance(module, Stage):
        return _chain([module.down] + module.blocks, c, h, w)
    if isinstance(module, AnalysisTransform):
        return _chain(module.stages + [module.head], c, h, w)
    if isinstance(module, HyperAnalysis):
        return _chain([module.down1, module.block, module.down2], c, h, w)
    if isinstance(module, HyperSynthesis):
        m1, (c1, h1, w1) = _macs(module.stem, c, h, w)
        m2, (c2, h2, w2) = _chain([module.up1, module.block], c1, 2 * h1, 2 * w1)
        m3, out = _macs(module.up2, c2, 2 * h2, 2 * w2)
        return m1 + m2 + m3, out
    if isinstance(module, SynthesisTransform):
        total, (c, h, w) = _macs(module.stem, c, h, w)
        for up, block in zip(module.ups, module.blocks):
            m, (c, h, w) = _chain([up, block], c, 2 * h, 2 * w)
            total += m
        m, out = _macs(module.head, c, h, w)
        return total + m, out
    if isinstance(module, Denoiser):
        return _chain([module.conv_in] + module.blocks + [module.conv_out], c, h, w)
    if isinstance(module, PixelDecoder):
        m1, (c1, h1, w1) = _macs(module.stem, c, h, w)
        m2, (c2, h2, w2) = _macs(module.up1, c1, 2 * h1, 2 * w1)
        m3, (c3, h3, w3) = _macs(module.up2, c2, 2 * h2, 2 * w2)
        m4, out = _macs(module.head, c3, h3, w3)
        return m1 + m2 + m3 + m4, out
    raise TypeError(f"no MAC rule for {type(module).__name__}")


def _chain(modules, c, h, w):
    total = 0
    for m in modules:
        n, (c, h, w) = _macs(m, c, h, w)
        total += n
    return total, (c, h, w)


def _context_macs(ctx: ContextModel, cin: int, h: int, w: int) -> int:
    total = 0
    for k in range(4):
        a, (d, _, _) = _macs(ctx.adapters_in[k], cin, h, w)
        b, _ = _chain(ctx.blocks, d, h, w)
        c, _ = _macs(ctx.adapters_out[k], d, h, w)
        total += a + b + c
    return total


def macs_per_pixel(model, height: int, width: int) -> dict:
    """Analytic multiply-accumulates per input pixel, per component.

    Keys: g_a, h_a, h_s, context, g_s, denoiser, pixel_decoder, plus the
    aggregates ``encoder`` (g_a) and ``total``.  Elementwise ops are free.
    """
    cfg = model.config
    r = cfg.spatial_ratio
    if height % r or width % r:
        raise ValueError(f"{height}x{width} is not a multiple of {r}")
    hp = height * width
    out = {}
    macs, (cy, gh, gw) = _macs(model.g_a, 3, height, width)
    out["g_a"] = macs
    macs, (cz, zh, zw) = _macs(model.h_a, cy, gh, gw)
    out["h_a"] = macs
    out["h_s"] = _macs(model.h_s, cz, zh, zw)[0]
    out["context"] = _context_macs(model.context, cfg.hyper_feature_channels + cfg.latent_channels, gh, gw)
    macs, (cl2, lh, lw) = _macs(model.g_s, cy, gh, gw)
    out["g_s"] = macs
    out["denoiser"] = _macs(model.denoiser, cl2 // 2, lh, lw)[0]
    out["pixel_decoder"] = _macs(model.pixel_decoder, cl2 // 2, lh, lw)[0]
    table = {k: v / hp for k, v in out.items()}
    table["encoder"] = table["g_a"]
    table["total"] = sum(v for k, v in table.items() if k != "encoder")
    return table


# -- quality metrics ---------------------------------------------------------

def psnr(x, x_hat) -> float:
    m = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)) ** 2))
    if m == 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / m)


def ssim_proxy(x, x_hat) -> float:
    """Single-scale SSIM with an 8x8 box window on [0, 1] images, averaged over channels."""
    from scipy.ndimage import uniform_filter
    a, b = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(a.shape[0]):
        u, v = a[ch], b[ch]
        mu_u, mu_v = uniform_filter(u, 8), uniform_filter(v, 8)
        suu = uniform_filter(u * u, 8) - mu_u ** 2
        svv = uniform_filter(v * v, 8) - mu_v ** 2
        suv = uniform_filter(u * v, 8) - mu_u * mu_v
        s = ((2 * mu_u * mu_v + c1) * (2 * suv + c2)) / ((mu_u ** 2 + mu_v ** 2 + c1) * (suu + svv + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


# -- RD curves ---------------------------------------------------------------

@dataclass(frozen=True)
class RdPoint:
    model_id: str
    lam: float
    bpp: float
    psnr: float
    ssim_proxy: float
    distortion_loss: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        if not math.isfinite(self.psnr):
            raise ValueError("psnr must be finite")


def _code_one(model, img, gammas):
    bs = encode_image(img, model)
    x_hat = decode_image(bs.to_bytes(), model)
    d = float(distortion(Tensor(img[None]), Tensor(x_hat[None].astype(np.float32)), gammas).data)
    mse = float(np.mean((img.astype(np.float64) - x_hat) ** 2))
    return bs.num_bits, img.shape[1] * img.shape[2], mse, ssim_proxy(img, x_hat), d


def rd_points(models, images_or_dir, gammas=(32.0, 2.0, 0.0)) -> list:
    """One RdPoint per (model_id, lambda, model); PSNR from the corpus-mean MSE."""
    images = _images(images_or_dir)
    points = []
    for model_id, lam, model in models:
        res = _map(lambda im: _code_one(model, im, gammas), images)
        bits, pixels = sum(r[0] for r in res), sum(r[1] for r in res)
        mse = float(np.mean([r[2] for r in res]))
        points.append(RdPoint(str(model_id), float(lam), bits / pixels,
                              10.0 * math.log10(1.0 / max(mse, 1e-12)),
                              float(np.mean([r[3] for r in res])), float(np.mean([r[4] for r in res]))))
    return points


RD_HEADER = ["model_id", "lambda", "bpp", "psnr", "ssim_single_scale_proxy", "distortion_loss"]


def rd_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RD_HEADER)
    for p in points:
        w.writerow([p.model_id, repr(p.lam), repr(p.bpp), repr(p.psnr), repr(p.ssim_proxy), repr(p.distortion_loss)])
    return buf.getvalue()


def rd_svg(points, metric: str = "psnr", width: int = 480, height: int = 360) -> str:
    """Polyline plot of ``metric`` against bpp, one line per model_id."""
    if not points:
        raise ValueError("no points to plot")
    xs = [p.bpp for p in points]
    ys = [getattr(p, metric) for p in points]
    x0, x1 = _span(xs)
    y0, y1 = _span(ys)
    ml, mr, mt, mb = 60, 20, 20, 45
    pw, ph = width - ml - mr, height - mt - mb

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for i in range(5):
        tx = x0 + (x1 - x0) * i / 4
        ty = y0 + (y1 - y0) * i / 4
        out.append(f'<line x1="{px(tx):.2f}" y1="{mt + ph}" x2="{px(tx):.2f}" y2="{mt + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(tx):.2f}" y="{mt + ph + 18}" font-size="10" text-anchor="middle">{tx:.4g}</text>')
        out.append(f'<line x1="{ml - 5}" y1="{py(ty):.2f}" x2="{ml}" y2="{py(ty):.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{py(ty) + 3:.2f}" font-size="10" text-anchor="end">{ty:.4g}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" font-size="12" text-anchor="middle">bpp</text>')
    out.append(f'<text x="14" y="{mt + ph / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2})">{metric}</text>')
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    groups = {}
    for p in points:
        groups.setdefault(p.model_id, []).append(p)
    for i, (name, pts) in enumerate(groups.items()):
        pts = sorted(pts, key=lambda p: p.bpp)
        coords = " ".join(f"{px(p.bpp):.2f},{py(getattr(p, metric)):.2f}" for p in pts)
        color = colors[i % len(colors)]
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for p in pts:
            out.append(f'<circle cx="{px(p.bpp):.2f}" cy="{py(getattr(p, metric)):.2f}" r="3" fill="{color}"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 14 * i}" font-size="11" fill="{color}">{_xml(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _span(vals):
    lo, hi = min(vals), max(vals)
    if hi == lo:
        pad = abs(lo) * 0.05 or 1.0
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def rd_curve(models, images_or_dir, out_prefix, gammas=(32.0, 2.0, 0.0)) -> list:
    """Write ``<out_prefix>.csv`` and ``<out_prefix>.svg``; returns the RdPoints."""
    points = rd_points(models, images_or_dir, gammas)
    with open(f"{out_prefix}.csv", "w", newline="") as fh:
        fh.write(rd_csv(points))
    with open(f"{out_prefix}.svg", "w") as fh:
        fh.write(rd_svg(points))
    return points


# -- latency -----------------------------------------------------------------

def bench_latency(model, height: int, width: int, reps: int, seed: int = 0) -> dict:
    """Median wall-clock milliseconds of full encode (with entropy coding) and decode."""
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    img = np.random.default_rng(seed).random((3, height, width)).astype(np.float32)
    data = encode_image(img, model).to_bytes()  # warm-up, also compiles the coder
    decode_image(data, model)
    enc, dec = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        data = encode_image(img, model).to_bytes()
        t1 = time.perf_counter()
        decode_image(data, model)
        t2 = time.perf_counter()
        enc.append((t1 - t0) * 1e3)
        dec.append((t2 - t1) * 1e3)
    return {"encode_ms": statistics.median(enc), "decode_ms": statistics.median(dec),
            "H": height, "W": width, "reps": reps}
