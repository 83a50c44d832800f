"""Bitstream container and the end-to-end image encode / decode pipeline."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import coder
from . import tensor as T
from .entropy import PHASES
from .tensor import Tensor

MAGIC = b"AEIC"
VERSION = 1
HEADER_SIZE = 15
_HEADER = struct.Struct("<4sBBBHHI")


class BitstreamError(ValueError):
    pass


@dataclass(frozen=True)
class Bitstream:
    config_id: int
    lambda_id: int
    width: int
    height: int
    z_bytes: bytes
    steps: tuple  # four byte strings, quadtree step order
    version: int = VERSION

    def to_bytes(self) -> bytes:
        if len(self.steps) != 4:
            raise BitstreamError(f"need 4 step segments, got {len(self.steps)}")
        head = _HEADER.pack(MAGIC, self.version, self.config_id, self.lambda_id,
                            self.width, self.height, len(self.z_bytes))
        parts = [head, self.z_bytes]
        for seg in self.steps:
            parts += [struct.pack("<I", len(seg)), seg]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> Bitstream:
        if len(data) < HEADER_SIZE:
            raise BitstreamError(f"stream of {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
        magic, version, config_id, lambda_id, width, height, z_len = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        pos = HEADER_SIZE
        z_bytes, pos = _take(data, pos, z_len, "z segment")
        steps = []
        for k in range(4):
            if pos + 4 > len(data):
                raise BitstreamError(f"truncated length of step {k + 1} segment at byte offset {pos}")
            (n,) = struct.unpack_from("<I", data, pos)
            seg, pos = _take(data, pos + 4, n, f"step {k + 1} segment")
            steps.append(seg)
        if pos != len(data):
            raise BitstreamError(f"{len(data) - pos} unexpected bytes after the last segment")
        return cls(config_id, lambda_id, width, height, z_bytes, tuple(steps), version)

    @property
    def num_bits(self) -> int:
        return 8 * len(self.to_bytes())

    def bpp(self) -> float:
        return bits_per_pixel(self.num_bits, self.height, self.width)


def _take(data: bytes, pos: int, n: int, what: str):
    if pos + n > len(data):
        raise BitstreamError(f"truncated {what} at byte offset {pos}: need {n} bytes, have {len(data) - pos}")
    return data[pos:pos + n], pos + n


def bits_per_pixel(num_bits: int, height: int, width: int) -> float:
    return num_bits / (height * width)


def pad_to_multiple(image: np.ndarray, r: int):
    """Replicate-pad the last two axes up to multiples of r.  Returns (padded, (H, W))."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    ph, pw = -h % r, -w % r
    if not (ph or pw):
        return image, (h, w)
    widths = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, widths, mode="edge"), (h, w)


def _as_batch(x) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[:2] != (1, 3):
        raise ValueError(f"expected one RGB image of shape (3, H, W), got {x.shape}")
    return np.ascontiguousarray(x, dtype=np.float32)


def _step_view(a: np.ndarray, k: int) -> np.ndarray:
    r0, c0 = PHASES[k - 1]
    return a[0, :, r0::2, c0::2]


def _code_params(sigma: np.ndarray):
    s = np.ascontiguousarray(sigma, dtype=np.float64).ravel()
    return np.zeros_like(s), s


def encode_latents(x, model, lambda_id: int = 0):
    """Encode one image; returns (Bitstream, y_hat array) so callers can audit transport."""
    x = _as_batch(x)
    cfg = model.config
    padded, (h, w) = pad_to_multiple(x, cfg.spatial_ratio)
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError(f"image {h}x{w} is too large for the 16-bit size fields")
    if not 0 <= lambda_id <= 0xFF:
        raise ValueError(f"lambda_id must fit in a byte, got {lambda_id}")
    with T.no_grad():
        y = model.g_a(Tensor(padded)).data
        z = model.h_a(Tensor(y)).data
        zp = model.z_prior.params()
        z_mu, z_sigma = zp.mu.data, np.broadcast_to(zp.sigma.data, z.shape)
        z_sym = np.clip(np.round(z - z_mu), coder.SYMBOL_MIN, coder.SYMBOL_MAX)
        z_hat = (z_sym + z_mu).astype(z.dtype)
        z_bytes = coder.encode_gaussian(z_sym.astype(np.int64), *_code_params(z_sigma))

        phi = model.h_s(Tensor(z_hat), y.shape[2:])
        y_hat = np.zeros_like(y)
        steps = []
        for k in range(1, 5):
            ep = model.context(k, Tensor(y_hat.copy()), phi)
            mu = _step_view(ep.mu.data, k)
            sym = np.clip(np.round(_step_view(y, k) - mu), coder.SYMBOL_MIN, coder.SYMBOL_MAX)
            _step_view(y_hat, k)[...] = sym + mu
            steps.append(coder.encode_gaussian(sym.astype(np.int64), *_code_params(_step_view(ep.sigma.data, k))))
    bs = Bitstream(cfg.config_id, lambda_id, w, h, z_bytes, tuple(steps))
    return bs, y_hat


def encode_image(x, model, lambda_id: int = 0) -> Bitstream:
    return encode_latents(x, model, lambda_id)[0]


def decode_latents(bs, model) -> np.ndarray:
    """Recover y_hat from a bitstream (bytes or Bitstream)."""
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    cfg = model.config
    if bs.config_id != cfg.config_id:
        raise BitstreamError(f"stream config_id {bs.config_id} does not match model config_id {cfg.config_id}")
    r = cfg.spatial_ratio
    gh, gw = -(-bs.height // r), -(-bs.width // r)
    if gh == 0 or gw == 0:
        raise BitstreamError(f"empty image size {bs.width}x{bs.height} in header")
    zh, zw = -(-gh // 4), -(-gw // 4)
    with T.no_grad():
        zp = model.z_prior.params()
        z_shape = (1, cfg.hyper_channels, zh, zw)
        z_sigma = np.broadcast_to(zp.sigma.data, z_shape)
        z_sym = coder.decode_gaussian(bs.z_bytes, *_code_params(z_sigma)).reshape(z_shape)
        z_hat = (z_sym + zp.mu.data).astype(np.float32)
        phi = model.h_s(Tensor(z_hat), (gh, gw))
        y_hat = np.zeros((1, cfg.latent_channels, gh, gw), dtype=np.float32)
        for k in range(1, 5):
            ep = model.context(k, Tensor(y_hat.copy()), phi)
            mu = _step_view(ep.mu.data, k)
            sym = coder.decode_gaussian(bs.steps[k - 1], *_code_params(_step_view(ep.sigma.data, k)))
            _step_view(y_hat, k)[...] = sym.reshape(mu.shape) + mu
    return y_hat


def reconstruct(y_hat: np.ndarray, model) -> np.ndarray:
    """Decoder half after entropy decoding: g_s, split, one-step denoise, pixel decode."""
    c = model.config.decoder_latent_channels
    with T.no_grad():
        l_T, l_res = T.split(model.g_s(Tensor(y_hat)), [c, c], axis=1)
        return model.pixel_decoder(model.denoiser(l_T) + l_res).data


def decode_image(bs, model) -> np.ndarray:
    """Returns the reconstruction as a (3, H, W) float array in [0, 1]."""
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    x_hat = reconstruct(decode_latents(bs, model), model)
    return x_hat[0, :, :bs.height, :bs.width]
