"""Rate-distortion objective, the two-stage lambda schedule and the training loop."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .tensor import Tensor

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T.copy()


def sobel(x: Tensor) -> Tensor:
    """Per-channel horizontal and vertical Sobel responses (valid convolution)."""
    c = x.shape[1]
    gx = Tensor(np.broadcast_to(_SOBEL_X, (c, 1, 3, 3)).astype(x.dtype))
    gy = Tensor(np.broadcast_to(_SOBEL_Y, (c, 1, 3, 3)).astype(x.dtype))
    return T.concat([T.depthwise_conv2d(x, gx), T.depthwise_conv2d(x, gy)], axis=1)


def mse(a: Tensor, b: Tensor) -> Tensor:
    return T.mean(T.square(a - b))


def distortion(x: Tensor, x_hat: Tensor, gammas=(32.0, 16.0, 0.0)) -> Tensor:
    """gamma1 * MSE + gamma2 * MSE of Sobel edges; the third weight is reserved and must be 0."""
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"distortion: shapes {x.shape} and {x_hat.shape} differ")
    g1, g2, g3 = gammas
    if g3:
        raise ValueError("the third distortion weight is reserved and must be 0")
    loss = T.scale(mse(x, x_hat), g1)
    if g2:
        loss = loss + T.scale(mse(sobel(x), sobel(x_hat)), g2)
    return loss


def rd_loss(x: Tensor, x_hat: Tensor, rate_bits: Tensor, lam: float, num_pixels: int,
            gammas=(32.0, 16.0, 0.0)) -> Tensor:
    """lam * bpp + distortion."""
    return T.scale(rate_bits, lam / num_pixels) + distortion(x, x_hat, gammas)


def latent_variance(y: np.ndarray) -> float:
    """Mean over channels of the per-channel variance of y (over batch and space)."""
    y = np.asarray(y, dtype=np.float64)
    return float(y.transpose(1, 0, 2, 3).reshape(y.shape[1], -1).var(axis=1).mean())


@dataclass(frozen=True)
class TrainConfig:
    lambda_S1: float = 1.0
    lambda_S2: float = 16.0
    lambda_S3: float = 16.0
    stage1_iters: int = 3000
    stage2_iters: int = 1000
    stage3_iters: int = 0
    gamma1: float = 32.0
    gamma2: float = 16.0
    gamma3: float = 0.0
    lr: tuple = ((0, 0.01),)  # (start step, learning rate) pieces
    patch_sizes: tuple = (64, 64, 128)
    batch_size: int = 8
    momentum: float = 0.9
    clip_norm: float = 1.0
    # learning-rate multipliers by parameter-name prefix; the entropy model sees
    # gradients two orders of magnitude smaller than the transforms
    lr_groups: tuple = (("h_a.", 30.0), ("h_s.", 30.0), ("context.", 30.0), ("z_prior.", 30.0))
    seed: int = 0

    def __post_init__(self):
        if not self.lambda_S1 < self.lambda_S2:
            raise ValueError(f"lambda_S1 ({self.lambda_S1}) must be smaller than lambda_S2 ({self.lambda_S2})")
        if min(self.stage1_iters, self.stage2_iters, self.stage3_iters) < 0:
            raise ValueError("iteration counts must be >= 0")
        if not self.lr or self.lr[0][0] != 0:
            raise ValueError("lr schedule must start at step 0")

    @property
    def gammas(self) -> tuple:
        return (self.gamma1, self.gamma2, self.gamma3)

    @property
    def total_iters(self) -> int:
        return self.stage1_iters + self.stage2_iters + self.stage3_iters

    def lr_at(self, step: int) -> float:
        lr = self.lr[0][1]
        for start, value in self.lr:
            if step >= start:
                lr = value
        return lr


def stage_schedule(step: int, cfg: TrainConfig):
    """(lambda, stage id, patch size) in effect at a global step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.stage1_iters:
        return cfg.lambda_S1, 1, cfg.patch_sizes[0]
    if step < cfg.stage1_iters + cfg.stage2_iters or cfg.stage3_iters == 0:
        return cfg.lambda_S2, 2, cfg.patch_sizes[1]
    return cfg.lambda_S3, 3, cfg.patch_sizes[2]


@dataclass
class TrainRow:
    step: int
    stage: int
    lam: float
    bpp: float
    distortion: float
    loss: float
    variance: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, row: TrainRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError(f"log steps must increase: {row.step} after {self.rows[-1].step}")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "stage", "lambda", "bpp", "distortion", "loss", "variance"])
            for r in self.rows:
                w.writerow([r.step, r.stage, repr(r.lam), repr(r.bpp), repr(r.distortion), repr(r.loss), repr(r.variance)])

    @classmethod
    def from_csv(cls, path) -> TrainLog:
        log = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                log.append(TrainRow(int(rec["step"]), int(rec["stage"]), float(rec["lambda"]), float(rec["bpp"]),
                                    float(rec["distortion"]), float(rec["loss"]), float(rec["variance"])))
        return log


class TrainingDiverged(FloatingPointError):
    pass


class SGD:
    """Momentum SGD with global gradient-norm clipping and optional per-tensor lr scales."""

    def __init__(self, params, momentum: float = 0.9, clip_norm: float = 1.0, scales=None):
        self.params = list(params)
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.scales = [1.0] * len(self.params) if scales is None else list(scales)
        if len(self.scales) != len(self.params):
            raise ValueError("need one lr scale per parameter")
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def for_named(cls, named_params, momentum: float = 0.9, clip_norm: float = 1.0, groups=()):
        params, scales = [], []
        for name, p in named_params:
            params.append(p)
            scales.append(next((s for prefix, s in groups if name.startswith(prefix)), 1.0))
        return cls(params, momentum, clip_norm, scales)

    def step(self, lr: float) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if not math.isfinite(norm):
            raise TrainingDiverged(f"gradient norm is {norm}")
        c = min(1.0, self.clip_norm / norm) if self.clip_norm and norm > 0 else 1.0
        for p, g, v, s in zip(self.params, grads, self.velocity, self.scales):
            v *= self.momentum
            v += c * g
            p.data -= (lr * s * v).astype(p.dtype)
            p.grad = None
        return norm


def train_step(model, batch: np.ndarray, lam: float, gammas, rng: np.random.Generator, extra_loss=None):
    """One forward/backward pass.  Returns (loss tensor, ForwardResult, distortion tensor)."""
    x = Tensor(batch)
    res = model.forward(x, "train", rng=rng)
    n, _, h, w = batch.shape
    d = distortion(x, res.x_hat, gammas)
    loss = T.scale(res.bits, lam / (n * h * w)) + d
    if extra_loss is not None:
        loss = loss + extra_loss(res, batch)
    T.backward(loss)
    return loss, res, d


def train_loop(model, dataset, cfg: TrainConfig, log: TrainLog | None = None, start_step: int = 0,
               end_step: int | None = None, checkpoint_dir=None, optimizer: SGD | None = None,
               extra_loss=None, params=None):
    """Train from ``start_step`` up to ``end_step`` (default: end of schedule).

    Returns (model, log).  ``extra_loss(result, batch)`` may add terms
    (distillation); ``params`` restricts which parameters are updated.  Batches
    and noise at step s come from a generator seeded with (seed, s), so a run
    split into segments sees the same data as an uninterrupted one.
    """
    log = log if log is not None else TrainLog()
    end_step = cfg.total_iters if end_step is None else end_step
    if optimizer is None:
        named = params if params is not None else model.named_parameters()
        optimizer = SGD.for_named(named, cfg.momentum, cfg.clip_norm, cfg.lr_groups)
    opt = optimizer
    for step in range(start_step, end_step):
        lam, stage, patch = stage_schedule(step, cfg)
        rng = np.random.default_rng([cfg.seed, step])
        batch = dataset.sample(rng, cfg.batch_size, patch)
        try:
            loss, res, d = train_step(model, batch, lam, cfg.gammas, rng, extra_loss)
        except FloatingPointError as exc:
            last = log.rows[-1] if log.rows else None
            raise TrainingDiverged(f"non-finite values at step {step}: {exc}; last finite log row: {last}") from exc
        if not math.isfinite(float(loss.data)):
            raise TrainingDiverged(f"loss is {float(loss.data)} at step {step}; last finite log row: "
                                   f"{log.rows[-1] if log.rows else None}")
        opt.step(cfg.lr_at(step))
        bpp = float(res.bits.data) / (batch.shape[0] * patch * patch)
        log.append(TrainRow(step, stage, lam, bpp, float(d.data), float(loss.data),
                            latent_variance(res.latents.y.data)))
        boundary = step + 1 in (cfg.stage1_iters, cfg.stage1_iters + cfg.stage2_iters, cfg.total_iters)
        if checkpoint_dir is not None and boundary:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_checkpoint(model, os.path.join(checkpoint_dir, f"step{step + 1:06d}_s{stage}.aeicw"))
    return model, log


def hrf_stage(model, large_patch_dataset, cfg: TrainConfig, log: TrainLog | None = None):
    """High-resolution finetuning: ``stage3_iters`` steps at ``lambda_S3`` and the large patch size."""
    if cfg.stage3_iters == 0:
        return model
    start = cfg.stage1_iters + cfg.stage2_iters
    train_loop(model, large_patch_dataset, cfg, log=log, start_step=start, end_step=cfg.total_iters)
    return model
