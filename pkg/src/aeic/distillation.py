"""Dual-side feature distillation from a frozen moderate-encoder teacher into a shallow student."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import build_model
from .nn import Conv2d, Module
from .tensor import Tensor
from .training import SGD, TrainConfig, TrainLog, train_loop

ENC_KEYS = ("y", "z", "phi", "y_hat")
DEC_LATENT_KEYS = ("l_T", "l_res", "l_0")


class Projection(Module):
    """1x1 conv student channels -> teacher channels; identity start when the counts match."""

    def __init__(self, cin: int, cout: int):
        self.conv = Conv2d(cin, cout, 1, None, zero=True)
        if cin == cout:
            self.conv.weight.data = np.eye(cin, dtype=np.float32).reshape(cin, cin, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class ProjectionSet(Module):
    """One projection per distilled feature pair, keyed by feature name."""

    def __init__(self, pairs: dict):
        self.names = list(pairs)
        self.projs = [Projection(cs, ct) for cs, ct in pairs.values()]

    def __getitem__(self, name: str) -> Projection:
        return self.projs[self.names.index(name)]

    def __contains__(self, name: str) -> bool:
        return name in self.names

    @classmethod
    def for_models(cls, teacher, student) -> ProjectionSet:
        tc, sc = teacher.config, student.config
        if tc.spatial_ratio != sc.spatial_ratio:
            raise ValueError(f"teacher spatial_ratio {tc.spatial_ratio} != student spatial_ratio {sc.spatial_ratio}")
        if tc.denoiser_depth != sc.denoiser_depth:
            raise ValueError("teacher and student denoisers need the same number of blocks")
        pairs = {
            "y": (sc.latent_channels, tc.latent_channels),
            "z": (sc.hyper_channels, tc.hyper_channels),
            "phi": (sc.hyper_feature_channels, tc.hyper_feature_channels),
            "y_hat": (sc.latent_channels, tc.latent_channels),
        }
        for k in DEC_LATENT_KEYS:
            pairs[k] = (sc.decoder_latent_channels, tc.decoder_latent_channels)
        for n in range(tc.denoiser_depth):
            pairs[f"h{n + 1}"] = (sc.denoiser_width, tc.denoiser_width)
        return cls(pairs)


def features(latents) -> dict:
    """Flatten a LatentBundle into the named features used by the distillation losses."""
    out = {k: getattr(latents, k) for k in ENC_KEYS + DEC_LATENT_KEYS}
    for n, h in enumerate(latents.block_features):
        out[f"h{n + 1}"] = h
    return out


def _pair_loss(name: str, teacher: Tensor, student: Tensor, projections: ProjectionSet) -> Tensor:
    if name not in projections:
        raise KeyError(f"no projection for feature {name!r}")
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    if t.shape[0] != student.shape[0] or t.shape[2:] != student.shape[2:]:
        raise T.ShapeError(f"{name}: teacher shape {t.shape} and student shape {student.shape} differ spatially")
    p = projections[name](student)
    if p.shape != t.shape:
        raise T.ShapeError(f"{name}: projected student shape {p.shape} != teacher shape {t.shape}")
    return T.mean(T.square(Tensor(t) - p))


def enc_distill_loss(teacher_feats: dict, student_feats: dict, projections: ProjectionSet) -> Tensor:
    """Sum over y, z, phi, y_hat of the mean squared error between teacher and f(student)."""
    terms = [_pair_loss(k, teacher_feats[k], student_feats[k], projections) for k in ENC_KEYS]
    return _total(terms)


def dec_distill_loss(teacher_feats: dict, student_feats: dict, projections: ProjectionSet) -> Tensor:
    """Same as the encoder loss over l_T, l_res, l_0 and every denoiser block feature."""
    blocks = sorted((k for k in teacher_feats if k.startswith("h") and k[1:].isdigit()), key=lambda k: int(k[1:]))
    terms = [_pair_loss(k, teacher_feats[k], student_feats[k], projections) for k in DEC_LATENT_KEYS + tuple(blocks)]
    return _total(terms)


def _total(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


@dataclass(frozen=True)
class DistillConfig:
    train: TrainConfig
    beta1: float = 0.5
    beta2: float = 0.001
    use_enc: bool = True
    use_dec: bool = True
    drop_fraction: float = 0.1  # final share of each stage trained without the distillation term


def distill_train(teacher, student_cfg, dataset, cfg: DistillConfig, log: TrainLog | None = None):
    """Train a fresh student under the two-stage schedule with teacher guidance.

    Stage 1 adds beta1 * L_enc, stage 2 adds beta2 * L_dec; each term is dropped
    for the last ``drop_fraction`` of its stage.  The teacher is only ever run
    without gradient tracking, so its parameters cannot change.
    Returns (student, projections, log).
    """
    if teacher.config.spatial_ratio != student_cfg.spatial_ratio:
        raise ValueError(f"teacher spatial_ratio {teacher.config.spatial_ratio} != "
                         f"student spatial_ratio {student_cfg.spatial_ratio}")
    tc = cfg.train
    student = build_model(student_cfg)
    projections = ProjectionSet.for_models(teacher, student)
    s1, s2 = tc.stage1_iters, tc.stage2_iters
    enc_until = s1 - int(round(cfg.drop_fraction * s1))
    dec_from, dec_until = s1, s1 + s2 - int(round(cfg.drop_fraction * s2))
    log = log if log is not None else TrainLog()
    named = list(student.named_parameters()) + list(projections.named_parameters("proj."))
    opt = SGD.for_named(named, tc.momentum, tc.clip_norm, tc.lr_groups)

    def run(start, end, extra):
        if end > start:
            train_loop(student, dataset, tc, log=log, start_step=start, end_step=end, optimizer=opt, extra_loss=extra)

    def teacher_feats(x):
        with T.no_grad():
            return features(teacher.forward(Tensor(x), "eval").latents)

    def enc_term(res, x):
        return T.scale(enc_distill_loss(teacher_feats(x), features(res.latents), projections), cfg.beta1)

    def dec_term(res, x):
        return T.scale(dec_distill_loss(teacher_feats(x), features(res.latents), projections), cfg.beta2)

    run(0, enc_until if cfg.use_enc else 0, enc_term)
    run(enc_until if cfg.use_enc else 0, dec_from, None)
    run(dec_from, dec_until if cfg.use_dec else dec_from, dec_term)
    run(dec_until if cfg.use_dec else dec_from, s1 + s2, None)
    return student, projections, log


def parameter_bytes(model) -> dict:
    """Byte snapshot of a model's parameters, for verifying a frozen teacher."""
    return {k: v.tobytes() for k, v in model.state_dict().items()}
