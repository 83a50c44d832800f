"""Toy-scale experiments (lambda sweep, bitrate pruning, distillation study) with an on-disk cache.

Trained models are cached under ``$AEIC_CACHE`` (default ``~/.cache/aeic``),
keyed by the full model and training configuration plus a digest of this
package's numerical source, so any change to the model or training code
retrains from scratch.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import PatchDataset, make_textures
from .distillation import DistillConfig, distill_train
from .model import build_model
from .tensor import Tensor
from .training import TrainConfig, TrainLog, distortion, hrf_stage, train_loop
from .transforms import ModelConfig, dump_config, toy_config

GAMMAS = (32.0, 2.0, 0.0)
SWEEP_LAMBDAS = (1.0, 4.0, 16.0)


@dataclass(frozen=True)
class DataSpec:
    n: int = 256
    size: int = 96
    seed: int = 1

    def build(self) -> PatchDataset:
        return PatchDataset.procedural(self.n, self.size, self.seed)


def validation_images(n: int = 32, size: int = 64, seed: int = 1234) -> np.ndarray:
    return make_textures(n, size, seed)


def base_train_config(**changes) -> TrainConfig:
    cfg = TrainConfig(lambda_S1=1.0, lambda_S2=16.0, stage1_iters=3000, stage2_iters=1000,
                      gamma1=GAMMAS[0], gamma2=GAMMAS[1], gamma3=GAMMAS[2], lr=((0, 0.05),), batch_size=8)
    return replace(cfg, **changes)


# -- cache -------------------------------------------------------------------

def cache_dir() -> Path:
    return Path(os.environ.get("AEIC_CACHE", Path.home() / ".cache" / "aeic"))


_DIGEST = None
# modules whose code can change a trained model
_NUMERIC_SOURCES = ("tensor", "nn", "transforms", "entropy", "decoder", "model", "training", "data",
                    "distillation", "checkpoint")


def source_digest() -> str:
    global _DIGEST
    if _DIGEST is None:
        h = hashlib.sha256()
        for name in _NUMERIC_SOURCES:
            p = Path(__file__).parent / f"{name}.py"
            h.update(p.name.encode())
            h.update(p.read_bytes())
        _DIGEST = h.hexdigest()[:16]
    return _DIGEST


def _key(*parts) -> str:
    text = json.dumps([source_digest()] + [_jsonable(p) for p in parts], sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:24]


def _jsonable(obj):
    if isinstance(obj, ModelConfig):
        return dump_config(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _cached_run(key: str, model_cfg: ModelConfig, run, use_cache: bool = True):
    """run() -> (model, log); cached as checkpoint + CSV + timing JSON under ``key``."""
    d = cache_dir()
    ckpt, log_csv = d / f"{key}.aeicw", d / f"{key}.csv"
    if use_cache and ckpt.exists() and log_csv.exists():
        model = load_checkpoint(build_model(model_cfg), ckpt)
        return model, TrainLog.from_csv(log_csv)
    t0 = time.perf_counter()
    model, log = run()
    seconds = time.perf_counter() - t0
    if use_cache:
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, ckpt)
        log.to_csv(log_csv)
        (d / f"{key}.json").write_text(json.dumps({"train_seconds": seconds, "cpu_count": os.cpu_count()}))
    _TIMES[key] = seconds
    return model, log


_TIMES: dict = {}


def train_seconds(key: str) -> float | None:
    """Wall-clock training time of a cached run, if it was recorded."""
    if key in _TIMES:
        return _TIMES[key]
    p = cache_dir() / f"{key}.json"
    return json.loads(p.read_text())["train_seconds"] if p.exists() else None


def stage1_key(variant: str = "ME", seed: int = 0, data: DataSpec = DataSpec(), **train) -> str:
    tcfg = base_train_config(seed=seed, **train)
    return _key("stage1", toy_config(variant, 32, seed=seed), replace(tcfg, stage2_iters=0, lambda_S2=1e9), data)


def stage2_key(lam: float, variant: str = "ME", seed: int = 0, data: DataSpec = DataSpec(), **train) -> str:
    return _key("stage2", toy_config(variant, 32, seed=seed), base_train_config(seed=seed, **train), lam, data)


# -- evaluation --------------------------------------------------------------

def evaluate(model, images: np.ndarray, lam: float, gammas=GAMMAS, batch: int = 16) -> dict:
    """Hard-quantized validation metrics: bpp (entropy-model estimate), distortion, rd_loss, variance."""
    bits = dist = 0.0
    ys = []
    n = len(images)
    with T.no_grad():
        for i in range(0, n, batch):
            x = images[i:i + batch]
            res = model.forward(Tensor(x), "eval")
            bits += float(res.bits.data)
            dist += float(distortion(Tensor(x), res.x_hat, gammas).data) * len(x)
            ys.append(res.latents.y.data)
    pixels = n * images.shape[2] * images.shape[3]
    y = np.concatenate(ys).astype(np.float64)
    var = float(y.transpose(1, 0, 2, 3).reshape(y.shape[1], -1).var(axis=1).mean())
    bpp, d = bits / pixels, dist / n
    return {"bpp": bpp, "distortion": d, "rd_loss": lam * bpp + d, "variance": var}


# -- lambda sweep / bitrate pruning ------------------------------------------

def stage1_model(variant: str = "ME", seed: int = 0, data: DataSpec = DataSpec(), use_cache: bool = True, **train):
    """Stage 1 only (lambda_S1 for stage1_iters steps)."""
    mcfg = toy_config(variant, 32, seed=seed)
    tcfg = base_train_config(seed=seed, **train)
    key = stage1_key(variant, seed, data, **train)

    def run():
        return train_loop(build_model(mcfg), data.build(), tcfg, end_step=tcfg.stage1_iters)

    return _cached_run(key, mcfg, run, use_cache)


def stage2_model(lam: float, variant: str = "ME", seed: int = 0, data: DataSpec = DataSpec(),
                 use_cache: bool = True, **train):
    """Continue the stage-1 model for stage2_iters steps at ``lam``.

    ``lam == lambda_S1`` gives the control run that simply keeps training at the
    stage-1 lambda for the same number of steps.
    """
    base, _ = stage1_model(variant, seed, data, use_cache, **train)
    mcfg = base.config
    tcfg = base_train_config(seed=seed, **train)
    if lam > tcfg.lambda_S1:
        cont = replace(tcfg, lambda_S2=lam)
    else:
        cont = replace(tcfg, stage1_iters=tcfg.stage1_iters + tcfg.stage2_iters, stage2_iters=0,
                       lambda_S2=tcfg.lambda_S1 * 16)
    key = stage2_key(lam, variant, seed, data, **train)

    def run():
        return train_loop(base, data.build(), cont, start_step=tcfg.stage1_iters,
                          end_step=tcfg.stage1_iters + tcfg.stage2_iters)

    return _cached_run(key, mcfg, run, use_cache)


def lambda_sweep(lambdas=SWEEP_LAMBDAS, variant: str = "ME", seed: int = 0, use_cache: bool = True, **train) -> dict:
    """{lambda: (model, log)} all sharing one stage-1 run."""
    return {lam: stage2_model(lam, variant, seed, use_cache=use_cache, **train) for lam in lambdas}


def moving_average(x: np.ndarray, window: int = 100) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < window:
        raise ValueError(f"need at least {window} values, got {len(x)}")
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window


def pruning_dynamics(stage1_log: TrainLog, stage2_log: TrainLog, window: int = 100, horizon: int = 1000) -> dict:
    """Block means of bpp and distortion: the last window before the switch, then each window after it."""
    pre_b, pre_d = stage1_log.column("bpp")[-window:], stage1_log.column("distortion")[-window:]
    post_b, post_d = stage2_log.column("bpp")[:horizon], stage2_log.column("distortion")[:horizon]
    blocks = len(post_b) // window
    bpp = [pre_b.mean()] + [post_b[i * window:(i + 1) * window].mean() for i in range(blocks)]
    dist = [pre_d.mean()] + [post_d[i * window:(i + 1) * window].mean() for i in range(blocks)]
    return {"bpp": np.array(bpp), "distortion": np.array(dist)}


# -- distillation study ------------------------------------------------------

VARIANTS = ("ME", "SE+Lenc+Ldec", "SE+Lenc", "SE")


def student_train_config(seed: int, **changes) -> TrainConfig:
    """Students follow the teacher's own two-stage schedule."""
    return base_train_config(seed=seed, **changes)


def teacher_model(use_cache: bool = True):
    """The moderate-encoder model at the end of its full two-stage schedule (lambda 1 -> 16)."""
    return stage2_model(16.0, "ME", 0, use_cache=use_cache)[0]


def study_model(kind: str, seed: int, data: DataSpec = DataSpec(), use_cache: bool = True, teacher=None, **changes):
    """One row entry of the distillation study; "ME" is the moderate encoder itself (seed 0 is the teacher)."""
    tcfg = student_train_config(seed, **changes)
    if kind == "ME":
        _, s1 = stage1_model("ME", seed, data, use_cache, **changes)
        model, s2 = stage2_model(tcfg.lambda_S2, "ME", seed, data, use_cache, **changes)
        return model, TrainLog(s1.rows + s2.rows)
    mcfg = toy_config("SE", 32, seed=seed)
    use_enc, use_dec = {"SE": (False, False), "SE+Lenc": (True, False), "SE+Lenc+Ldec": (True, True)}[kind]
    dcfg = DistillConfig(tcfg, use_enc=use_enc, use_dec=use_dec)
    key = _key("study", kind, mcfg, dcfg, data)

    def run():
        t = teacher if teacher is not None else teacher_model(use_cache)
        student, _, log = distill_train(t, mcfg, data.build(), dcfg)
        return student, log

    return _cached_run(key, mcfg, run, use_cache)


def distillation_study(seeds=(0, 1, 2), use_cache: bool = True, lam: float = 16.0) -> dict:
    """{variant: [validation rd_loss per seed]} at the stage-2 lambda."""
    val = validation_images()
    teacher = None
    out = {}
    for kind in VARIANTS:
        out[kind] = []
        for s in seeds:
            if kind.startswith("SE+") and teacher is None:
                teacher = teacher_model(use_cache)
            model, _ = study_model(kind, s, use_cache=use_cache, teacher=teacher)
            out[kind].append(evaluate(model, val, lam)["rd_loss"])
    return out


# -- high-resolution finetuning ----------------------------------------------

HRF_DATA = DataSpec(n=96, size=160, seed=2)


def hrf_validation_images() -> np.ndarray:
    return validation_images(n=16, size=128, seed=4321)


def hrf_model(seed: int, use_cache: bool = True):
    """The scratch SE study model after a stage-3 run at 128x128 patches."""
    base, _ = study_model("SE", seed, use_cache=use_cache)
    tcfg = student_train_config(seed, stage3_iters=300)
    key = _key("hrf", base.config, tcfg, HRF_DATA)

    def run():
        model = build_model(base.config)
        model.load_state_dict({k: v.copy() for k, v in base.state_dict().items()})
        log = TrainLog()
        hrf_stage(model, HRF_DATA.build(), tcfg, log)
        return model, log

    return _cached_run(key, base.config, run, use_cache)


def hrf_study(seeds=(0, 1, 2), use_cache: bool = True, lam: float = 16.0, images=None) -> list:
    """Per seed: (metrics without stage 3, metrics with it).

    ``images`` defaults to the 128x128 validation set; pass the base-size set
    to see what stage 3 does at the training resolution.
    """
    val = hrf_validation_images() if images is None else images
    out = []
    for s in seeds:
        base, _ = study_model("SE", s, use_cache=use_cache)
        tuned, _ = hrf_model(s, use_cache)
        out.append((evaluate(base, val, lam), evaluate(tuned, val, lam)))
    return out
