from contextlib import contextmanager

import numpy as np
import pytest

from aeic import tensor as T
from aeic.tensor import Tensor
from aeic.transforms import toy_config


def tiny_config(variant="ME", **overrides):
    """Smallest complete pipeline used for full finite-difference checks (< 10k parameters)."""
    base = dict(stage_dims=(4, 4, 4, 4), stage_depths=(1, 1, 1, 1), latent_channels=4, hyper_channels=2,
                entropy_dim=8, entropy_depth=1, synthesis_dims=(8, 8), hyper_feature_channels=4,
                denoiser_width=4, denoiser_depth=2, pixel_width=8, decoder_latent_channels=2)
    base.update(overrides)
    return toy_config(variant, base.pop("spatial_ratio", 16), **base)


def weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar loss with random per-element weights so no gradient is trivially symmetric."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum(out * Tensor(w.astype(out.dtype)))


def module_builder(module, input_shape, fn=None, seed=0, include_input=True):
    """grad_check builder over a module's parameters (and its input) in float64."""
    def build():
        module.astype(np.float64)
        x = Tensor(np.random.default_rng(seed).standard_normal(input_shape), requires_grad=True)
        params = list(module.named_parameters())
        if include_input:
            params.append(("input", x))
        call = fn or (lambda m, v: m(v))
        return params, lambda: weighted_sum(call(module, x))
    return build


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pipeline_builder(variant="ME", seed=0, size=32, perturb=0.3):
    """grad_check builder for the whole codec (rate plus reconstruction) in ``smooth`` mode.

    Zero-initialised output convs are perturbed first so no path is trivially dead.
    """
    from aeic.model import build_model
    model = build_model(tiny_config(variant, seed=seed))
    r = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = p.data + (r.standard_normal(p.shape) * perturb * (np.abs(p.data).max() == 0)).astype(p.dtype)
    x = np.random.default_rng(seed + 1).random((1, 3, size, size))
    noise = {}

    def build():
        model.astype(np.float64)
        for k in list(noise):
            noise[k] = noise[k].astype(np.float64)

        def loss():
            res = model.forward(Tensor(x), "smooth", rng=np.random.default_rng(seed + 2), noise=noise)
            return weighted_sum(res.x_hat) + T.scale(res.bits, 0.01)
        return list(model.named_parameters()), loss
    return model, build


ACCEPTANCE = []  # (number, title, passed, detail) in the order the criteria ran


@contextmanager
def criterion(number, title):
    """Record one acceptance criterion as PASS or FAIL; ``info["detail"]`` carries the measured numbers."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        text = str(exc).strip()
        reason = text.splitlines()[0] if text else type(exc).__name__
        ACCEPTANCE.append((number, title, False, f"{info['detail']} {reason}".strip()))
        raise
    ACCEPTANCE.append((number, title, True, info["detail"]))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
