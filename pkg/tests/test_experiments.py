"""Properties of trained toy models.  Models come from the experiment cache (trained on first use)."""
import numpy as np
import pytest

from aeic import experiments as E
from aeic import tensor as T
from aeic.analysis import rd_points
from aeic.bitstream import encode_image
from aeic.tensor import Tensor

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def sweep():
    return E.lambda_sweep()


def _stage1_losses(log):
    loss = [r.loss for r in log.rows if r.stage == 1]
    return loss[10], loss[-1]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stage1_loss_decreases(seed):
    for kind in ("ME", "SE"):
        _, log = E.study_model(kind, seed)
        early, late = _stage1_losses(log)
        assert late < early, (kind, seed, early, late)


def test_sweep_stage1_loss_decreases():
    _, log = E.stage1_model()
    early, late = _stage1_losses(log)
    assert late < early


def test_rd_points_trade_rate_for_quality(sweep):
    val = list(E.validation_images())
    pts = rd_points([("ME", lam, sweep[lam][0]) for lam in E.SWEEP_LAMBDAS], val)
    bpp = [p.bpp for p in pts]
    assert all(a > b for a, b in zip(bpp, bpp[1:]))
    assert pts[0].psnr > pts[-1].psnr


def _payload_bits(bs):
    # entropy-coded segments only; the 31 container bytes per image are not modelled by the rate term
    return 8 * (len(bs.z_bytes) + sum(len(s) for s in bs.steps))


def test_rate_proxy_tracks_coded_rate(sweep):
    val = E.validation_images()
    pixels = val.shape[0] * val.shape[2] * val.shape[3]
    for lam in E.SWEEP_LAMBDAS:
        model = sweep[lam][0]
        with T.no_grad():
            noisy = float(model.forward(Tensor(val), "train", rng=np.random.default_rng(0)).bits.data) / pixels
        hard = sum(_payload_bits(encode_image(img, model)) for img in val) / pixels
        assert abs(noisy - hard) / hard <= 0.15, (lam, noisy, hard)


def test_hrf_improves_large_images():
    pairs = E.hrf_study(seeds=(0, 1, 2))
    gains = [before["distortion"] - after["distortion"] for before, after in pairs]
    assert np.mean(gains) > 0, gains


def test_hrf_bitrate_shift_is_small_at_base_size():
    for before, after in E.hrf_study(seeds=(0, 1, 2), images=E.validation_images()):
        assert abs(after["bpp"] - before["bpp"]) <= 0.15 * before["bpp"], (before, after)
