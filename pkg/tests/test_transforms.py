import numpy as np
import pytest

from aeic import tensor as T
from aeic.checkpoint import serialize_state
from aeic.gradcheck import grad_check
from aeic.model import build_model
from aeic.tensor import Tensor
from aeic.transforms import (ModelConfig, StarBlock, analysis_transform, dump_config, parse_config, star_block,
                             synthesis_transform, toy_config)

from conftest import module_builder


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0


def test_star_block_zero_branch_is_identity(rng):
    block = StarBlock(8, rng)
    _zero(block)
    x = Tensor(rng.standard_normal((1, 8, 16, 16)).astype(np.float32))
    out = star_block(x, block)
    assert out.shape == (1, 8, 16, 16)
    np.testing.assert_array_equal(out.data, x.data)


def test_star_block_only_proj_zero_is_identity(rng):
    block = StarBlock(4, rng)
    _zero(block.proj)
    x = Tensor(rng.standard_normal((2, 4, 5, 5)).astype(np.float32))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_star_block_channel_mismatch(rng):
    with pytest.raises(T.ShapeError):
        StarBlock(8, rng)(Tensor(np.zeros((1, 4, 8, 8))))


@pytest.mark.parametrize("seed", range(3))
def test_star_block_gradients(seed):
    block = StarBlock(3, np.random.default_rng(seed))
    res = grad_check(module_builder(block, (1, 3, 5, 5), seed=seed))
    assert res.passed, res
    assert res.skipped < 0.05 * res.checked


def test_analysis_shape_64(rng):
    model = build_model(toy_config("ME"))
    y = analysis_transform(Tensor(rng.random((1, 3, 64, 64)).astype(np.float32)), model)
    assert y.shape == (1, 16, 2, 2)


def test_analysis_shape_512():
    model = build_model(toy_config("SE"))
    y = analysis_transform(Tensor(np.full((1, 3, 512, 512), 0.3, dtype=np.float32)), model)
    assert y.shape == (1, model.config.latent_channels, 16, 16)


def test_analysis_is_deterministic(rng):
    model = build_model(toy_config("ME"))
    x = Tensor(rng.random((1, 3, 64, 96)).astype(np.float32))
    assert analysis_transform(x, model).data.tobytes() == analysis_transform(x, model).data.tobytes()


def test_analysis_requires_padding():
    model = build_model(toy_config("SE"))
    with pytest.raises(ValueError, match="pad"):
        analysis_transform(Tensor(np.zeros((1, 3, 48, 64))), model)


@pytest.mark.parametrize("ratio", [16, 32, 64])
def test_shape_law(ratio, rng):
    model = build_model(toy_config("SE", ratio))
    h, w = 2 * ratio, 3 * ratio if ratio < 64 else ratio
    res = model.forward(Tensor(rng.random((1, 3, h, w)).astype(np.float32)), "eval")
    assert res.latents.y.shape[2:] == (h // ratio, w // ratio)
    assert res.latents.l_T.shape[2:] == (h // 4, w // 4)
    assert res.latents.l_T.shape == res.latents.l_res.shape
    assert res.x_hat.shape == (1, 3, h, w)


def test_synthesis_split_convention(rng):
    model = build_model(toy_config("ME"))
    y_hat = Tensor(rng.standard_normal((1, 16, 2, 2)).astype(np.float32))
    shared = model.g_s(y_hat)
    l_T, l_res = synthesis_transform(y_hat, model)
    assert shared.shape == (1, 16, 16, 16)
    np.testing.assert_array_equal(l_T.data, shared.data[:, :8])
    np.testing.assert_array_equal(l_res.data, shared.data[:, 8:])


def test_synthesis_zero_propagation():
    model = build_model(toy_config("ME"))
    _zero(model.g_s.head)
    l_T, l_res = synthesis_transform(Tensor(np.zeros((1, 16, 2, 2), dtype=np.float32)), model)
    assert not l_T.data.any() and not l_res.data.any()


def test_se_has_fewer_parameters_than_me():
    me, se = build_model(toy_config("ME")), build_model(toy_config("SE"))
    assert se.g_a.num_parameters() < me.g_a.num_parameters()
    assert se.num_parameters() < me.num_parameters()


def test_me_dominates_se_entrywise():
    for r in (16, 32, 64):
        me, se = toy_config("ME", r), toy_config("SE", r)
        assert all(a > b for a, b in zip(me.stage_depths, se.stage_depths))
        assert all(a > b for a, b in zip(me.stage_dims, se.stage_dims))
        assert me.entropy_depth > se.entropy_depth and me.entropy_dim > se.entropy_dim


def test_toy_widths():
    assert toy_config("ME").stage_dims == (8, 16, 24, 32, 40)
    assert toy_config("SE").stage_dims == (4, 8, 16, 24, 32)


def test_same_seed_same_checkpoint_bytes():
    a = build_model(toy_config("SE"), seed=3)
    b = build_model(toy_config("SE"), seed=3)
    c = build_model(toy_config("SE"), seed=4)
    assert serialize_state(a.state_dict(), a.config_id) == serialize_state(b.state_dict(), b.config_id)
    assert serialize_state(a.state_dict(), a.config_id) != serialize_state(c.state_dict(), c.config_id)


def test_stage_count_follows_ratio():
    assert len(build_model(toy_config("ME", 64)).g_a.stages) == 6
    assert len(build_model(toy_config("ME", 16)).g_a.stages) == 4


@pytest.mark.parametrize("bad", [
    dict(spatial_ratio=32, stage_dims=(8, 16, 24, 32)),
    dict(spatial_ratio=8),
    dict(variant="XL"),
    dict(alpha_bar_T=1.0),
    dict(latent_channels=0),
])
def test_inconsistent_config_rejected(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_config_text_round_trip():
    cfg = toy_config("SE", 64, seed=7, lite_decoder=False)
    text = dump_config(cfg)
    assert "stage_dims=4,8,16,24,32,40" in text
    assert parse_config(text) == cfg
    assert parse_config("# comment\nvariant = SE\nspatial_ratio=16\nstage_depths=1,1,1,1\n"
                        "stage_dims=4,8,16,24\nsynthesis_dims=32,16\n").variant == "SE"


def test_config_errors_name_the_line():
    with pytest.raises(ValueError, match="line 2"):
        parse_config("variant=ME\nbogus=1\n")
    with pytest.raises(ValueError, match="line 1"):
        parse_config("variant ME\n")


def test_config_id_ignores_seed_but_tracks_architecture():
    assert toy_config("ME", seed=1).config_id == toy_config("ME", seed=2).config_id
    assert toy_config("ME").architecture_text() != toy_config("SE").architecture_text()
