import numpy as np
import pytest

from widemeta.autodiff import ConfigurationError, DimensionError, Tensor, sgd_step
from widemeta.nn import (CheckpointIntegrityError, CheckpointParseError, ModelConfig, build_model,
                         checkpoint_bytes, clone_model, closed_form_param_count, cost_estimate,
                         feature_sizes, forward, load_checkpoint, load_checkpoint_bytes,
                         save_checkpoint)


def batch(rng, n, cfg):
    return rng.random((n, cfg.in_channels, cfg.image_size, cfg.image_size)).astype(np.float32)


def test_omniglot_geometry():
    cfg = ModelConfig(1, 28, 5, 64, "standard4")
    assert feature_sizes(cfg) == [14, 7, 4, 2]
    m = build_model(cfg, np.random.default_rng(0))
    assert m.params["head.weight"].shape == (5, 256)


def test_rgb84_geometry():
    cfg = ModelConfig(3, 84, 5, 64, "standard4")
    assert feature_sizes(cfg) == [42, 21, 11, 6]
    m = build_model(cfg, np.random.default_rng(0))
    assert m.params["head.weight"].shape == (5, 64 * 36)


def test_deep_variant_geometry():
    assert feature_sizes(ModelConfig(3, 84, depth_variant="deep6")) == [42, 21, 11, 6, 3, 2]
    sizes = feature_sizes(ModelConfig(depth_variant="deep6"))
    assert len(sizes) == 6 and min(sizes) >= 1


def test_invalid_configs():
    with pytest.raises(ConfigurationError):
        build_model(ModelConfig(n_way=1), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        build_model(ModelConfig(depth_variant="deep9"), np.random.default_rng(0))


def test_param_count_closed_form():
    for cfg in (ModelConfig(), ModelConfig(3, 84), ModelConfig(base_filters=8, n_way=20)):
        m = build_model(cfg, np.random.default_rng(0))
        assert m.count_params() == closed_form_param_count(cfg)
        assert all(m.masks[n].shape == p.shape and m.masks[n].all() for n, p in m.params.items())


def test_forward_duplicate_rows(small_model, small_cfg, rng):
    x = batch(rng, 1, small_cfg)
    out = forward(small_model, np.concatenate([x, x])).data
    np.testing.assert_array_equal(out[0], out[1])


def test_forward_zero_weights(small_model, small_cfg, rng):
    params = {n: Tensor(np.zeros_like(p.data), requires_grad=True, name=n) for n, p in small_model.params.items()}
    out = forward(small_model.with_params(params), batch(rng, 3, small_cfg)).data
    assert np.all(out == 0)


def test_forward_deterministic_and_permutation_equivariant(small_model, small_cfg, rng):
    x = batch(rng, 6, small_cfg)
    a = forward(small_model, x).data
    assert a.tobytes() == forward(small_model, x).data.tobytes()
    perm = rng.permutation(6)
    np.testing.assert_allclose(forward(small_model, x[perm]).data, a[perm], atol=1e-5)


def test_forward_shape_mismatch(small_model):
    with pytest.raises(DimensionError):
        forward(small_model, np.zeros((2, 1, 27, 27), np.float32))


def test_clone_independent(small_model, small_cfg, rng):
    x = batch(rng, 4, small_cfg)
    c = clone_model(small_model)
    assert forward(c, x).data.tobytes() == forward(small_model, x).data.tobytes()
    before = {n: p.data.copy() for n, p in small_model.params.items()}
    c.params = sgd_step(c.params, {n: np.ones_like(p.data) for n, p in c.params.items()}, 0.1)
    c.params["head.bias"].data[0] = 99.0
    for n, p in small_model.params.items():
        assert p.data.tobytes() == before[n].tobytes()
    cc = clone_model(c)
    assert all(cc.params[n].data.tobytes() == c.params[n].data.tobytes() for n in c.params)


@pytest.mark.parametrize("seed", range(10))
def test_checkpoint_round_trip(seed, tmp_path):
    cfg = ModelConfig(base_filters=4 + seed, n_way=2 + seed % 4)
    m = build_model(cfg, np.random.default_rng(seed))
    m.masks["conv2.bias"][0] = 0
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.config == cfg
    assert list(back.params) == list(m.params)
    for n in m.params:
        assert back.params[n].data.tobytes() == m.params[n].data.tobytes()
        assert back.masks[n].tobytes() == m.masks[n].tobytes()
    x = np.random.default_rng(seed).random((3, 1, 28, 28)).astype(np.float32)
    assert forward(back, x).data.tobytes() == forward(m, x).data.tobytes()


def test_checkpoint_header_layout(small_model):
    raw = checkpoint_bytes(small_model)
    assert raw[:7] == b"WMETA1\0"
    assert int.from_bytes(raw[7:11], "little") == 2 * len(small_model.params)


def test_checkpoint_truncated_reports_offset(small_model):
    raw = checkpoint_bytes(small_model)
    with pytest.raises(CheckpointParseError) as exc:
        load_checkpoint_bytes(raw[:200])
    assert 0 < exc.value.offset <= 200
    with pytest.raises(CheckpointParseError):
        load_checkpoint_bytes(b"NOTACKPT")


def test_checkpoint_count_mismatch_is_integrity_error(small_model):
    raw = bytearray(checkpoint_bytes(small_model))
    count = int.from_bytes(raw[7:11], "little")
    raw[7:11] = (count + 1).to_bytes(4, "little")
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint_bytes(bytes(raw))


def test_checkpoint_shape_mismatch_is_integrity_error(small_model):
    m = clone_model(small_model)
    m.params["head.bias"] = Tensor(np.zeros(7, np.float32), requires_grad=True, name="head.bias")
    m.masks["head.bias"] = np.ones(7, np.uint8)
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint_bytes(checkpoint_bytes(m))


# -- cost model ----------------------------------------------------------------

def test_cost_zero_plan_equals_base():
    cfg = ModelConfig()
    a, b = cost_estimate(cfg, [0, 0, 0, 0], "mac"), cost_estimate(cfg, None, "anil")
    assert (a.forward_mults, a.trainable_grad_count, a.layer_mults) == (b.forward_mults, b.trainable_grad_count,
                                                                       b.layer_mults)


def test_cost_filter_factor():
    cfg = ModelConfig()
    base = cost_estimate(cfg, None, "anil")
    wide = cost_estimate(cfg, [10, 0, 0, 0], "mac")
    # the widened layer's output factor goes from F to F + z
    assert wide.layer_mults[0] * 64 == base.layer_mults[0] * 74
    # the next layer sees F + z input channels
    assert wide.layer_mults[1] * 64 == base.layer_mults[1] * 74
    assert wide.layer_mults[2:4] == base.layer_mults[2:4]


def test_cost_anil_counts_head_only():
    cfg = ModelConfig()
    assert cost_estimate(cfg, None, "anil").trainable_grad_count == 5 * 256 + 5


def test_cost_rgb_first_layer_channel_factor():
    g = cost_estimate(ModelConfig(1, 84), None, "anil").layer_mults[0]
    c = cost_estimate(ModelConfig(3, 84), None, "anil").layer_mults[0]
    assert c == 3 * g
