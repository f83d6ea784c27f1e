import numpy as np
import numpy.testing as npt
import pytest

from age2hie.models import (
    ModelConfig,
    build_model,
    param_checksum,
    replace_head,
    set_trainable,
    trainable_params,
)
from age2hie.ops import mae_loss
from age2hie.tensor import ShapeError, Tensor, backward, recording


def small_config(**kw):
    base = dict(variant="resnet18", in_channels=2, out_dim=1, width=8)
    base.update(kw)
    return ModelConfig(**base)


def test_config_rejects_unknown_variant():
    with pytest.raises(ValueError, match="variant"):
        build_model(ModelConfig(variant="resnet99"), seed=0)


def test_config_rejects_nonpositive_fields():
    with pytest.raises(ValueError):
        build_model(small_config(width=0), seed=0)
    with pytest.raises(ValueError):
        build_model(small_config(out_dim=0), seed=0)


def test_same_seed_gives_identical_parameters():
    a = build_model(small_config(), seed=7)
    b = build_model(small_config(), seed=7)
    assert param_checksum(a) == param_checksum(b)
    for (na, ta), (nb, tb) in zip(a.named_params(), b.named_params()):
        assert na == nb
        npt.assert_array_equal(ta.data, tb.data)


def test_different_seed_gives_different_parameters():
    a = build_model(small_config(), seed=7)
    b = build_model(small_config(), seed=8)
    assert param_checksum(a) != param_checksum(b)


def test_parameter_names_are_unique_and_ordered():
    m = build_model(small_config(variant="resnet50"), seed=0)
    names = [n for n, _ in m.named_params()]
    assert len(names) == len(set(names))
    assert names[0] == "stem.conv.weight"
    assert names[-2:] == ["head.weight", "head.bias"]
    assert any(n.startswith("layer4.") for n in names)


def test_feature_width_by_variant():
    assert build_model(small_config(), seed=0).feature_width == 64
    assert build_model(small_config(variant="resnet34"), seed=0).feature_width == 64
    assert build_model(small_config(variant="resnet50"), seed=0).feature_width == 256


def test_block_counts_per_variant():
    def stage_sizes(variant):
        m = build_model(small_config(variant=variant), seed=0)
        return tuple(len(s) for s in m.stages)

    assert stage_sizes("resnet18") == (2, 2, 2, 2)
    assert stage_sizes("resnet34") == (3, 4, 6, 3)
    assert stage_sizes("resnet50") == (3, 4, 6, 3)


def test_conv_init_is_he_scaled():
    m = build_model(small_config(width=32), seed=3)
    w = m.stages[1][0].conv1.weight.data  # (64, 32, 3, 3, 3), fan_in 864
    fan_in = w.shape[1] * 27
    assert abs(w.std() / np.sqrt(2.0 / fan_in) - 1.0) < 0.05
    assert abs(w.mean()) < 0.01


def test_bn_init_is_identity():
    m = build_model(small_config(), seed=0)
    npt.assert_array_equal(m.stem_bn.gamma.data, np.ones(8, dtype=np.float32))
    npt.assert_array_equal(m.stem_bn.beta.data, np.zeros(8, dtype=np.float32))
    npt.assert_array_equal(m.stem_bn.running_mean, np.zeros(8, dtype=np.float32))
    npt.assert_array_equal(m.stem_bn.running_var, np.ones(8, dtype=np.float32))


def test_head_init_is_bounded_uniform():
    m = build_model(small_config(), seed=5)
    bound = 1.0 / np.sqrt(m.feature_width)
    assert np.abs(m.head.weight.data).max() <= bound
    assert np.abs(m.head.bias.data).max() <= bound


def test_forward_output_shape_and_dtype():
    m = build_model(small_config(out_dim=1), seed=0)
    x = Tensor(np.zeros((3, 2, 16, 16, 16), dtype=np.float32))
    out = m.forward(x, training=False)
    assert out.shape == (3, 1)
    assert out.dtype == np.float32


def test_forward_rejects_wrong_channels():
    m = build_model(small_config(), seed=0)
    with pytest.raises(ShapeError):
        m.forward(Tensor(np.zeros((1, 3, 16, 16, 16), dtype=np.float32)))


def test_stem_pool_only_engages_for_large_volumes():
    m = build_model(small_config(width=4), seed=0)
    rng = np.random.default_rng(0)
    small = Tensor(rng.standard_normal((1, 2, 16, 16, 16)).astype(np.float32))
    big = Tensor(rng.standard_normal((1, 2, 32, 32, 32)).astype(np.float32))
    # 16^3: stem conv halves to 8, stages halve thrice -> 1
    # 32^3: stem conv 16, then the pool halves to 8, stages -> 1
    feats_small = m.features(small)
    feats_big = m.features(big)
    assert feats_small.shape == feats_big.shape == (1, 32)


def test_forward_works_in_f64():
    m = build_model(small_config(), seed=0, dtype=np.float64)
    x = Tensor(np.zeros((1, 2, 16, 16, 16), dtype=np.float64))
    out = m.forward(x)
    assert out.dtype == np.float64


def test_replace_head_keeps_extractor_and_swaps_head():
    m = build_model(small_config(out_dim=1), seed=0)
    before = param_checksum(m, include_head=False)
    old_head = m.head.weight.data.copy()
    replace_head(m, out_dim=2, rng=np.random.default_rng(99))
    assert param_checksum(m, include_head=False) == before
    assert m.head.weight.shape == (2, 64)
    assert m.head.bias.shape == (2,)
    assert m.config.out_dim == 2
    assert old_head.shape != m.head.weight.shape


def test_set_trainable_head_only_freezes_extractor():
    m = build_model(small_config(), seed=0)
    set_trainable(m, "head_only")
    names = [n for n, _ in trainable_params(m)]
    assert names == ["head.weight", "head.bias"]
    set_trainable(m, "all")
    assert len(trainable_params(m)) == len(m.named_params())
    with pytest.raises(ValueError):
        set_trainable(m, "nothing")


def test_frozen_extractor_gets_no_gradients():
    m = build_model(small_config(), seed=1)
    set_trainable(m, "head_only")
    x = Tensor(np.random.default_rng(0).standard_normal(
        (2, 2, 8, 8, 8)).astype(np.float32))
    with recording() as rec:
        out = m.forward(x, training=True)
        loss = mae_loss(out, np.array([1.0, 2.0], dtype=np.float32))
    backward(loss, rec)
    assert m.head.weight.grad is not None
    assert np.any(m.head.weight.grad)
    assert m.stem_conv.weight.grad is None


def test_full_backward_reaches_every_parameter():
    m = build_model(small_config(), seed=2)
    x = Tensor(np.random.default_rng(1).standard_normal(
        (2, 2, 8, 8, 8)).astype(np.float32))
    with recording() as rec:
        out = m.forward(x, training=True)
        loss = mae_loss(out, np.array([0.5, -0.5], dtype=np.float32))
    backward(loss, rec)
    for name, t in m.named_params():
        assert t.grad is not None, name
        assert np.isfinite(t.grad).all(), name


def test_training_forward_updates_running_buffers():
    m = build_model(small_config(), seed=0)
    x = Tensor(np.random.default_rng(2).standard_normal(
        (2, 2, 8, 8, 8)).astype(np.float32))
    before = m.stem_bn.running_mean.copy()
    m.forward(x, training=True)
    assert not np.array_equal(m.stem_bn.running_mean, before)
    frozen = m.stem_bn.running_mean.copy()
    m.forward(x, training=False)
    npt.assert_array_equal(m.stem_bn.running_mean, frozen)


def test_bottleneck_forward_shape():
    m = build_model(small_config(variant="resnet50", out_dim=2), seed=0)
    x = Tensor(np.zeros((1, 2, 16, 16, 16), dtype=np.float32))
    assert m.forward(x).shape == (1, 2)
