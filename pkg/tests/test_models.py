import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdsupcon import ndtensor as nd
from mdsupcon.errors import DegenerateInputError, ShapeError, ValidationError
from mdsupcon.losses import CEBatch, cross_entropy
from mdsupcon.models import (
    EncoderConfig,
    attach_classifier,
    classifier_forward,
    encoder_forward,
    init_params,
    projection_forward,
)
from mdsupcon.trainer import OptimState, sgd_step

TINY = EncoderConfig(widths=(4, 4, 8), feature_dim=8, head_dim=6)


def images(b, seed=0):
    return np.random.default_rng(seed).random((b, 3, 32, 32)).astype(np.float32)


def test_default_config_dims():
    cfg = EncoderConfig()
    assert cfg.feature_dim == 128 and cfg.head_dim == 128
    assert cfg.stage_channels == (16, 32, 64, 128)


@pytest.mark.parametrize("kw", [dict(arch="resnet"), dict(feature_dim=4), dict(image_size=30), dict(image_size=8), dict(widths=(4, 4))])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        EncoderConfig(**kw)


def test_small_encoder_under_100k_params():
    b = init_params(EncoderConfig(), 0)
    assert b.n_params("encoder") < 100_000
    assert b.params["head.fc2.w"].shape == (128, 128)


def test_deep_has_more_params_than_small():
    small = init_params(EncoderConfig(arch="small"), 0).n_params("encoder")
    deep = init_params(EncoderConfig(arch="deep"), 0).n_params("encoder")
    assert deep > small


def test_zero_images_zero_biases_give_zero_features():
    b = init_params(TINY, 0)
    assert not np.any(encoder_forward(TINY, b.params, np.zeros((2, 3, 32, 32), np.float32)).data)


@pytest.mark.parametrize("arch", ["small", "deep"])
def test_encoder_shape_finite_and_deterministic(arch):
    cfg = EncoderConfig(arch=arch, widths=(4, 4, 8), feature_dim=8)
    x = images(4)
    a = encoder_forward(cfg, init_params(cfg, 3).params, x).data
    b = encoder_forward(cfg, init_params(cfg, 3).params, x).data
    assert a.shape == (4, 8) and np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()


def test_encoder_rejects_bad_input():
    p = init_params(TINY, 0).params
    with pytest.raises(ShapeError):
        encoder_forward(TINY, p, np.zeros((2, 1, 32, 32)))
    with pytest.raises(ValidationError):
        encoder_forward(TINY, p, np.full((1, 3, 32, 32), 2.0))


def test_projection_unit_rows_and_zero_guard():
    b = init_params(TINY, 0)
    feats = np.random.default_rng(1).random((5, 8))
    z = projection_forward(b.params, feats).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)
    assert z.shape == (5, 6)
    zero = {k: np.zeros_like(v) for k, v in b.params.items()}
    with pytest.raises(DegenerateInputError):
        projection_forward(zero, feats)


def test_projection_gradient_through_head_and_normalize():
    rng = np.random.default_rng(2)
    b = init_params(TINY, 0, dtype=np.float64)
    feats = rng.random((4, 8)) + 0.1
    w = nd.Tensor(rng.standard_normal((4, 6)))
    f = lambda t: nd.sum_all(nd.mul(projection_forward(b.params, t), w))
    assert nd.grad_check(f, nd.Tensor(feats)) <= 1e-5
    params = dict(b.params)

    def g(t):
        params["head.fc1.w"] = t
        return nd.sum_all(nd.mul(projection_forward(params, nd.Tensor(feats)), w))

    assert nd.grad_check(g, nd.Tensor(b.params["head.fc1.w"])) <= 1e-5


def test_classifier_identity_weights():
    p = {"classifier.w": np.eye(8), "classifier.b": np.zeros(8)}
    feats = np.random.default_rng(3).random((3, 8))
    np.testing.assert_array_equal(classifier_forward(p, feats).data, feats)


def test_classifier_k345_accepted():
    b = attach_classifier(init_params(TINY, 0), 345, 0)
    assert b.params["classifier.w"].shape == (8, 345)


def test_init_determinism_and_seed_sensitivity():
    a, b, c = init_params(TINY, 5), init_params(TINY, 5), init_params(TINY, 6)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params if k.endswith(".w"))
    assert all(not np.any(v) for k, v in a.params.items() if k.endswith(".b"))


def test_kaiming_std_within_5_percent():
    cfg = EncoderConfig(widths=(16, 32, 64), feature_dim=128)
    w = init_params(cfg, 0).params["encoder.conv4.w"]
    assert w.size >= 10_000
    fan_in = w.shape[1] * 9
    assert abs(w.std() / np.sqrt(2 / fan_in) - 1) < 0.05


def test_attach_classifier_drops_head_and_keeps_encoder():
    base = init_params(TINY, 0)
    probe = attach_classifier(base, 3, 1)
    assert not probe.has_group("head") and probe.has_group("classifier")
    assert probe.frozen == {"encoder"}
    for k, v in base.group_params("encoder").items():
        assert probe.params[k].tobytes() == v.tobytes()
    assert base.has_group("head")


def test_frozen_encoder_bit_identical_after_step():
    probe = attach_classifier(init_params(TINY, 0), 3, 0)
    before = {k: v.copy() for k, v in probe.params.items()}
    tensors = probe.as_tensors()
    with nd.GradTape() as tape:
        feats = encoder_forward(TINY, tensors, images(4))
        loss = cross_entropy(CEBatch(classifier_forward(tensors, feats), [0, 1, 2, 0]))
    tape.backward(loss)
    grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
    assert all(k.startswith("classifier") for k in grads)
    # even if encoder gradients were supplied, the frozen flag must block the update
    grads.update({k: np.ones_like(v) for k, v in probe.group_params("encoder").items()})
    sgd_step(probe.params, grads, OptimState(0.1, weight_decay=1e-4), probe.is_frozen)
    for k in probe.group_params("encoder"):
        assert probe.params[k].tobytes() == before[k].tobytes()
    assert any(probe.params[k].tobytes() != before[k].tobytes() for k in probe.group_params("classifier"))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["small", "deep"]))
def test_encoder_forward_is_pure(seed, arch):
    cfg = EncoderConfig(arch=arch, widths=(2, 2, 4), feature_dim=8)
    p = init_params(cfg, seed % 1000).params
    x = images(2, seed)
    first = encoder_forward(cfg, p, x).data
    encoder_forward(cfg, p, images(2, seed + 1))
    assert encoder_forward(cfg, p, x).data.tobytes() == first.tobytes()


def test_encoder_gradient_small_f64():
    cfg = EncoderConfig(widths=(2, 2, 2), feature_dim=8, image_size=16)
    p = init_params(cfg, 0, dtype=np.float64).params
    x = np.random.default_rng(0).random((1, 3, 16, 16))
    w = nd.Tensor(np.random.default_rng(1).standard_normal((1, 8)))

    def f(t):
        q = dict(p)
        q["encoder.conv2.w"] = t
        return nd.sum_all(nd.mul(encoder_forward(cfg, q, x), w))

    assert nd.grad_check(f, nd.Tensor(p["encoder.conv2.w"])) <= 1e-5
