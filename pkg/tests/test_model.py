import math

import numpy as np
import pytest

from captcha_ocr import ctc
from captcha_ocr import tensor as T
from captcha_ocr.checkpoint import AdamState
from captcha_ocr.model import (
    ConfigError,
    ModelConfig,
    build,
    forward,
    forward_batch,
    map_to_sequence,
    sequence_to_map,
)
from captcha_ocr.tensor import ShapeError
from captcha_ocr.train import TrainConfig, adam_step

from conftest import numeric_grad

TINY = dict(input_height=8, input_width=16, conv_channels=(2,), rnn_hidden=4, alphabet_size=3)


def test_build_is_deterministic():
    cfg = ModelConfig(**TINY)
    a, b = build(cfg, 5), build(cfg, 5)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.tensors)
    c = build(cfg, 6)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a.tensors)


def test_default_parameter_count():
    # conv 1→32 and 32→64 (3×3 + bias); BiGRU hidden 128 on 64·12 = 768 features; projection 256 → 20
    conv = (32 * 1 * 9 + 32) + (64 * 32 * 9 + 64)
    gru_direction = 768 * 384 + 128 * 384 + 384 + 384
    proj = 256 * 20 + 20
    assert conv + 2 * gru_direction + proj == 713620
    assert build(ModelConfig(), 0).count() == 713620


def test_initialization_statistics():
    params = build(ModelConfig(), 0)
    w = params["rnn.fwd.w_hh"].data
    for g in range(3):
        block = w[:, g * 128:(g + 1) * 128]
        np.testing.assert_allclose(block.T @ block, np.eye(128), atol=1e-10)
    bound = math.sqrt(6 / (768 + 384))
    assert np.abs(params["rnn.fwd.w_ih"].data).max() <= bound
    assert np.all(params["conv0.bias"].data == 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(input_height=3, input_width=200, conv_channels=(8, 8))
    with pytest.raises(ConfigError):
        ModelConfig(rnn_kind="lstm")
    cfg = ModelConfig()
    assert (cfg.time_steps, cfg.feature_height, cfg.feature_dim) == (50, 12, 768)
    assert cfg.check_label_capacity(6)
    assert not ModelConfig(input_width=40).check_label_capacity(6)


def test_zero_projection_gives_uniform_rows():
    cfg = ModelConfig(**TINY)
    params = build(cfg, 1)
    params["proj.weight"].data[:] = 0
    params["proj.bias"].data[:] = 0
    out = forward(params, np.zeros((8, 16))).data
    np.testing.assert_allclose(out, -math.log(4), atol=1e-12)


def test_rows_are_log_normalized(rng):
    params = build(ModelConfig(**TINY, rnn_kind="gru"), 2)
    out = forward(params, rng.random((8, 16))).data
    lse = np.log(np.exp(out).sum(axis=1))
    assert np.all(np.abs(lse) <= 1e-9)


def test_default_time_steps(rng):
    params = build(ModelConfig(), 0)
    out = forward(params, rng.random((50, 200)))
    assert out.shape == (200 // 2 ** 2, 20)


def test_variable_width(rng):
    params = build(ModelConfig(), 0)
    with T.no_grad():
        steps = [forward(params, rng.random((50, w))).shape[0] for w in (96, 128, 200)]
    assert steps == sorted(set(steps)) and steps == [24, 32, 50]


def test_forward_rejects_wrong_height(rng):
    params = build(ModelConfig(**TINY), 0)
    with pytest.raises(ShapeError):
        forward(params, rng.random((9, 16)))


def test_batch_matches_single(rng):
    params = build(ModelConfig(**TINY, rnn_kind="gru"), 3)
    images = rng.random((3, 8, 16))
    batched = forward_batch(params, images).data
    for i in range(3):
        np.testing.assert_allclose(batched[:, i, :], forward(params, images[i]).data, atol=1e-12)


def test_map_to_sequence_examples():
    seq = map_to_sequence(T.tensor([[[1.0, 2.0, 3.0]]])).data
    assert seq.tolist() == [[1.0], [2.0], [3.0]]
    fmap = np.arange(8.0).reshape(2, 2, 2)  # c, h, w
    seq = map_to_sequence(T.tensor(fmap)).data
    c0h0, c0h1, c1h0, c1h1 = fmap[0, 0, 0], fmap[0, 1, 0], fmap[1, 0, 0], fmap[1, 1, 0]
    assert seq[0].tolist() == [c0h0, c0h1, c1h0, c1h1]
    np.testing.assert_array_equal(sequence_to_map(seq, 2, 2), fmap)


def test_map_to_sequence_inverse(rng):
    fmap = rng.normal(size=(3, 4, 5))
    np.testing.assert_array_equal(sequence_to_map(map_to_sequence(T.tensor(fmap)).data, 3, 4), fmap)


@pytest.mark.parametrize("kind", ["simple", "gru"])
def test_end_to_end_gradient_check(rng, kind):
    cfg = ModelConfig(**TINY, rnn_kind=kind)
    params = build(cfg, 11)
    for t in params:
        t.data += rng.normal(scale=0.1, size=t.shape)  # non-zero biases
    image = rng.random((8, 16))
    label = [0, 2, 1]

    def loss_value():
        with T.no_grad():
            lp = forward(params, image).data
        return ctc.ctc_loss(lp, label, cfg.alphabet_size).loss

    node, _ = ctc.ctc_loss_node(forward(params, image), label, cfg.alphabet_size)
    grads = T.backward(node, list(params))
    for name, t in params.items():
        numeric = numeric_grad(loss_value, t.data, eps=1e-6)
        scale = max(1e-3, np.abs(numeric).max())
        assert np.max(np.abs(grads[t] - numeric)) / scale <= 1e-3, name


def test_single_step_decreases_loss(rng):
    cfg = ModelConfig(**TINY, rnn_kind="gru")
    image = rng.random((8, 16))
    label = [1, 0]

    def loss_of(params):
        with T.no_grad():
            return ctc.ctc_loss(forward(params, image).data, label, cfg.alphabet_size).loss

    decreased = []
    for lr in (1e-2, 1e-3, 1e-4):
        params = build(cfg, 4)
        before = loss_of(params)
        node, _ = ctc.ctc_loss_node(forward(params, image), label, cfg.alphabet_size)
        grads = T.backward(node, list(params))
        adam_step(params.arrays(), {k: grads[t] for k, t in params.items()}, AdamState(),
                  TrainConfig(learning_rate=lr))
        decreased.append(loss_of(params) < before)
    assert any(decreased)
