"""Network core: forward, loss, exact gradients, SGD, checkpoints."""

import math

import numpy as np
import pytest
from conftest import draw_case, gradient_check

from dropaug import (
    ConfigError,
    DomainError,
    FormatError,
    IoError,
    LayerParams,
    MlpModel,
    NoiseScheme,
    NumericError,
    RngStream,
    ShapeError,
    backward,
    evaluate,
    forward,
    forward_gaussian,
    init_model,
    load_model,
    loss_ce,
    model_sha256,
    sample_mask_trace,
    save_model,
    sgd_step,
)
from dropaug.network import (
    CHECKPOINT_MAGIC,
    Gradients,
    model_from_bytes,
    model_to_bytes,
)

GRAD_TOL = 1e-6


def zero_weight_model(dims):
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        layers.append(LayerParams(np.zeros((fan_in, fan_out)),
                                  np.zeros((1, fan_out))))
    return MlpModel(layers)


class TestInitModel:
    def test_shapes_and_glorot_bound(self):
        model = init_model((10, 7, 4), RngStream(1, 1))
        assert model.layer_dims == [10, 7, 4]
        assert model.hidden_count == 1
        assert model.mask_widths() == [10, 7]
        for layer, bound in zip(model.layers,
                                (np.sqrt(6 / 17), np.sqrt(6 / 11))):
            assert np.abs(layer.weights).max() <= bound
            assert np.array_equal(layer.bias, np.zeros((1, layer.out_dim)))
            assert layer.bias_enabled

    def test_hidden_bias_flag(self):
        model = init_model((5, 6, 7, 2), RngStream(1, 1), hidden_bias=False)
        assert [l.bias_enabled for l in model.layers] == [False, False, True]

    def test_deterministic(self):
        a = init_model((6, 5, 3), RngStream(2, 1))
        b = init_model((6, 5, 3), RngStream(2, 1))
        assert model_sha256(a) == model_sha256(b)

    def test_validation(self):
        with pytest.raises(ConfigError):
            init_model((4,), RngStream(1))
        with pytest.raises(ConfigError):
            init_model((4, 0, 2), RngStream(1))

    def test_model_validate_rejects_bad_chains(self):
        model = init_model((4, 3, 2), RngStream(3, 1))
        model.layers[1].weights = np.zeros((5, 2))  # in_dim no longer matches
        with pytest.raises(ShapeError):
            model.validate()
        broken = init_model((4, 3, 2), RngStream(3, 1))
        broken.layers[0].weights[0, 0] = np.nan
        with pytest.raises(NumericError):
            broken.validate()
        with pytest.raises(ConfigError):
            MlpModel([]).validate()


class TestForward:
    def test_probabilities_normalize(self):
        model = init_model((6, 8, 4), RngStream(4, 1))
        x = RngStream(4, 2).uniform(5 * 6, -1, 1).reshape(5, 6)
        trace = forward(model, x)
        assert np.abs(trace.probabilities.sum(axis=1) - 1.0).max() < 1e-12
        assert np.allclose(np.log(trace.probabilities), trace.log_probabilities)
        assert len(trace.activations) == 1
        assert trace.x_used is trace.x  # clean pass reuses the input

    def test_row_vector_input(self):
        model = init_model((6, 4, 3), RngStream(5, 1))
        trace = forward(model, np.zeros(6))
        assert trace.probabilities.shape == (1, 3)

    def test_softmax_is_shift_stable(self):
        model = zero_weight_model((3, 2))
        model.layers[0].bias[:] = 1000.0  # huge but equal logits
        trace = forward(model, np.ones((2, 3)))
        assert np.allclose(trace.probabilities, 0.5)
        assert np.isfinite(trace.log_probabilities).all()

    def test_shape_errors(self):
        model = init_model((6, 4, 3), RngStream(6, 1))
        with pytest.raises(ShapeError):
            forward(model, np.zeros((2, 5)))
        with pytest.raises(ShapeError):
            forward(model, np.zeros((2, 6)), act_scales=[1.0])

    def test_mask_trace_mismatches(self):
        model = init_model((6, 4, 3), RngStream(7, 1))
        masks = sample_mask_trace(NoiseScheme("dropout", p_hidden=0.5),
                                  [6, 5], 2, RngStream(7, 3))
        with pytest.raises(ShapeError):
            forward(model, np.zeros((2, 6)), masks)
        masks = sample_mask_trace(NoiseScheme("dropout", p_hidden=0.5),
                                  [6, 4], 3, RngStream(7, 3))
        with pytest.raises(ShapeError):
            forward(model, np.zeros((2, 6)), masks)

    def test_non_finite_logits_raise(self):
        model = init_model((3, 2), RngStream(8, 1))
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            forward(model, np.full((1, 3), 1e308))

    def test_dropout_level_zero_is_bitwise_clean(self):
        model = init_model((8, 10, 5, 3), RngStream(9, 1))
        x = RngStream(9, 2).uniform(4 * 8, -1, 1).reshape(4, 8)
        masks = sample_mask_trace(NoiseScheme("dropout"), model.mask_widths(),
                                  4, RngStream(9, 3))
        noisy = forward(model, x, masks)
        clean = forward(model, x)
        assert np.array_equal(noisy.probabilities, clean.probabilities)
        for a, b in zip(noisy.activations, clean.activations):
            assert np.array_equal(a, b)


class TestLoss:
    def test_uniform_logits_give_log_class_count(self):
        model = zero_weight_model((4, 3))
        trace = forward(model, np.ones((5, 4)))
        assert loss_ce(trace, [0, 1, 2, 0, 1]) == pytest.approx(math.log(3),
                                                                abs=1e-15)

    def test_label_validation(self):
        model = zero_weight_model((4, 3))
        trace = forward(model, np.ones((2, 4)))
        with pytest.raises(ShapeError):
            loss_ce(trace, [0])
        with pytest.raises(DomainError):
            loss_ce(trace, [0, 3])
        with pytest.raises(DomainError):
            loss_ce(trace, [-1, 0])


class TestGradients:
    @pytest.mark.parametrize("condition", [
        "plain", "plain_nobias", "dropout_inverse", "dropout_off",
        "random_inverse", "test_scales", "gaussian",
    ])
    def test_backward_matches_oracle(self, condition):
        model, trace, labels = draw_case((6, 8, 5, 3), seed=42, batch=3,
                                         condition=condition)
        assert gradient_check(model, trace, labels) < GRAD_TOL

    def test_masked_units_get_zero_input_gradient(self):
        model, trace, labels = draw_case((6, 8, 5, 3), seed=11, batch=2,
                                         condition="dropout_inverse")
        grads = backward(model, trace, labels)
        dropped = trace.mask_trace.masks[0] == 0.0
        assert not grads.d_input[dropped].any()

    def test_trace_mismatch(self):
        model = init_model((4, 3, 2), RngStream(10, 1))
        other = init_model((4, 2), RngStream(10, 2))
        trace = forward(other, np.zeros((1, 4)))
        with pytest.raises(ShapeError):
            backward(model, trace, [0])


class TestSgdStep:
    def test_plain_update(self):
        model = init_model((3, 2), RngStream(11, 1))
        grads = Gradients(d_weights=[np.ones((3, 2))],
                          d_bias=[np.full((1, 2), 2.0)],
                          d_input=np.zeros((1, 3)))
        stepped = sgd_step(model, grads, 0.25)
        assert np.array_equal(stepped.layers[0].weights,
                              model.layers[0].weights - 0.25)
        assert np.array_equal(stepped.layers[0].bias,
                              model.layers[0].bias - 0.5)

    def test_zero_lr_copies(self):
        model = init_model((3, 4, 2), RngStream(12, 1))
        grads = Gradients([np.ones((3, 4)), np.ones((4, 2))],
                          [np.ones((1, 4)), np.ones((1, 2))],
                          np.zeros((1, 3)))
        stepped = sgd_step(model, grads, 0.0)
        assert model_sha256(stepped) == model_sha256(model)
        assert stepped.layers[0].weights is not model.layers[0].weights

    def test_disabled_bias_never_moves(self):
        model = init_model((3, 4, 2), RngStream(13, 1), hidden_bias=False)
        grads = Gradients([np.ones((3, 4)), np.ones((4, 2))],
                          [np.ones((1, 4)), np.ones((1, 2))],
                          np.zeros((1, 3)))
        stepped = sgd_step(model, grads, 1.0)
        assert np.array_equal(stepped.layers[0].bias, np.zeros((1, 4)))

    def test_errors(self):
        model = init_model((3, 2), RngStream(14, 1))
        good = Gradients([np.ones((3, 2))], [np.ones((1, 2))], np.zeros((1, 3)))
        with pytest.raises(DomainError):
            sgd_step(model, good, math.nan)
        with pytest.raises(ShapeError):
            sgd_step(model, Gradients([np.ones((2, 2))], [np.ones((1, 2))],
                                      np.zeros((1, 3))), 0.1)
        with pytest.raises(ShapeError):
            sgd_step(model, Gradients([np.ones((3, 2))], [], np.zeros((1, 3))), 0.1)
        huge = Gradients([np.full((3, 2), 1e308)], [np.ones((1, 2))],
                         np.zeros((1, 3)))
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            sgd_step(model, huge, 1e10)


class TestEvaluate:
    def test_error_rate_by_hand(self):
        model = zero_weight_model((3, 3))
        model.layers[0].weights = np.eye(3) * 5.0  # predicts argmax of x
        x = np.array([[1.0, 0.0, 0.0],
                      [0.0, 1.0, 0.0],
                      [0.0, 0.0, 1.0],
                      [1.0, 0.0, 0.0]])
        metrics = evaluate(model, x, [0, 1, 2, 2])
        assert metrics["error_rate"] == 0.25
        assert metrics["mean_loss"] > 0.0


class TestForwardGaussian:
    def setup_method(self):
        self.model = init_model((6, 7, 5, 3), RngStream(15, 1))
        self.x = RngStream(15, 2).uniform(4 * 6, 0.0, 1.0).reshape(4, 6)
        self.scheme = NoiseScheme("gaussian_matched", p_input=0.2, scaling="off")
        self.masks = sample_mask_trace(self.scheme, self.model.mask_widths(),
                                       4, RngStream(15, 3))

    def test_records_replayable_noise(self):
        trace = forward_gaussian(self.model, self.x, self.masks, RngStream(15, 4))
        noise = trace.mask_trace.hidden_noise
        assert noise is not None and len(noise) == 2
        assert any(n.any() for n in noise)
        replay = forward(self.model, self.x, trace.mask_trace)
        assert np.array_equal(replay.probabilities, trace.probabilities)
        for a, b in zip(replay.activations, trace.activations):
            assert np.array_equal(a, b)

    def test_deterministic(self):
        a = forward_gaussian(self.model, self.x, self.masks, RngStream(15, 4))
        b = forward_gaussian(self.model, self.x, self.masks, RngStream(15, 4))
        assert np.array_equal(a.probabilities, b.probabilities)

    def test_rejects_already_realized_trace(self):
        trace = forward_gaussian(self.model, self.x, self.masks, RngStream(15, 4))
        with pytest.raises(ConfigError):
            forward_gaussian(self.model, self.x, trace.mask_trace,
                             RngStream(15, 4))


class TestCheckpoints:
    def make(self):
        return init_model((5, 6, 3), RngStream(16, 1), hidden_bias=False)

    def test_bytes_round_trip(self):
        model = self.make()
        clone = model_from_bytes(model_to_bytes(model))
        assert model_sha256(clone) == model_sha256(model)
        assert [l.bias_enabled for l in clone.layers] == [False, True]

    def test_file_round_trip(self, tmp_path):
        model = self.make()
        path = tmp_path / "net.ckpt"
        save_model(model, path)
        assert model_sha256(load_model(path)) == model_sha256(model)

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(IoError):
            load_model(tmp_path / "absent.ckpt")

    def test_bad_magic_offset(self):
        blob = b"XXXX" + model_to_bytes(self.make())[4:]
        with pytest.raises(FormatError) as exc:
            model_from_bytes(blob)
        assert "byte offset 0" in str(exc.value)

    def test_bad_version_offset(self):
        blob = bytearray(model_to_bytes(self.make()))
        blob[4:8] = (99).to_bytes(4, "little")
        with pytest.raises(FormatError) as exc:
            model_from_bytes(bytes(blob))
        assert "byte offset 4" in str(exc.value)

    def test_truncation_reports_offset(self):
        blob = model_to_bytes(self.make())
        with pytest.raises(FormatError) as exc:
            model_from_bytes(blob[:30])
        assert "truncated" in str(exc.value) and "byte offset" in str(exc.value)

    def test_trailing_bytes_rejected(self):
        blob = model_to_bytes(self.make()) + b"\x00"
        with pytest.raises(FormatError) as exc:
            model_from_bytes(blob)
        assert "trailing" in str(exc.value)

    def test_zero_layers_rejected(self):
        blob = CHECKPOINT_MAGIC + (1).to_bytes(4, "little") + (0).to_bytes(4, "little")
        with pytest.raises(FormatError):
            model_from_bytes(blob)

    def test_sha_tracks_parameters(self):
        model = self.make()
        before = model_sha256(model)
        model.layers[0].weights[0, 0] += 1e-9
        assert model_sha256(model) != before
