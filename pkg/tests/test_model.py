import numpy as np
import pytest

from skinfcn.errors import ConfigError, FormatError, ParameterError, ShapeError
from skinfcn.model import (
    FCNNModel,
    build_model,
    forward,
    infer_architecture,
    parameter_specs,
    predict_mask,
    segment_image,
)
from skinfcn.ops import softmax_cross_entropy
from skinfcn.schemas.architecture import CANONICAL, DESK, MICRO, preset
from skinfcn.tensor import Tensor, backward


def _weight_specs(config):
    return [s for s in parameter_specs(config) if s.name.endswith("weight")]


class TestParameterLayout:
    def test_canonical_has_28_weighted_layers(self):
        weights = _weight_specs(CANONICAL)
        assert len(weights) == 28
        assert sum(s.name.startswith("stage") for s in weights) == 13
        assert sum(s.name.startswith("up") for s in weights) == 6

    def test_canonical_shapes(self):
        shapes = {s.name: s.shape for s in parameter_specs(CANONICAL)}
        assert shapes["stage1.conv1.weight"] == (64, 3, 3, 3)
        assert shapes["stage5.conv3.weight"] == (512, 512, 3, 3)
        assert shapes["fc6.weight"] == (4096, 512, 7, 7)
        assert shapes["fc7.weight"] == (4096, 4096, 1, 1)
        assert shapes["head1.weight"] == (2, 64, 1, 1)
        assert shapes["head6.weight"] == (2, 4096, 1, 1)
        assert shapes["head6.bias"] == (1, 2, 1, 1)
        assert shapes["up1.weight"] == (2, 1, 4, 4)
        assert shapes["up6.weight"] == (2, 1, 64, 64)
        assert shapes["fuse.weight"] == (2, 12, 1, 1)

    def test_desk_heads_and_fusion_are_width_independent(self):
        canonical = {s.name: s.shape for s in parameter_specs(CANONICAL)}
        desk = {s.name: s.shape for s in parameter_specs(DESK)}
        assert canonical.keys() == desk.keys()
        for i in range(1, 7):
            assert desk[f"up{i}.weight"] == canonical[f"up{i}.weight"]
            assert desk[f"head{i}.weight"][0] == 2
        assert desk["fuse.weight"] == canonical["fuse.weight"]

    def test_sum_fusion_has_no_fuse_conv(self):
        names = [s.name for s in parameter_specs(preset("desk", fusion="sum"))]
        assert not any(n.startswith("fuse") for n in names)

    def test_infer_architecture_round_trip(self):
        for config in (CANONICAL, DESK, MICRO, preset("micro", fusion="sum")):
            shapes = {s.name: s.shape for s in parameter_specs(config)}
            assert infer_architecture(shapes) == config

    def test_infer_architecture_requires_fc_layers(self):
        shapes = {s.name: s.shape for s in parameter_specs(MICRO) if not s.name.startswith("fc")}
        with pytest.raises(FormatError):
            infer_architecture(shapes)


class TestBuildModel:
    def test_same_seed_is_bit_identical(self):
        a, b = build_model(DESK, seed=3), build_model(DESK, seed=3)
        for pa, pb in zip(a.parameters, b.parameters):
            assert pa.name == pb.name
            assert np.array_equal(pa.value.data, pb.value.data)

    def test_different_seed_differs(self):
        a, b = build_model(MICRO, seed=1), build_model(MICRO, seed=2)
        assert not np.array_equal(a["stage1.conv1.weight"].value.data, b["stage1.conv1.weight"].value.data)

    def test_biases_start_at_zero_and_weights_do_not(self):
        model = build_model(MICRO, seed=0)
        for p in model.parameters:
            if p.name.endswith("bias"):
                assert np.all(p.value.data == 0)
            else:
                assert np.any(p.value.data != 0)

    def test_deconv_weights_use_he_scale(self):
        model = build_model(DESK, seed=0, dtype=np.float64)
        assert model["up6.weight"].value.data.std() == pytest.approx(np.sqrt(0.5), rel=0.05)

    def test_bilinear_deconv_init(self):
        model = build_model(MICRO, seed=0, deconv_init="bilinear")
        kernel = model["up1.weight"].value.data
        taps = np.array([0.25, 0.75, 0.75, 0.25], dtype=np.float32)
        assert np.allclose(kernel[0, 0], np.outer(taps, taps))
        assert np.array_equal(kernel[0], kernel[1])

    def test_invalid_config_is_a_config_error(self):
        with pytest.raises(ConfigError):
            build_model({"stage_widths": [[4], [4]]}, seed=0)
        with pytest.raises(ConfigError):
            build_model({"num_classes": 3}, seed=0)

    def test_unknown_deconv_init(self):
        with pytest.raises(ConfigError):
            build_model(MICRO, seed=0, deconv_init="zeros")

    def test_means_are_stored_at_float32_precision(self):
        model = build_model(MICRO, seed=0)
        model.means = (0.1, 0.2, 0.3)
        assert model.means == tuple(float(np.float32(v)) for v in (0.1, 0.2, 0.3))
        with pytest.raises(ParameterError):
            model.means = (1.0, 2.0)

    def test_model_rejects_mismatched_parameters(self):
        model = build_model(MICRO, seed=0)
        with pytest.raises(ShapeError):
            FCNNModel(DESK, model.parameters)

    def test_astype(self):
        model = build_model(MICRO, seed=0).astype(np.float64)
        assert model.dtype == np.float64


class TestForward:
    def test_topology_at_384(self):
        model = build_model(DESK, seed=0)
        batch = Tensor(np.random.default_rng(0).standard_normal((1, 3, 384, 384)).astype(np.float32))
        result = forward(model, batch)
        assert result.head_sizes == [(192, 192), (96, 96), (48, 48), (24, 24), (12, 12), (12, 12)]
        assert len(result.heads) == 6
        assert all(h.shape.as_tuple() == (1, 2, 384, 384) for h in result.heads)
        assert result.fused.shape.as_tuple() == (1, 12, 384, 384)
        assert result.logits.shape.as_tuple() == (1, 2, 384, 384)
        assert result.tape is None

    def test_topology_at_64(self):
        model = build_model(DESK, seed=0)
        result = forward(model, Tensor(np.ones((2, 3, 64, 64), dtype=np.float32)))
        assert result.head_sizes == [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2), (2, 2)]
        assert result.logits.shape.as_tuple() == (2, 2, 64, 64)

    def test_rectangular_input(self):
        model = build_model(MICRO, seed=0)
        result = forward(model, Tensor(np.zeros((1, 3, 32, 96), dtype=np.float32)))
        assert result.logits.shape.as_tuple() == (1, 2, 32, 96)

    def test_zero_input_gives_finite_logits(self):
        model = build_model(DESK, seed=5)
        result = forward(model, Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))
        assert np.all(np.isfinite(result.logits.data))
        _, probs = softmax_cross_entropy(result.logits, np.zeros((1, 64, 64), dtype=np.uint8))
        assert np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)

    def test_sum_fusion(self):
        model = build_model(preset("micro", fusion="sum"), seed=0)
        result = forward(model, Tensor(np.ones((1, 3, 32, 32), dtype=np.float32)))
        assert result.fused.shape.as_tuple() == (1, 2, 32, 32)
        expected = sum(h.data.astype(np.float64) for h in result.heads)
        assert np.allclose(result.logits.data, expected, atol=1e-4)

    def test_indivisible_input_is_rejected(self):
        model = build_model(MICRO, seed=0)
        with pytest.raises(ShapeError):
            forward(model, Tensor(np.zeros((1, 3, 48, 32), dtype=np.float32)))

    def test_wrong_channel_count_is_rejected(self):
        model = build_model(MICRO, seed=0)
        with pytest.raises(ShapeError):
            forward(model, Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))

    def test_dtype_mismatch_is_rejected(self):
        model = build_model(MICRO, seed=0)
        with pytest.raises(ParameterError):
            forward(model, Tensor(np.zeros((1, 3, 32, 32))))

    def test_recorded_pass_reaches_every_layer_class(self):
        model = build_model(MICRO, seed=0, dtype=np.float64)
        batch = Tensor(np.random.default_rng(1).standard_normal((1, 3, 32, 32)))
        labels = np.random.default_rng(2).integers(0, 2, size=(1, 32, 32))
        result = forward(model, batch, record=True)
        with result.tape:
            loss, _ = softmax_cross_entropy(result.logits, labels)
        backward(result.tape, loss)
        for name in ("fuse.weight", "fuse.bias", "up1.weight", "head1.weight"):
            assert np.any(model[name].grad.data != 0), name


class TestPredictMask:
    def test_argmax_and_tie_rule(self):
        logits = np.zeros((1, 2, 1, 3), dtype=np.float32)
        logits[0, :, 0, 0] = (0.1, 0.9)
        logits[0, :, 0, 1] = (0.5, 0.5)
        logits[0, :, 0, 2] = (0.9, 0.1)
        assert predict_mask(Tensor(logits)).tolist() == [[[1, 1, 0]]]

    def test_skin_dominant_image_is_all_zero(self):
        logits = np.stack([np.ones((4, 4)), np.zeros((4, 4))])[None].astype(np.float32)
        mask = predict_mask(logits)
        assert mask.dtype == np.uint8
        assert not mask.any()

    def test_requires_two_channels(self):
        with pytest.raises(ShapeError):
            predict_mask(np.zeros((1, 3, 2, 2)))


class TestSegmentImage:
    def test_non_multiple_input_keeps_its_size(self):
        model = build_model(MICRO, seed=0)
        image = np.random.default_rng(0).integers(0, 256, size=(50, 70, 3), dtype=np.uint8)
        mask = segment_image(model, image)
        assert mask.shape == (50, 70)
        assert set(np.unique(mask)) <= {0, 1}

    def test_resized_inference_maps_back(self):
        model = build_model(MICRO, seed=0)
        image = np.full((45, 30, 3), 120, dtype=np.uint8)
        mask = segment_image(model, image, size=64)
        assert mask.shape == (45, 30)

    def test_size_must_be_multiple_of_32(self):
        model = build_model(MICRO, seed=0)
        with pytest.raises(ParameterError):
            segment_image(model, np.zeros((32, 32, 3), dtype=np.uint8), size=40)
