import numpy as np
import pytest

from oracles import score_cam_reference
from pulmo.errors import DimensionError, EmptyCamError, LayerLookupError, TaskMismatchError, UndefinedMetricError, UsageError
from pulmo.imageio import read_ppm, resize_bilinear
from pulmo.nn import ModelConfig, build_classifier, build_unet
from pulmo.nn.training import capture_activations
from pulmo.scorecam import COLORMAP, Heatmap, colorize, localization_score, render_overlay, score_cam, write_overlay


def toy(channels=2, seed=0, size=8):
    model = build_classifier(
        ModelConfig(task="classification", family="plain_cnn", input_size=(size, size), base_channels=channels, depth=1), seed=seed
    )
    rng = np.random.default_rng(seed + 100)
    st = model.blocks[0].unit.bn.state
    st.running_mean[:] = rng.normal(0, 0.1, channels)
    st.running_var[:] = rng.uniform(0.5, 1.5, channels)
    model.fc.weight.data[:] = rng.normal(0, 2, model.fc.weight.shape)
    return model.eval()


def image(seed=1, size=8):
    return np.random.default_rng(seed).random((size, size)).astype(np.float32)


class TestScoreCam:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_step_by_step_reference(self, seed):
        model, x = toy(seed=seed), image(seed)
        ref, weights, target = score_cam_reference(model, x.astype(np.float64))
        hm = score_cam(model, x, "blocks.0")
        assert hm.target_class == target
        np.testing.assert_allclose(hm.weights, weights, atol=1e-6)
        np.testing.assert_allclose(hm.values, ref, atol=1e-5)

    def test_explicit_target(self):
        model, x = toy(seed=3), image(3)
        ref, _, _ = score_cam_reference(model, x.astype(np.float64), target=1)
        np.testing.assert_allclose(score_cam(model, x, "blocks.0", 1).values, ref, atol=1e-5)

    def test_single_channel_is_normalized_relu(self):
        model, x = toy(channels=1), image()
        hm = score_cam(model, x, "blocks.0")
        act = capture_activations(model, x, "blocks.0").data[0, 0]
        up = np.maximum(resize_bilinear(act, 8, 8).astype(np.float64), 0)
        np.testing.assert_allclose(hm.values, (up - up.min()) / (up.max() - up.min()), atol=1e-6)
        assert hm.weights.tolist() == [1.0]

    def test_input_blind_head_gives_uniform_weights(self):
        model = toy(channels=4)
        model.fc.weight.data[:] = 0
        model.fc.bias.data[:] = [0.3, -0.2]
        hm = score_cam(model, image(), "blocks.0")
        live = np.isfinite(hm.scores)
        np.testing.assert_allclose(hm.weights[live], 1 / live.sum(), atol=1e-12)

    def test_range_and_weights(self):
        hm = score_cam(toy(seed=4), image(4), "blocks.0")
        assert hm.values.min() >= 0 and hm.values.max() == pytest.approx(1.0)
        assert hm.weights.sum() == pytest.approx(1, abs=1e-6)
        assert (hm.height, hm.width) == (8, 8)

    def test_constant_channels_drop_out(self):
        model = toy(channels=2)
        unit = model.blocks[0].unit
        unit.conv.weight.data[1] = 0  # channel 1 becomes a constant map
        hm = score_cam(model, image(), "blocks.0")
        assert hm.scores[1] == -np.inf and hm.weights[1] == 0 and hm.weights[0] == pytest.approx(1)

    def test_all_constant(self):
        model = toy()
        model.blocks[0].unit.conv.weight.data[:] = 0
        with pytest.raises(EmptyCamError):
            score_cam(model, image(), "blocks.0")

    def test_bad_layer_and_task(self):
        with pytest.raises(LayerLookupError):
            score_cam(toy(), image(), "blocks.9")
        seg = build_unet(ModelConfig(input_size=(8, 8), base_channels=2, depth=1))
        with pytest.raises(TaskMismatchError):
            score_cam(seg, image())

    def test_default_layer(self):
        hm = score_cam(toy(), image())
        assert hm.source_layer == "blocks.0.unit"


class TestLocalization:
    def test_inside(self):
        v = np.zeros((4, 4))
        v[1:3, 1:3] = 0.5
        m = np.zeros((4, 4), bool)
        m[1:3, 1:4] = True
        assert localization_score(v, m) == 1.0

    def test_uniform_is_area_fraction(self):
        m = np.zeros((10, 10), bool)
        m[:3] = True
        assert localization_score(Heatmap(np.full((10, 10), 0.7), 0, "x"), m) == pytest.approx(0.30)

    def test_zero_total(self):
        with pytest.raises(UndefinedMetricError):
            localization_score(np.zeros((2, 2)), np.ones((2, 2), bool))
        with pytest.raises(DimensionError):
            localization_score(np.ones((2, 2)), np.ones((3, 2), bool))


class TestOverlay:
    def test_colormap_endpoints(self):
        assert COLORMAP.shape == (256, 3)
        assert COLORMAP[0].tolist() == [0, 0, 255] and COLORMAP[255].tolist() == [255, 0, 0]
        assert colorize(np.array([0.0, 1.0])).tolist() == [[0, 0, 255], [255, 0, 0]]

    def test_alpha_zero_is_gray(self):
        img = np.arange(16, dtype=np.uint8).reshape(4, 4) * 10
        out = render_overlay(np.random.default_rng(0).random((4, 4)), img, alpha=0.0)
        np.testing.assert_array_equal(out, np.repeat(img[..., None], 3, axis=2))

    def test_alpha_one_is_colormap(self):
        v = np.random.default_rng(1).random((4, 4))
        np.testing.assert_array_equal(render_overlay(v, np.zeros((4, 4), np.uint8), alpha=1.0), colorize(v))

    def test_errors(self):
        with pytest.raises(DimensionError):
            render_overlay(np.zeros((2, 2)), np.zeros((3, 3), np.uint8))
        with pytest.raises(UsageError):
            render_overlay(np.zeros((2, 2)), np.zeros((2, 2), np.uint8), alpha=1.5)

    def test_written_ppm(self, tmp_path):
        v = np.random.default_rng(2).random((5, 6))
        img = np.full((5, 6), 100, np.uint8)
        write_overlay(tmp_path / "o.ppm", v, img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "o.ppm"), render_overlay(v, img))
