import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pulmo import ops
from pulmo.errors import ConfigError, DimensionError, DivergenceError, LayerLookupError, TaskMismatchError, UsageError
from pulmo.gradcheck import gradcheck
from pulmo.nn import (
    BConvLSTM,
    ConvLSTMCell,
    ModelConfig,
    TrainSchedule,
    bconvlstm_fuse,
    build_classifier,
    build_model,
    build_modified_unet,
    build_unet,
    count_conv_layers,
)
from pulmo.nn.training import (
    EarlyStopping,
    capture_activations,
    fit,
    predict_class,
    predict_mask,
)
from pulmo.optim import OptimizerConfig, sgd_momentum_step
from pulmo.tensor import Tensor, no_grad


def seg_config(**kw):
    return ModelConfig(**{"task": "segmentation", "family": "unet", "input_size": (8, 8), "base_channels": 2, "depth": 1, **kw})


def cls_config(**kw):
    return ModelConfig(**{"task": "classification", "family": "plain_cnn", "input_size": (16, 16), "base_channels": 2, "depth": 2, **kw})


def sigmoid(v):
    return 1 / (1 + np.exp(-v))


class TestConfig:
    def test_indivisible_input(self):
        with pytest.raises(ConfigError):
            seg_config(input_size=(12, 12), depth=3)

    def test_family_task_mismatch(self):
        with pytest.raises(ConfigError):
            ModelConfig(task="classification", family="unet")
        with pytest.raises(ConfigError):
            build_classifier(ModelConfig(task="segmentation", family="unet"))

    def test_round_trip(self):
        cfg = cls_config(family="densenet_mini")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_schedule_bounds(self):
        with pytest.raises(ConfigError):
            TrainSchedule(max_epochs=3, patience=5)
        with pytest.raises(ConfigError):
            TrainSchedule(batch_size=0)
        assert TrainSchedule.segmentation().max_epochs == 50
        assert TrainSchedule.classification().max_epochs == 15


class TestUNet:
    def test_23_conv_layers_at_depth_4(self):
        model = build_unet(seg_config(depth=4, input_size=(16, 16)))
        assert count_conv_layers(model) == 23

    def test_toy_shape(self):
        model = build_unet(seg_config())
        with no_grad():
            out = model(Tensor(np.random.default_rng(0).random((1, 1, 8, 8))))
        assert out.shape == (1, 1, 8, 8)
        assert ((out.data > 0) & (out.data < 1)).all()

    def test_parameter_count_hand_sum(self):
        conv = lambda cin, cout, k: cout * cin * k * k + cout
        expected = (
            conv(1, 2, 3) + conv(2, 2, 3)  # encoder
            + conv(2, 4, 3) + conv(4, 4, 3)  # bottleneck
            + (4 * 2 * 4 + 2)  # up-conv
            + conv(4, 2, 3) + conv(2, 2, 3)  # decoder
            + conv(2, 1, 1)  # head
        )
        assert build_unet(seg_config()).num_parameters() == expected == 431

    @settings(max_examples=8, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.sampled_from(["unet", "modified_unet"]))
    def test_output_matches_input_extent(self, depth, mult, family):
        size = 2**depth * mult
        model = build_model(seg_config(depth=depth, input_size=(size, size), family=family))
        with no_grad():
            assert model(Tensor(np.zeros((1, 1, size, size)))).shape == (1, 1, size, size)

    def test_builder_family_guard(self):
        with pytest.raises(ConfigError):
            build_unet(seg_config(family="modified_unet"))
        with pytest.raises(ConfigError):
            build_modified_unet(seg_config())


class TestModifiedUNet:
    def test_shape_and_range(self):
        model = build_modified_unet(seg_config(family="modified_unet"))
        with no_grad():
            out = model(Tensor(np.random.default_rng(1).random((2, 1, 8, 8)))).data
        assert out.shape == (2, 1, 8, 8) and ((out > 0) & (out < 1)).all()

    def test_more_parameters_than_unet(self):
        cfg = seg_config(depth=2, input_size=(8, 8))
        assert build_modified_unet(ModelConfig(**{**cfg.to_dict(), "family": "modified_unet"})).num_parameters() > build_unet(cfg).num_parameters()

    def test_dense_bottleneck_wiring(self):
        model = build_modified_unet(seg_config(family="modified_unet"))
        assert model.bottleneck.pair2.conv1.conv.weight.shape[1] == 2 + 4


class TestBConvLSTM:
    def test_zero_in_zero_out(self):
        params = BConvLSTM(2, np.random.default_rng(0))
        z = Tensor(np.zeros((1, 2, 3, 3)))
        np.testing.assert_array_equal(bconvlstm_fuse(z, z, params).data, 0.0)

    def test_shape_mismatch(self):
        params = BConvLSTM(1, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            bconvlstm_fuse(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), params)

    def test_scalar_recursion(self):
        rng = np.random.default_rng(2)
        params = BConvLSTM(1, rng)
        for cell in (params.forward_cell, params.backward_cell):
            cell.gates.bias.data[:] = rng.normal(size=4)
        params.out.bias.data[:] = rng.normal(size=1)
        s, u = 0.7, -0.4

        def run(cell, xs):
            w = cell.gates.weight.data[:, :, 1, 1].astype(np.float64)  # 1x1 image: only the centre tap sees data
            b = cell.gates.bias.data.astype(np.float64)
            h = c = 0.0
            for x in xs:
                z = w[:, 0] * x + w[:, 1] * h + b
                i, f, o, g = sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2]), np.tanh(z[3])
                c = f * c + i * g
                h = o * np.tanh(c)
            return h

        hf, hb = run(params.forward_cell, [s, u]), run(params.backward_cell, [u, s])
        w = params.out.weight.data[0, :, 0, 0]
        expected = np.tanh(w[0] * hf + w[1] * hb + params.out.bias.data[0])
        got = bconvlstm_fuse(Tensor([[[[s]]]]), Tensor([[[[u]]]]), params).item()
        assert got == pytest.approx(expected, abs=1e-5)

    def test_gates_open_carries_cell_state(self):
        cell = ConvLSTMCell(1, 1, np.random.default_rng(3))
        cell.gates.weight.data[:] = 0
        cell.gates.bias.data[:] = [-50.0, 50.0, 50.0, 0.0]  # i shut, f open, o open
        skip = np.random.default_rng(4).normal(size=(1, 1, 3, 3))
        h, c = cell.step(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(skip))
        np.testing.assert_allclose(c.data, skip, atol=1e-6)
        np.testing.assert_allclose(h.data, np.tanh(skip), atol=1e-6)

    def test_gradient_on_1x2x4x4(self):
        params = BConvLSTM(2, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        arrays = [rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 4, 4))]
        assert gradcheck(lambda s, u: bconvlstm_fuse(s, u, params), arrays, rng) < 1e-4


class TestClassifiers:
    def test_probabilities_sum_to_one(self):
        model = build_classifier(cls_config(depth=4, input_size=(64, 64)))
        probs, label = predict_class(model, np.random.default_rng(0).random((64, 64)))
        assert probs.shape == (2,) and probs.sum() == pytest.approx(1, abs=1e-6)
        assert label == int(np.argmax(probs))

    def test_tie_goes_to_lower_index(self):
        model = build_classifier(cls_config())
        model.fc.weight.data[:] = 0
        probs, label = predict_class(model, np.zeros((16, 16)))
        np.testing.assert_allclose(probs, [0.5, 0.5])
        assert label == 0

    def test_zeroed_residual_branch_is_relu_of_shortcut(self):
        model = build_classifier(cls_config(family="resnet_mini")).eval()
        unit = model.blocks[0].unit
        unit.bn2.gamma.data[:] = 0
        unit.bn2.beta.data[:] = 0
        x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 16, 16)))
        with no_grad():
            np.testing.assert_array_equal(unit(x).data, ops.relu(unit.shortcut(x)).data)

    def test_dense_stage_channel_growth(self):
        model = build_classifier(cls_config(family="densenet_mini", base_channels=4))
        stage = model.blocks[1]
        x = Tensor(np.zeros((1, stage.cin, 8, 8)))
        with no_grad():
            for k in range(len(stage.layers) + 1):
                assert stage.features(x, k).shape[1] == stage.cin + k * stage.growth

    def test_unknown_family(self):
        with pytest.raises(ConfigError):
            cls_config(family="vgg")


class TestCapture:
    def test_last_layer_extent(self):
        model = build_classifier(cls_config(depth=4, input_size=(64, 64)))
        assert capture_activations(model, np.zeros((64, 64)), "blocks.3").shape[2:] == (4, 4)

    def test_purity(self):
        model = build_classifier(cls_config(family="resnet_mini"))
        model.train()
        img = np.random.default_rng(2).random((16, 16))
        before = {k: v.copy() for k, v in model.state_dict().items()}
        a = capture_activations(model, img, model.default_cam_layer).data
        b = capture_activations(model, img, model.default_cam_layer).data
        np.testing.assert_array_equal(a, b)
        assert model.training
        for k, v in model.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_zero_image_zero_bias_first_layer(self):
        model = build_unet(seg_config())
        assert not capture_activations(model, np.zeros((8, 8)), "enc.0.conv1").data.any()

    def test_unknown_layer_lists_valid(self):
        model = build_classifier(cls_config())
        with pytest.raises(LayerLookupError) as info:
            capture_activations(model, np.zeros((16, 16)), "nope")
        assert "blocks.0" in info.value.valid


class TestPredict:
    def test_negative_bias_all_zero_mask(self):
        model = build_unet(seg_config())
        model.head.conv.weight.data[:] = 0
        model.head.conv.bias.data[:] = -10
        assert not predict_mask(model, np.random.default_rng(0).random((8, 8))).any()

    def test_threshold_zero_all_ones(self):
        mask = predict_mask(build_unet(seg_config()), np.random.default_rng(0).random((8, 8)), threshold=0.0)
        assert mask.shape == (8, 8) and mask.all()

    def test_task_mismatch(self):
        with pytest.raises(TaskMismatchError):
            predict_mask(build_classifier(cls_config()), np.zeros((16, 16)))
        with pytest.raises(TaskMismatchError):
            predict_class(build_unet(seg_config()), np.zeros((8, 8)))


class TestEarlyStopping:
    def test_patience_example(self):
        stopper = EarlyStopping(5)
        losses = [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99]
        stops = [stopper.update(e, v) for e, v in enumerate(losses, start=1)]
        assert stops == [False] * 6 + [True]
        assert stopper.best_epoch == 2

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.integers(1, 6))
    def test_never_runs_past_patience(self, losses, patience):
        stopper = EarlyStopping(patience)
        for epoch, v in enumerate(losses, start=1):
            if stopper.update(epoch, v):
                break
        assert epoch - stopper.best_epoch <= patience
        assert stopper.best == min(losses[:epoch])


def toy_classification(n=24, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(0, 0.1, size=(n, 1, 16, 16)).astype(np.float32)
    x[y == 1, :, 4:12, 4:12] += 1.0
    return x, y


class TestFit:
    def test_max_epochs_one(self):
        model = build_classifier(cls_config())
        x, y = toy_classification()
        hist = fit(model, (x, y), (x[:8], y[:8]), TrainSchedule(max_epochs=1, patience=1, batch_size=5))
        assert hist.epochs == 1 and hist.best_epoch == 1 and not hist.stopped_early

    def test_repeatable(self):
        x, y = toy_classification()
        runs = []
        for _ in range(2):
            model = build_classifier(cls_config(), seed=3)
            hist = fit(model, (x, y), (x[:8], y[:8]), TrainSchedule(max_epochs=3, patience=3, batch_size=7, seed=9))
            runs.append((hist, model.state_dict()))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            assert runs[0][1][k].tobytes() == runs[1][1][k].tobytes()

    def test_best_epoch_has_min_val_loss(self):
        x, y = toy_classification()
        hist = fit(build_classifier(cls_config()), (x, y), (x[:8], y[:8]), TrainSchedule(max_epochs=4, patience=2, batch_size=8))
        assert hist.val_loss[hist.best_epoch - 1] == min(hist.val_loss)

    def test_single_step_decreases_loss(self):
        model = build_unet(seg_config(dropout_rate=0.0))
        rng = np.random.default_rng(5)
        x = rng.random((1, 1, 8, 8)).astype(np.float32)
        y = (x > 0.5).astype(np.float32)
        params = model.named_parameters()
        with no_grad():
            before = ops.binary_cross_entropy(model(Tensor(x)), y).item()
        ops.binary_cross_entropy(model(Tensor(x)), y).backward()
        sgd_momentum_step(params, OptimizerConfig(1e-4, 0.0))
        with no_grad():
            after = ops.binary_cross_entropy(model(Tensor(x)), y).item()
        assert after < before

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch_and_batch(self):
        x, y = toy_classification()
        x = x * 1e3
        sched = TrainSchedule(max_epochs=5, patience=5, batch_size=8, optimizer=OptimizerConfig(1e30, 0.9))
        with pytest.raises(DivergenceError) as info:
            fit(build_classifier(cls_config()), (x, y), (x[:8], y[:8]), sched)
        assert info.value.epoch >= 1

    def test_empty_and_mismatched_inputs(self):
        model = build_classifier(cls_config())
        x, y = toy_classification()
        with pytest.raises(UsageError):
            fit(model, (x[:0], y[:0]), (x, y), TrainSchedule(max_epochs=1, patience=1))
        with pytest.raises(UsageError):
            fit(model, (x[:, :, :8, :8], y), (x, y), TrainSchedule(max_epochs=1, patience=1))

    def test_learns_toy_task(self):
        x, y = toy_classification(48)
        model = build_classifier(cls_config(), seed=1)
        hist = fit(model, (x, y), (x[:16], y[:16]), TrainSchedule(max_epochs=10, patience=10, batch_size=8, optimizer=OptimizerConfig(0.05, 0.9)))
        assert max(hist.val_metric) >= 0.9
