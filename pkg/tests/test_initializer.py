import time

import numpy as np
import pytest

from reginit.errors import DivergedError, FormatError, InvalidArgumentError
from reginit.evaluation import pose_errors
from reginit.geometry import EXTENDED_RANGE, STANDARD_RANGE, PoseParams
from reginit.initializer import (
    InitializerVariant,
    RegressorModel,
    TrainingConfig,
    build_input,
    channel_count,
    forward,
    generate_dataset,
    load_dataset,
    load_model,
    predict_initial_pose,
    predict_many,
    reference_images,
    save_dataset,
    save_model,
    train,
)
from reginit.initializer import network
from reginit.projector import render_drr
from reginit.registration import RegistrationProblem, OptimizerConfig

VARIANTS = list(InitializerVariant)


def fd_check(params, x, target, name, index, eps=1e-6):
    p = params[name]
    old = p[index]
    p[index] = old + eps
    up, _ = network.loss_and_grads(params, x, target)
    p[index] = old - eps
    down, _ = network.loss_and_grads(params, x, target)
    p[index] = old
    return (up - down) / (2 * eps)


class TestBackprop:
    @pytest.mark.parametrize("name", network.param_names())
    def test_matches_central_differences(self, name):
        rng = np.random.default_rng(0)
        params = network.init_params(3, rng, dtype=np.float64)
        for k in params:
            if k.endswith("bias"):
                params[k] = rng.normal(scale=0.05, size=params[k].shape)
        x = rng.normal(size=(2, 3, 16, 16))
        target = rng.uniform(-0.5, 0.5, size=(2, 6))
        _, grads = network.loss_and_grads(params, x, target)
        g = grads[name]
        flat = np.argsort(np.abs(g).ravel())[::-1][:5]  # the largest entries, away from round-off
        for f in flat:
            idx = np.unravel_index(f, g.shape)
            num = fd_check(params, x, target, name, idx)
            assert abs(num - g[idx]) <= 1e-4 * abs(g[idx]), (name, idx, num, g[idx])

    def test_output_shape_and_range(self):
        params = network.init_params(1, np.random.default_rng(1))
        y = network.forward(params, np.random.default_rng(2).normal(size=(3, 1, 32, 32)).astype(np.float32))
        assert y.shape == (3, 6)
        assert np.all(np.abs(y) < 1)

    def test_param_layout(self):
        shapes = network.param_shapes(8)
        assert list(shapes) == network.param_names()
        assert shapes["conv1.weight"] == (16, 8, 3, 3)
        assert shapes["fc.weight"] == (6, 128)

    def test_conv_output_size(self):
        x = np.zeros((1, 1, 128, 128))
        out, _ = network.conv_forward(x, np.zeros((4, 1, 3, 3)), np.zeros(4))
        assert out.shape == (1, 4, 64, 64)


class TestInputs:
    def test_channel_counts(self):
        assert channel_count("target_only") == 1
        assert channel_count("two_image_pe") == 6
        assert channel_count("two_image_pe_ac") == 8
        assert channel_count("two_image_pe", pe_frequencies=2) == 10

    def test_target_only(self):
        t = np.arange(12.0).reshape(3, 4)
        x = build_input("target_only", t)
        assert x.shape == (1, 3, 4)
        assert x.min() == 0.0 and x.max() == 1.0

    def test_coordinate_channels(self):
        rng = np.random.default_rng(0)
        t, m = rng.random((128, 128)), rng.random((128, 128))
        x = build_input("two_image_pe_ac", t, m)
        assert x.shape == (8, 128, 128)
        v = x[7]
        np.testing.assert_array_equal(v[:, 0], -1.0)
        np.testing.assert_array_equal(v[:, 127], 1.0)
        u = x[6]
        np.testing.assert_array_equal(u[0], -1.0)
        np.testing.assert_array_equal(u[127], 1.0)
        # positional encoding pairs lie on the unit circle
        np.testing.assert_allclose(x[2] ** 2 + x[3] ** 2, 1.0, atol=1e-12)
        np.testing.assert_allclose(x[4] ** 2 + x[5] ** 2, 1.0, atol=1e-12)
        np.testing.assert_array_equal(build_input("two_image_pe", t, m), x[:6])

    def test_reference_rules(self):
        t = np.random.default_rng(0).random((8, 8))
        with pytest.raises(InvalidArgumentError):
            build_input("target_only", t, t)
        with pytest.raises(InvalidArgumentError):
            build_input("two_image_pe", t)
        with pytest.raises(InvalidArgumentError):
            build_input("two_image_pe", t, np.ones((8, 9)))
        with pytest.raises(ValueError):
            build_input("three_images", t)


class TestDataset:
    def test_round_robin_and_range(self, small_phantom, small_cam):
        vols = {"a": small_phantom, "b": small_phantom}
        samples = generate_dataset(vols, EXTENDED_RANGE, 5, seed=3, cam=small_cam)
        assert [s.volume_id for s in samples] == ["a", "b", "a", "b", "a"]
        assert all(EXTENDED_RANGE.contains(s.theta_true) for s in samples)
        assert samples[0].target_image.data.shape == (32, 32)

    def test_deterministic(self, small_phantom, small_cam):
        a = generate_dataset([small_phantom], STANDARD_RANGE, 3, seed=9, cam=small_cam)
        b = generate_dataset([small_phantom], STANDARD_RANGE, 3, seed=9, cam=small_cam)
        for x, y in zip(a, b):
            assert x.theta_true == y.theta_true
            np.testing.assert_array_equal(x.target_image.data, y.target_image.data)

    def test_rejects_empty(self, small_cam):
        with pytest.raises(InvalidArgumentError):
            generate_dataset([], STANDARD_RANGE, 3, seed=0, cam=small_cam)

    def test_round_trip(self, small_phantom, small_cam, tmp_path):
        samples = generate_dataset([small_phantom], STANDARD_RANGE, 4, seed=1, cam=small_cam)
        refs = reference_images([small_phantom], small_cam)
        save_dataset(tmp_path / "ds", samples, refs, meta={"note": 1})
        loaded, lrefs, meta = load_dataset(tmp_path / "ds")
        assert meta == {"note": 1}
        assert [s.theta_true for s in loaded] == [s.theta_true for s in samples]
        np.testing.assert_allclose(lrefs["vol0"].data, refs["vol0"].data, rtol=1e-6)

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nothing")
        (tmp_path / "bad").mkdir()
        (tmp_path / "bad" / "manifest.json").write_text("{not json")
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "bad")


class TestModel:
    def test_zero_model_predicts_midpoint(self):
        for rng_ in (STANDARD_RANGE, EXTENDED_RANGE):
            m = RegressorModel.zeros("target_only", rng_)
            pose = forward(m, np.random.default_rng(0).random((1, 32, 32)))
            assert pose == rng_.midpoint

    def test_predictions_stay_in_range(self, small_phantom, small_cam):
        m = RegressorModel.create("two_image_pe_ac", STANDARD_RANGE, seed=3)
        target = render_drr(small_phantom, PoseParams(5, 5, 5, 5, 5, 5), small_cam)
        pose = predict_initial_pose(m, target, small_phantom, small_cam)
        assert STANDARD_RANGE.contains(pose)

    def test_two_image_needs_volume_or_reference(self, small_phantom, small_cam):
        m = RegressorModel.create("two_image_pe", STANDARD_RANGE)
        target = render_drr(small_phantom, PoseParams(), small_cam)
        with pytest.raises(InvalidArgumentError):
            predict_initial_pose(m, target)
        ref = render_drr(small_phantom, PoseParams(), small_cam)
        assert predict_initial_pose(m, target, reference=ref) == predict_initial_pose(m, target, small_phantom, small_cam)

    def test_wrong_channel_count(self):
        m = RegressorModel.create("target_only", STANDARD_RANGE)
        with pytest.raises(InvalidArgumentError):
            m.predict_normalized(np.zeros((2, 16, 16)))

    def test_rejects_bad_parameters(self):
        m = RegressorModel.create("target_only", STANDARD_RANGE)
        params = dict(m.params)
        params["fc.bias"] = np.zeros(5, dtype=np.float32)
        with pytest.raises(InvalidArgumentError):
            RegressorModel("target_only", params, STANDARD_RANGE)
        params["fc.bias"] = np.array([np.nan] * 6, dtype=np.float32)
        with pytest.raises(InvalidArgumentError):
            RegressorModel("target_only", params, STANDARD_RANGE)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_weight_file_round_trip(self, variant, tmp_path):
        m = RegressorModel.create(variant, EXTENDED_RANGE, seed=5)
        path = save_model(m, tmp_path / "m.rgiw", provenance={"root_seed": 1})
        back = load_model(path)
        assert back.variant == m.variant and back.pose_range == m.pose_range and back.seed == 5
        for k in m.params:
            np.testing.assert_array_equal(back.params[k], m.params[k])

    def test_weight_file_corruption(self, tmp_path):
        path = save_model(RegressorModel.create("target_only", STANDARD_RANGE), tmp_path / "m.rgiw")
        raw = path.read_bytes()
        (tmp_path / "short.rgiw").write_bytes(raw[:-4])
        with pytest.raises(FormatError):
            load_model(tmp_path / "short.rgiw")
        (tmp_path / "magic.rgiw").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            load_model(tmp_path / "magic.rgiw")

    def test_training_config_validation(self):
        for kw in ({"epochs": 0}, {"learning_rate": 0.0}, {"optimizer": "rmsprop"}, {"seed": -1}):
            with pytest.raises(InvalidArgumentError):
                TrainingConfig(**kw)


@pytest.fixture(scope="module")
def tiny_set(small_phantom, small_cam):
    samples = generate_dataset([small_phantom], STANDARD_RANGE, 10, seed=3, cam=small_cam)
    return samples, reference_images([small_phantom], small_cam)


class TestTraining:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_memorizes_ten_samples(self, variant, tiny_set):
        samples, refs = tiny_set
        model, trace = train(RegressorModel.create(variant, STANDARD_RANGE), samples,
                             TrainingConfig(epochs=500), refs)
        assert len(trace) == 500 and trace[-1] < trace[0]
        use_refs = [refs["vol0"]] * len(samples) if model.variant.needs_reference else None
        preds = predict_many(model, [s.target_image for s in samples], use_refs)
        err = np.array([pose_errors(p, s.theta_true) for p, s in zip(preds, samples)])
        assert err[:, :3].mean() < 2.0

    def test_learns_beyond_the_midpoint(self, small_phantom, small_cam):
        vols = {"a": small_phantom}
        train_set = generate_dataset(vols, STANDARD_RANGE, 500, seed=21, cam=small_cam)
        held_out = generate_dataset(vols, STANDARD_RANGE, 50, seed=22, cam=small_cam)
        model, trace = train(RegressorModel.create("target_only", STANDARD_RANGE, seed=1), train_set,
                             TrainingConfig(epochs=20))
        assert trace[-1] < trace[0]
        preds = predict_many(model, [s.target_image for s in held_out])
        model_mae = np.mean([pose_errors(p, s.theta_true)[:3] for p, s in zip(preds, held_out)])
        midpoint_mae = np.mean([pose_errors(STANDARD_RANGE.midpoint, s.theta_true)[:3] for s in held_out])
        assert model_mae < midpoint_mae

    def test_sgd_option_reduces_loss(self, tiny_set):
        samples, _ = tiny_set
        _, trace = train(RegressorModel.create("target_only", STANDARD_RANGE), samples,
                         TrainingConfig(epochs=30, optimizer="sgd", learning_rate=0.05))
        assert trace[-1] < trace[0]

    def test_deterministic(self, tiny_set):
        samples, refs = tiny_set
        cfg = TrainingConfig(epochs=3, batch_size=4, seed=2)
        a, ta = train(RegressorModel.create("two_image_pe", STANDARD_RANGE), samples, cfg, refs)
        b, tb = train(RegressorModel.create("two_image_pe", STANDARD_RANGE), samples, cfg, refs)
        assert ta == tb
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_missing_references(self, tiny_set):
        samples, _ = tiny_set
        with pytest.raises(InvalidArgumentError):
            train(RegressorModel.create("two_image_pe", STANDARD_RANGE), samples, TrainingConfig(epochs=1))

    def test_empty_set(self):
        with pytest.raises(InvalidArgumentError):
            train(RegressorModel.create("target_only", STANDARD_RANGE), [], TrainingConfig(epochs=1))

    def test_divergence_is_reported(self, tiny_set):
        samples, _ = tiny_set
        with pytest.raises(DivergedError):
            with np.errstate(all="ignore"):
                train(RegressorModel.create("target_only", STANDARD_RANGE), samples,
                      TrainingConfig(epochs=20, optimizer="sgd", learning_rate=1e30))


def test_prediction_cheaper_than_one_registration_iteration(phantom, cam, fast_projection):
    target = render_drr(phantom, PoseParams(3, 3, 3, 3, 3, 3), cam, fast_projection)
    model = RegressorModel.create("target_only", STANDARD_RANGE)
    problem = RegistrationProblem(target, phantom, cam, projection=fast_projection)
    predict_initial_pose(model, target)
    problem.loss_and_gradient(PoseParams(), OptimizerConfig().fd_steps)
    t0 = time.perf_counter()
    predict_initial_pose(model, target)
    t_pred = time.perf_counter() - t0
    t0 = time.perf_counter()
    problem.loss_and_gradient(PoseParams(), OptimizerConfig().fd_steps)
    t_iter = time.perf_counter() - t0
    assert t_pred < t_iter
