import numpy as np
import pytest

from screwpose.geometry import WorldPose, vec3, world_to_image_pose
from screwpose.noise import Annotation, NoiseLevel, annotate_dataset
from screwpose.patchify import PatchSpec, extract_patch, make_frame
from screwpose.phantom import ScrewModel, screw_keypoints
from screwpose.regressor import (
    AugmentSpec,
    DivergenceDetected,
    KeypointSet,
    MLPRegressor,
    ModelCheckpoint,
    NetworkConfig,
    ShapeMismatch,
    backward,
    forward,
    keypoint_targets,
    make_training_set,
    sample_initial_estimate,
    samples_to_arrays,
    train,
)


def small_config(**kw):
    base = dict(input_size=12, hidden=(8, 6), seed=3, epochs=5,
                batch_size=4, decay_epochs=())
    base.update(kw)
    return NetworkConfig(**base)


def loop_forward_oracle(model, x):
    """Independent forward pass with explicit python loops."""
    a = list(map(float, x))
    n_layers = len(model.weights)
    for li, (w, b) in enumerate(zip(model.weights, model.biases)):
        out = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += a[i] * w[i, j]
            if li < n_layers - 1 and s <= 0.0:
                s *= model.config.leaky_slope
            out.append(s)
        a = out
    return np.array(a)


def finite_difference_grads(model, x, t, eps=1e-4):
    """Central differences over every parameter."""
    def loss():
        out = model.forward_array(x)
        d = out - t
        return float((d * d).mean())

    grads_w, grads_b = [], []
    for w in model.weights:
        g = np.zeros_like(w)
        it = np.nditer(w, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            old = w[ix]
            w[ix] = old + eps
            up = loss()
            w[ix] = old - eps
            dn = loss()
            w[ix] = old
            g[ix] = (up - dn) / (2 * eps)
            it.iternext()
        grads_w.append(g)
    for b in model.biases:
        g = np.zeros_like(b)
        for i in range(b.size):
            old = b[i]
            b[i] = old + eps
            up = loss()
            b[i] = old - eps
            dn = loss()
            b[i] = old
            g[i] = (up - dn) / (2 * eps)
        grads_b.append(g)
    return grads_w, grads_b


def rel_err(a, b):
    return np.abs(a - b) / np.maximum.reduce(
        [np.abs(a), np.abs(b), np.full_like(a, 1e-6)])


class TestForward:
    def test_zero_parameters_zero_output(self):
        cfg = small_config()
        m = MLPRegressor.initialize(cfg)
        for w in m.weights:
            w[:] = 0.0
        for b in m.biases:
            b[:] = 0.0
        out = forward(m, np.ones(cfg.input_size))
        assert np.abs(out.flat()).max() == 0.0

    def test_single_linear_layer_outputs_bias_on_zero_input(self):
        cfg = NetworkConfig(input_size=6, hidden=(), seed=1)
        m = MLPRegressor.initialize(cfg)
        m.biases[0][:] = np.arange(12.0)
        out = m.forward_array(np.zeros(6))
        np.testing.assert_allclose(out, np.arange(12.0), atol=1e-15)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        m = MLPRegressor.initialize(small_config(seed=11))
        for _ in range(10):
            x = rng.normal(size=12)
            np.testing.assert_allclose(m.forward_array(x),
                                       loop_forward_oracle(m, x), atol=1e-12)

    def test_shape_mismatch(self):
        m = MLPRegressor.initialize(small_config())
        with pytest.raises(ShapeMismatch):
            m.forward_array(np.zeros(13))

    def test_keypoint_set_round_trip(self):
        k = KeypointSet.from_flat(np.arange(12.0))
        assert k.points.shape == (6, 2)
        np.testing.assert_array_equal(k.flat(), np.arange(12.0))
        with pytest.raises(ValueError):
            KeypointSet.from_flat([np.nan] * 12)


class TestBackward:
    def test_gradcheck_small_configs(self):
        rng = np.random.default_rng(5)
        for seed in range(5):
            cfg = NetworkConfig(
                input_size=int(rng.integers(4, 10)),
                hidden=tuple(int(h) for h in
                             rng.integers(3, 8, size=int(rng.integers(1, 3)))),
                seed=seed, leaky_slope=0.1)
            m = MLPRegressor.initialize(cfg)
            x = rng.normal(size=(3, cfg.input_size))
            t = rng.normal(size=(3, 12))
            gw, gb, _ = m.gradients(x, t)
            fw, fb = finite_difference_grads(m, x, t)
            for a, b in zip(gw + gb, fw + fb):
                assert rel_err(a, b).max() < 1e-4

    def test_gradient_zero_at_minimum(self):
        m = MLPRegressor.initialize(small_config(seed=8))
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 12))
        t = m.forward_array(x)
        gw, gb, loss = m.gradients(x, t)
        assert loss == 0.0
        for g in gw + gb:
            assert np.abs(g).max() == 0.0

    def test_duplicate_sample_mean_semantics(self):
        m = MLPRegressor.initialize(small_config(seed=9))
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 12))
        t = rng.normal(size=(1, 12))
        gw1, gb1, loss1 = m.gradients(x, t)
        gw2, gb2, loss2 = m.gradients(np.vstack([x, x]), np.vstack([t, t]))
        assert loss2 == pytest.approx(loss1, abs=1e-15)
        for a, b in zip(gw1 + gb1, gw2 + gb2):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_module_level_backward_wrapper(self):
        m = MLPRegressor.initialize(small_config(seed=2))
        rng = np.random.default_rng(1)
        patch = rng.normal(size=(3, 4))
        target = KeypointSet.from_flat(rng.normal(size=12))
        gw, gb, loss = backward(m, patch, target)
        assert loss > 0
        assert gw[0].shape == m.weights[0].shape


class TestTrainingSet:
    def _scene(self, geom):
        screw = ScrewModel()
        wp = WorldPose(vec3(0, 0, 0), geom.detector_u)
        ann = Annotation(world_pose=wp,
                         image_pose=world_to_image_pose(wp, geom),
                         eta=0.0, seed=0)
        img = np.zeros((geom.image_height, geom.image_width))
        return screw, wp, ann, img

    def test_zero_augmentation_gives_canonical_targets(self, geom):
        screw, wp, ann, img = self._scene(geom)
        spec = PatchSpec()
        samples = list(make_training_set(
            [("img_0", img)], {"img_0": [ann]}, geom, screw, spec,
            AugmentSpec(0.0, 0.0), patches_per_image=20, master_seed=1))
        assert len(samples) == 20
        frame = make_frame(ann.image_pose, spec)
        canonical = keypoint_targets(
            screw_keypoints(screw, wp, geom).pixels, frame)
        for s in samples:
            np.testing.assert_allclose(s.target, canonical, atol=1e-12)

    def test_sample_counts(self, geom):
        screw, wp, ann, img = self._scene(geom)
        images = [(f"img_{i}", img) for i in range(10)]
        anns = {f"img_{i}": [ann] for i in range(10)}
        samples = list(make_training_set(
            images, anns, geom, screw, PatchSpec(), AugmentSpec(),
            patches_per_image=20, master_seed=2))
        assert len(samples) == 200

    def test_estimate_shift_shifts_targets(self, geom):
        import math
        screw, wp, ann, img = self._scene(geom)
        spec = PatchSpec()
        kp_px = screw_keypoints(screw, wp, geom).pixels
        ip = ann.image_pose
        k = 3.0
        th = math.radians(ip.alpha_deg)
        shifted = ip.replace(u=ip.u + k * math.cos(th),
                             v=ip.v + k * math.sin(th))
        t0 = keypoint_targets(kp_px, make_frame(ip, spec))
        t1 = keypoint_targets(kp_px, make_frame(shifted, spec))
        expect = t0.reshape(6, 2).copy()
        expect[:, 0] -= 2.0 * k / spec.patch_width
        np.testing.assert_allclose(t1.reshape(6, 2), expect, atol=1e-12)

    def test_deterministic_in_seed(self, geom):
        screw, wp, ann, img = self._scene(geom)
        args = ([("img_0", img)], {"img_0": [ann]}, geom, screw, PatchSpec(),
                AugmentSpec(), 5)
        a = list(make_training_set(*args, master_seed=7))
        b = list(make_training_set(*args, master_seed=7))
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.target, t.target)
            np.testing.assert_array_equal(s.pixels, t.pixels)

    def test_initial_estimate_distribution(self, geom):
        ip = world_to_image_pose(WorldPose(vec3(0, 0, 0), geom.detector_u), geom)
        rng = np.random.default_rng(3)
        aug = AugmentSpec(5.0, 10.0)
        us = np.array([sample_initial_estimate(ip, aug, rng).u
                       for _ in range(4000)])
        assert us.std(ddof=1) == pytest.approx(5.0, rel=0.1)


class TestTrain:
    def _toy_linear(self, n=256, d=8, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, d)).astype(np.float32)
        a = rng.normal(size=(d, 12)) * 0.5
        c = rng.normal(size=12) * 0.1
        y = x.astype(np.float64) @ a + c
        return (x, y)

    def test_learns_linear_map_to_high_precision(self):
        data = self._toy_linear()
        cfg = NetworkConfig(input_size=8, hidden=(), seed=1, learning_rate=0.2,
                            momentum=0.9, batch_size=32, epochs=400,
                            decay_epochs=())
        result = train(cfg, data, data)
        model = result.checkpoint.to_model()
        x, y = data
        out = model.forward_array(x.astype(np.float64))
        mse = float(((out - y) ** 2).mean())
        assert mse < 1e-6

    def test_checkpoint_is_argmin_of_validation(self):
        data = self._toy_linear(n=64)
        cfg = NetworkConfig(input_size=8, hidden=(4,), seed=2,
                            learning_rate=0.05, epochs=12, batch_size=16,
                            decay_epochs=())
        result = train(cfg, data, data)
        k = int(np.argmin(result.val_errors)) + 1
        assert result.checkpoint.epoch == k
        assert result.checkpoint.val_error == min(result.val_errors)

    def test_zero_learning_rate_keeps_initialization(self):
        data = self._toy_linear(n=32)
        cfg = NetworkConfig(input_size=8, hidden=(4,), seed=5,
                            learning_rate=0.0, epochs=3, batch_size=8,
                            decay_epochs=())
        result = train(cfg, data, data)
        init = MLPRegressor.initialize(cfg)
        model = result.checkpoint.to_model()
        for a, b in zip(model.weights, init.weights):
            np.testing.assert_array_equal(a, b.astype(np.float32).astype(np.float64))

    def test_seed_determinism_bit_identical(self, tmp_path):
        data = self._toy_linear(n=64)
        cfg = NetworkConfig(input_size=8, hidden=(6,), seed=9,
                            learning_rate=0.05, epochs=6, batch_size=16,
                            decay_epochs=(4,))
        r1 = train(cfg, data, data)
        r2 = train(cfg, data, data)
        r1.checkpoint.save(tmp_path / "a.ckpt")
        r2.checkpoint.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_divergence_detected(self):
        data = self._toy_linear(n=64)
        cfg = NetworkConfig(input_size=8, hidden=(8,), seed=1,
                            learning_rate=1e6, epochs=5, batch_size=16,
                            decay_epochs=())
        with pytest.raises(DivergenceDetected):
            train(cfg, data, data)


class TestCheckpoint:
    def test_save_load_round_trip_bit_exact(self, tmp_path):
        m = MLPRegressor.initialize(small_config(seed=13))
        ck = ModelCheckpoint.snapshot(m, epoch=3, val_error=0.125)
        ck.save(tmp_path / "m.ckpt")
        back = ModelCheckpoint.load(tmp_path / "m.ckpt")
        back.save(tmp_path / "m2.ckpt")
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
        assert back.epoch == 3
        assert back.val_error == 0.125
        for a, b in zip(back.weights, ck.weights):
            np.testing.assert_array_equal(a, b)

    def test_loaded_model_predicts_identically(self, tmp_path):
        m = MLPRegressor.initialize(small_config(seed=21))
        ck = ModelCheckpoint.snapshot(m, 1, 0.5)
        ck.save(tmp_path / "m.ckpt")
        model_a = ck.to_model()
        model_b = ModelCheckpoint.load(tmp_path / "m.ckpt").to_model()
        x = np.linspace(-1, 1, 12)
        np.testing.assert_array_equal(model_a.forward_array(x),
                                      model_b.forward_array(x))
