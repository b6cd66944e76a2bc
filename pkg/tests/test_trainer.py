import math

import numpy as np
import pytest

from gradcheck import max_rel_error, numeric_grad
from voxcodec.autodiff import Tape
from voxcodec.trainer import (
    TrainConfig,
    TrainSample,
    augment_batch,
    evaluate_loss,
    gen_synthetic_cloud,
    gen_synthetic_dataset,
    learning_rate,
    load_dataset,
    rasterize_sphere,
    rd_loss,
    save_dataset,
    train,
    train_ladder,
    wbce,
    wbce_op,
    write_curve,
)
from voxcodec.transforms import ModelParameters, NetConfig

MICRO = NetConfig((4, 4, 4), 4, 2, 1, 3)


class TestWbce:
    def test_uniform_logits(self):
        occ = np.array([1, 1, 1, 1, 0, 0, 0, 0], bool)
        assert wbce(np.zeros(8), occ, 3.0) == pytest.approx(4 * math.log(2), abs=1e-6)
        assert wbce(np.zeros(8), occ, 3.0) == pytest.approx(2.772589, abs=1e-6)

    def test_perfect_logits(self):
        occ = np.array([1, 0, 1, 0], bool)
        assert wbce(np.where(occ, 50.0, -50.0), occ) < 1e-20

    def test_single_occupied_inverse_e(self):
        p = 1 / math.e
        assert wbce(np.array([math.log(p / (1 - p))]), np.array([True])) == pytest.approx(1.0, abs=1e-12)

    def test_needs_occupied(self):
        with pytest.raises(ValueError):
            wbce(np.zeros(4), np.zeros(4, bool))

    def test_op_matches_numpy_and_gradcheck(self, rng):
        occ = rng.random((3, 1, 4, 4, 4)) < 0.3
        occ[:, 0, 0, 0, 0] = True
        params = {"l": rng.normal(scale=2, size=(3, 1, 4, 4, 4))}
        t = Tape(params)
        out = wbce_op(t, t.param("l"), occ, 3.0)
        ref = np.mean([wbce(params["l"][i], occ[i]) for i in range(3)])
        assert float(out.value) == pytest.approx(ref, rel=1e-12)
        g = t.backward(out)["l"]
        f = lambda: float(np.mean([wbce(params["l"][i], occ[i]) for i in range(3)]))
        idx, num = numeric_grad(f, params["l"], h=1e-5, max_entries=40, rng=rng)
        assert max_rel_error(g.ravel()[idx], num) < 1e-4


class TestRdLoss:
    def _batch(self, seed=0):
        return np.stack([s.occupancy for s in gen_synthetic_dataset(seed, 2, 8)])

    def test_gradcheck_all_parameters(self, rng):
        model = ModelParameters.initialize(MICRO, seed=2)
        model.params["fz.logscale"] += 0.3
        # generic point: zero biases on empty regions would sit on ReLU kinks
        for k, v in model.params.items():
            if k.endswith(".b"):
                v[...] = rng.normal(scale=0.2, size=v.shape)
        x = self._batch()
        _, _, grads = rd_loss(x, model, 4.0, np.random.default_rng(5))
        f = lambda: rd_loss(x, model, 4.0, np.random.default_rng(5), grad=False)[0]
        worst = 0.0
        for name in sorted(model.params):
            idx, num = numeric_grad(f, model.params[name], h=1e-5, max_entries=3, rng=rng)
            worst = max(worst, max_rel_error(grads[name].ravel()[idx], num, floor=1e-7))
        assert worst < 1e-4

    def test_lambda_zero_is_pure_rate(self):
        model = ModelParameters.initialize(MICRO, seed=2)
        x = self._batch()
        j, comps, grads = rd_loss(x, model, 0.0, np.random.default_rng(5))
        assert j == pytest.approx(comps["bpov"])
        assert not np.any(grads["syn.s0.up.w"])

    def test_distortion_weight_linear(self):
        model = ModelParameters.initialize(MICRO, seed=2)
        x = self._batch()
        j1, c1, _ = rd_loss(x, model, 2.0, np.random.default_rng(5), grad=False)
        j2, c2, _ = rd_loss(x, model, 4.0, np.random.default_rng(5), grad=False)
        assert j2 - j1 == pytest.approx(2.0 * c1["D"])

    def test_hard_rounding_mode(self):
        model = ModelParameters.initialize(MICRO, seed=2)
        a = rd_loss(self._batch(), model, 1.0, None, grad=False, noise=False)[0]
        b = rd_loss(self._batch(), model, 1.0, None, grad=False, noise=False)[0]
        assert a == b


class TestTrain:
    def test_zero_steps_returns_init(self):
        init = ModelParameters.initialize(MICRO, seed=9)
        cfg = TrainConfig(steps=0, net=MICRO, cube_size=8)
        model, hist = train(cfg, gen_synthetic_dataset(0, 4, 8), init=init)
        assert hist == []
        for k in init.params:
            np.testing.assert_array_equal(model.params[k], init.params[k])

    def test_short_run_deterministic_and_init_untouched(self, tmp_path):
        init = ModelParameters.initialize(MICRO, seed=9)
        before = {k: v.copy() for k, v in init.params.items()}
        cfg = TrainConfig(steps=5, batch=2, lr=1e-3, net=MICRO, cube_size=8, augment=True)
        data = gen_synthetic_dataset(0, 6, 8)
        m1, h1 = train(cfg, data, init=init, curve_path=tmp_path / "c.csv")
        m2, h2 = train(cfg, data, init=init)
        assert h1 == h2
        for k in before:
            np.testing.assert_array_equal(init.params[k], before[k])
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "step,R_y,R_z,D,J"

    def test_ladder_transfers(self):
        cfg = TrainConfig(steps=2, batch=2, lr=1e-3, net=MICRO, cube_size=8)
        models, hists = train_ladder(cfg, gen_synthetic_dataset(0, 4, 8), (16.0, 4.0))
        assert list(models) == [16.0, 4.0]
        assert all(len(h) == 2 for h in hists.values())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=-1)
        with pytest.raises(ValueError):
            TrainConfig(net="tiny", cube_size=12)
        assert TrainConfig(net="tiny").net.base_channels == (8, 16, 16)

    def test_evaluate_loss_keys(self):
        m = ModelParameters.initialize(MICRO)
        ev = evaluate_loss(m, gen_synthetic_dataset(0, 3, 8), 4.0)
        assert set(ev) == {"R_y", "R_z", "bpov", "D", "J"}

    def test_augment_preserves_counts(self, rng):
        x = (rng.random((4, 1, 6, 6, 6)) < 0.2).astype(float)
        y = augment_batch(x, rng)
        np.testing.assert_array_equal(y.sum(axis=(1, 2, 3, 4)), x.sum(axis=(1, 2, 3, 4)))

    def test_learning_rate_schedule(self):
        flat = TrainConfig(lr=1e-3, steps=11, net=MICRO, cube_size=8)
        assert [learning_rate(flat, s) for s in (0, 5, 10)] == [1e-3] * 3
        cos = TrainConfig(lr=1e-3, lr_end=1e-4, steps=11, net=MICRO, cube_size=8)
        np.testing.assert_allclose([learning_rate(cos, s) for s in (0, 5, 10)],
                                   [1e-3, 5.5e-4, 1e-4], rtol=1e-12)


class TestSynthetic:
    @pytest.mark.parametrize("r", [4, 5, 6])
    def test_sphere_surface_count(self, r):
        n = rasterize_sphere(16, (7.5, 7.5, 7.5), r).sum()
        assert abs(n - 4 * math.pi * r * r) <= 0.1 * 4 * math.pi * r * r

    def test_dataset_deterministic(self):
        a = gen_synthetic_dataset(3, 5, 16)
        b = gen_synthetic_dataset(3, 5, 16)
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.occupancy, t.occupancy)

    def test_every_sample_occupied(self):
        assert all(s.n_occupied >= 1 for s in gen_synthetic_dataset(4, 30, 16))

    def test_save_load(self, tmp_path):
        a = gen_synthetic_dataset(3, 4, 16)
        save_dataset(tmp_path / "d.npz", a)
        b = load_dataset(tmp_path / "d.npz")
        assert all(np.array_equal(s.occupancy, t.occupancy) for s, t in zip(a, b))

    def test_cloud(self):
        c = gen_synthetic_cloud(1, extent=32, shapes=2)
        assert len(c) > 0 and c.points.max() < 32 and c.precision == 5
