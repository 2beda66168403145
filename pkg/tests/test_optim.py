import math

import numpy as np
import pytest

from nonfat import model as M
from nonfat.config import TrainConfig
from nonfat.data import normalize, split, synth_dataset
from nonfat.errors import DivergenceError
from nonfat.optim import (
    AdamState,
    TrainHistory,
    adam_step,
    grad_check,
    metrics,
    smoothed,
    tiny_model,
    train,
)


class TestAdam:
    def test_zero_gradient(self):
        p = {"a": np.array([1.0, -2.0])}
        out, st = adam_step(p, {"a": np.zeros(2)}, AdamState(), 0.1)
        assert np.array_equal(out["a"], p["a"])
        assert st.step == 1

    def test_first_step_by_hand(self):
        g, lr = 0.37, 0.01
        out, st = adam_step({"x": np.array(2.0)}, {"x": np.array(g)}, AdamState(), lr)
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        assert float(out["x"]) == pytest.approx(2.0 - lr * m_hat / (math.sqrt(v_hat) + 1e-8),
                                                rel=1e-15)
        assert float(out["x"]) == pytest.approx(2.0 - lr, rel=1e-6)
        assert float(st.m["x"]) == pytest.approx(0.1 * g)

    def test_two_steps_by_hand(self):
        p, st = {"x": np.array(0.0)}, AdamState()
        p, st = adam_step(p, {"x": np.array(1.0)}, st, 0.1)
        p, st = adam_step(p, {"x": np.array(-2.0)}, st, 0.1)
        m = 0.9 * 0.1 + 0.1 * -2.0
        v = 0.999 * 0.001 + 0.001 * 4.0
        step2 = 0.1 * (m / 0.19) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        assert float(p["x"]) == pytest.approx(-0.1 / (1 + 1e-8) - step2, rel=1e-12)

    def test_non_finite_named(self):
        with pytest.raises(DivergenceError, match="'bad'"):
            adam_step({"bad": np.zeros(2)}, {"bad": np.array([0.0, np.nan])}, AdamState(), 0.1)

    def test_minimizes_quadratic(self):
        p, st = {"x": np.array([3.0, -1.0])}, AdamState()
        for _ in range(2000):
            p, st = adam_step(p, {"x": 2 * p["x"]}, st, 0.01)
        assert np.max(np.abs(p["x"])) < 1e-2

    def test_inputs_untouched(self):
        p = {"x": np.array([1.0])}
        adam_step(p, {"x": np.array([1.0])}, AdamState(), 0.1)
        assert p["x"][0] == 1.0


class TestMetrics:
    def pred(self, samples, s2=1.0):
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        return M.Prediction(samples.mean(0), samples.var(0) + s2, samples, s2)

    def test_exact(self):
        rmse, _ = metrics(self.pred([[1.0, 2.0]]), [1.0, 2.0])
        assert rmse == 0.0

    def test_standard_normal(self):
        _, ll = metrics(self.pred([[0.0]]), [0.0])
        assert ll == pytest.approx(-0.9189385, abs=1e-7)

    def test_two_sample_mixture(self):
        _, ll = metrics(self.pred([[0.0], [2.0]]), [1.0])
        phi = math.exp(-0.5) / math.sqrt(2 * math.pi)
        assert ll == pytest.approx(math.log(phi), abs=1e-12)
        assert ll == pytest.approx(-1.4189385, abs=1e-7)

    def test_rmse(self):
        rmse, _ = metrics(self.pred([[0.0, 0.0]]), [3.0, 4.0])
        assert rmse == pytest.approx(math.sqrt(12.5))

    def test_errors(self):
        with pytest.raises(ValueError):
            metrics(self.pred(np.zeros((1, 0))), [])
        with pytest.raises(ValueError):
            metrics(self.pred([[0.0]]), [1.0, 2.0])


class TestGradCheck:
    def test_tiny_model_passes(self):
        p, batch = tiny_model()
        res = grad_check(p, batch, eps=1e-4, seed=0)
        assert res.num_checked == p.num_learnable()
        assert res.max_rel_error <= 1e-4

    def test_large_eps_is_worse(self):
        p, batch = tiny_model()
        fine = grad_check(p, batch, eps=1e-4, seed=0)
        coarse = grad_check(p, batch, eps=1e-2, seed=0)
        assert coarse.max_rel_error > 10 * fine.max_rel_error

    def test_deterministic(self):
        p, batch = tiny_model()
        assert grad_check(p, batch, seed=4) == grad_check(p, batch, seed=4)

    def test_subsample(self):
        p, batch = tiny_model()
        res = grad_check(p, batch, max_scalars=20, seed=1)
        assert res.num_checked == 20

    def test_per_r_kernels(self):
        p, batch = tiny_model()
        v = p.values
        for k in range(2):
            for kind in ("embed", "freq"):
                base = v.pop(f"log_ls_{kind}/{k}")
                for r in range(2):
                    v[f"log_ls_{kind}/{k}/{r}"] = base + 0.1 * (r + 1)
        p.per_r_kernels = True
        assert grad_check(p, batch, seed=2).max_rel_error <= 1e-4

    def test_requires_double(self):
        p, batch = tiny_model()
        p.values = {k: v.astype(np.float32) for k, v in p.values.items()}
        with pytest.raises(ValueError):
            grad_check(p, batch)


def small_problem(epochs, **cfg):
    d, _ = synth_dataset([3, 3], 60, 0.1, seed=0)
    tr, te = split(d, 0.8, seed=0)
    tr, te, _ = normalize(tr, te)
    opts = dict(R=2, C=4, s=2, a_k=3, a_g=5, batch_size=16, learning_rate=1e-2,
                epochs=epochs, num_pred_samples=4)
    opts.update(cfg)
    return tr, te, TrainConfig(**opts)


class TestTrain:
    def test_zero_epochs(self):
        tr, te, cfg = small_problem(0)
        params, hist = train(tr, te, cfg)
        init = M.init(tr.meta, cfg, cfg.seed)
        assert len(hist) == 0
        for k in init.values:
            assert np.array_equal(params.values[k], init.values[k])

    def test_deterministic_and_best_snapshot(self, tmp_path):
        tr, te, cfg = small_problem(6)
        p1, h1 = train(tr, te, cfg)
        p2, h2 = train(tr, te, cfg)
        for col in ("elbo", "train_rmse", "test_rmse", "test_ll"):
            assert np.array_equal(h1.column(col), h2.column(col))
        assert len(h1) == 6
        best = int(np.argmin(h1.column("test_rmse")))
        assert h1.best_epoch == best
        rmse = metrics(M.predict(p1, te.indices, te.times, cfg.num_pred_samples, cfg.seed),
                       te.values)[0]
        assert rmse == h1.records[best]["test_rmse"]
        h1.write_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,elbo,train_rmse,test_rmse,test_ll,seconds"
        assert len(lines) == 7

    def test_elbo_improves(self):
        tr, te, cfg = small_problem(30)
        _, hist = train(tr, te, cfg)
        e = hist.column("elbo")
        assert e[-5:].mean() > e[:5].mean()

    def test_validation_mode(self):
        tr, te, cfg = small_problem(3, selection="val", val_frac=0.25)
        _, hist = train(tr, te, cfg)
        assert len(hist) == 3 and 0 <= hist.best_epoch < 3

    def test_log_callback(self):
        tr, te, cfg = small_problem(2)
        seen = []
        train(tr, te, cfg, log=seen.append)
        assert [r["epoch"] for r in seen] == [0, 1]

    def test_divergence_reports_position(self):
        tr, te, cfg = small_problem(1)
        params = M.init(tr.meta, cfg, cfg.seed)
        params.values["log_noise_var"] = np.array(-1e6)
        with pytest.raises(DivergenceError, match="epoch 0, batch 0"):
            train(tr, te, cfg, params=params)


def test_smoothed():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    assert len(smoothed([1.0], 3)) == 0


def test_history_empty():
    assert len(TrainHistory()) == 0
