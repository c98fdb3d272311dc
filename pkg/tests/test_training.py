import json
import math

import numpy as np
import pytest

from varlenrec import geometry as geo
from varlenrec import training as T
from varlenrec.harq import HARQModel, forward
from varlenrec.testing import inplace_difference, relative_error


def toy(pinned=False, seed=3):
    # 4 items, K=2, M=3, d=4
    model = HARQModel.init(5, 4, 2, 3, seed=seed, enc_hidden=6, gate_hidden=5, dec_hidden=6,
                           gate_bias=0.3, pinned_gates=pinned)
    x = np.random.default_rng(0).normal(size=(4, 5))
    targets = np.array([[1, 0], [1, 1], [1, 0], [1, 1]])
    return model, x, targets


def frozen_loss(model, x, targets, weights, base):
    anchors = T.Anchors.from_trace(base)

    def f():
        tr = forward(model, x, codes=base.codes, tangent_anchor=base.tangent_anchor,
                     straight_through=base.straight_through)
        return T.total_loss(tr, targets, weights, model.c, anchors).total
    return f


class TestLosses:
    def test_recon(self):
        assert T.loss_recon([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert T.loss_recon([1.0, 0.0], [0.0, 0.0]) == 1.0
        assert T.loss_recon([3.0, 4.0], [0.0, 0.0]) == 25.0

    def test_recon_shape(self):
        with pytest.raises(ValueError):
            T.loss_recon([1.0], [1.0, 2.0])

    def _one_layer(self, radius_distance):
        # zero encoder puts z0 at the origin; one code at the requested distance from it
        model = HARQModel.init(3, 2, 1, 1, seed=0)
        for w in model.enc.weights + model.enc.biases:
            w[...] = 0.0
        model.codebook.vectors[0, 0] = [math.tanh(radius_distance / 2), 0.0]
        return forward(model, np.ones((1, 3)))

    def test_quant_zero_when_codes_match(self):
        tr = self._one_layer(0.0)
        assert T.loss_quant(tr, 0.25)[0] == 0.0

    def test_quant_unit_distance(self):
        tr = self._one_layer(1.0)
        assert T.loss_quant(tr, 0.25)[0] == pytest.approx(1.25, abs=1e-12)

    def test_quant_beta_domain(self):
        with pytest.raises(ValueError):
            T.loss_quant(self._one_layer(1.0), 0.0)

    def test_cost(self):
        assert T.loss_cost(np.ones(6)) == 6
        assert T.loss_cost(np.zeros(6)) == 0
        assert T.loss_cost([0.9, 0.45, 0.09]) == pytest.approx(1.44, abs=1e-15)

    def test_len_examples(self):
        assert T.loss_len([0.5], [1]) == pytest.approx(math.log(2), abs=1e-15)
        assert T.loss_len([1.0, 1.0, 0.0], [1, 1, 0]) == pytest.approx(-3 * math.log1p(-1e-7))
        assert T.loss_len([1.0, 1.0, 0.0], [1, 1, 0]) < 1e-6

    def test_len_decreases_toward_target(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            m = rng.uniform(0.01, 0.99, size=5)
            t = (np.arange(5) < rng.integers(1, 6)).astype(float)
            j = rng.integers(5)
            moved = m.copy()
            moved[j] += 0.5 * (t[j] - m[j])
            assert T.loss_len(moved, t) < T.loss_len(m, t)

    def test_additivity(self):
        model, x, targets = toy()
        w = T.LossWeights(0.3, 0.7, 0.4)
        lb = T.total_loss(forward(model, x), targets, w)
        assert abs(lb.total - (lb.recon + lb.quant + 0.3 * lb.cost + 0.7 * lb.len)) <= 1e-9
        assert min(lb.recon, lb.quant, lb.cost, lb.len) >= 0

    def test_weights_domain(self):
        with pytest.raises(ValueError):
            T.LossWeights(beta_commit=0.0)
        with pytest.raises(ValueError):
            T.LossWeights(lam_cost=-1.0)


class TestBackward:
    @pytest.mark.parametrize("pinned", [False, True])
    @pytest.mark.parametrize("mode", ["encoder", "residual", "off"])
    def test_finite_differences(self, pinned, mode):
        model, x, targets = toy(pinned)
        w = T.LossWeights(0.3, 0.7, 0.25)
        base = forward(model, x, straight_through=mode)
        grads = T.backward(model, base, targets, w)
        f = frozen_loss(model, x, targets, w, base)
        for name, p in model.parameters().items():
            if pinned and name.startswith("gate"):
                continue
            assert relative_error(grads[name], inplace_difference(f, p)) <= 1e-3, name

    def test_stop_gradient_semantics(self):
        # the encoder sees only beta * commitment from L_quant: freezing the sg operands
        # matches backward, while differentiating through them does not
        model, x, targets = toy(pinned=True)
        w = T.LossWeights(0.0, 0.0, 0.25)
        for p in model.dec.weights:
            p[...] = 0.0
        base = forward(model, x)
        grads = T.backward(model, base, targets, w)

        def quant(frozen):
            tr = forward(model, x, codes=base.codes)
            anchors = T.Anchors.from_trace(base if frozen else tr)
            return T.loss_quant(tr, 0.25, anchors=anchors).mean()

        W = model.enc.weights[0]
        frozen = inplace_difference(lambda: quant(True), W)
        live = inplace_difference(lambda: quant(False), W)
        assert relative_error(grads["enc.W0"], frozen) <= 1e-4
        assert relative_error(grads["enc.W0"], live) > 0.5

        # directional check: the sg[residual] term changes value along a direction
        # in encoder-weight space but contributes no gradient along it
        direction = np.random.default_rng(0).normal(size=W.shape)
        codebook_term = lambda a: geo.hyp_distance(a.residuals, base.code_vectors).__pow__(2).sum()
        W += 1e-3 * direction
        moved = T.Anchors.from_trace(forward(model, x, codes=base.codes))
        W -= 1e-3 * direction
        assert abs(codebook_term(moved) - codebook_term(T.Anchors.from_trace(base))) > 1e-8
        assert np.allclose(inplace_difference(lambda: codebook_term(T.Anchors.from_trace(base)), W), 0)

    def test_dead_codes_zero_gradient(self):
        model = HARQModel.init(5, 4, 3, 20, seed=1, enc_hidden=6, gate_hidden=5, dec_hidden=6)
        x = np.random.default_rng(0).normal(size=(4, 5))
        tr = forward(model, x)
        g = T.backward(model, tr, np.ones((4, 3)), T.LossWeights())["codebook"]
        for l in range(3):
            unused = np.setdiff1d(np.arange(20), tr.codes[:, l])
            assert unused.size > 0
            np.testing.assert_array_equal(g[l, unused], 0.0)

    def test_gate_gradient_ignores_targets_without_mask_losses(self):
        model, x, _ = toy()
        w = T.LossWeights(0.0, 0.0, 0.25)
        tr = forward(model, x)
        a = T.backward(model, tr, np.ones((4, 2)), w)
        b = T.backward(model, tr, np.zeros((4, 2)), w)
        assert np.abs(a["gate.W0"]).max() > 0
        np.testing.assert_array_equal(a["gate.W0"], b["gate.W0"])
        for p in model.dec.weights:
            p[...] = 0.0
        c = T.backward(model, forward(model, x), np.ones((4, 2)), w)
        np.testing.assert_array_equal(c["gate.W0"], 0.0)

    def test_nonfinite_gradient_raises(self):
        model, x, targets = toy()
        x[0, 0] = np.nan
        with pytest.raises(T.TrainingError):
            T.backward(model, forward(model, x), targets, T.LossWeights())


class TestRiemannianAdam:
    def test_zero_gradient_unchanged(self):
        rng = np.random.default_rng(0)
        params = {"codebook": geo.exp_map_origin(rng.normal(size=(2, 3, 4))), "W": rng.normal(size=(3,))}
        before = {k: v.copy() for k, v in params.items()}
        state = T.make_optimizer(0.1)
        T.riemannian_adam_step(state, params, {k: np.zeros_like(v) for k, v in params.items()})
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])
            np.testing.assert_array_equal(state.m1[k], 0.0)

    def test_origin_step(self):
        g = np.array([[[0.3, -2.0, 0.0]]])
        params = {"codebook": np.zeros((1, 1, 3))}
        state = T.make_optimizer(0.05)
        T.riemannian_adam_step(state, params, {"codebook": g})
        adam_dir = g / (np.abs(g) + state.eps)  # first bias-corrected step
        expect = geo.exp_map_origin(-0.05 * adam_dir / 4)
        np.testing.assert_allclose(params["codebook"], expect, atol=1e-15)

    def test_euclidean_first_step(self):
        params = {"W": np.array([1.0, 2.0])}
        state = T.make_optimizer(0.1)
        T.riemannian_adam_step(state, params, {"W": np.array([3.0, -0.5])})
        np.testing.assert_allclose(params["W"], [0.9, 2.1], atol=1e-8)

    @pytest.mark.parametrize("c", [1.0, 2.5])
    def test_adversarial_stress_stays_safe(self, c):
        rng = np.random.default_rng(0)
        params = {"codebook": np.zeros((2, 8, 3))}
        state = T.make_optimizer(lr=50.0)
        radius = geo.ball_radius(c) - geo.SAFE_EPS
        for _ in range(2000):
            p = params["codebook"]
            outward = -(p + 1e-3 * rng.normal(size=p.shape))  # push toward the boundary
            T.riemannian_adam_step(state, params, {"codebook": outward * 1e6}, c)
            assert np.linalg.norm(params["codebook"], axis=-1).max() <= radius + 1e-15


class TestTrainLoop:
    def small(self, **kw):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 8))
        targets = (np.arange(3)[None, :] < rng.integers(1, 4, size=(40, 1))).astype(float)
        cfg = T.TrainConfig(dim=4, K=3, M=6, epochs=6, batch_size=8, **kw)
        return x, targets, cfg

    def test_seed_determinism(self):
        x, t, cfg = self.small()
        a = T.train(x, t, cfg).history_csv()
        b = T.train(x, t, cfg).history_csv()
        assert a == b
        assert a.splitlines()[0] == "epoch,recon,quant,cost,len,total"

    def test_loss_decreases_and_codebook_safe(self):
        x, t, cfg = self.small(check_safety=True)
        res = T.train(x, t, cfg)
        assert res.history[-1].total < res.history[0].total
        assert res.model.codebook.is_safe()

    def test_target_shape_checked(self):
        x, t, cfg = self.small()
        with pytest.raises(ValueError):
            T.train(x, t[:, :2], cfg)

    def test_gate_free_ablation_matches_saturated_gates(self):
        x, t, cfg = self.small(lam_cost=0.0, lam_len=0.0, pinned_gates=True)
        pinned = T.train(x, t, cfg)
        cfg.pinned_gates, cfg.gate_bias = False, 40.0
        saturated = T.train(x, t, cfg)
        a = np.array([h.total for h in pinned.history])
        b = np.array([h.total for h in saturated.history])
        np.testing.assert_allclose(a, b, rtol=1e-6)

    def test_divergence_reports_batch(self):
        x, t, cfg = self.small()
        model = HARQModel.init(8, 4, 3, 6, seed=0)
        model.dec.biases[-1][0] = np.inf
        with pytest.raises(T.TrainingError, match="batch 0"):
            T.train(x, t, cfg, model=model)

    def test_nonfinite_features_rejected(self):
        x, t, cfg = self.small()
        x[3, 0] = np.inf
        with pytest.raises(ValueError):
            T.train(x, t, cfg)


class TestInitAndReset:
    def test_init_codebook_safe_and_kmeans_layer(self):
        rng = np.random.default_rng(0)
        model = HARQModel.init(8, 4, 3, 5, seed=0)
        x = rng.normal(size=(3, 8))  # fewer points than codes
        T.init_codebook(model, x, rng)
        assert model.codebook.is_safe()
        assert np.all(np.isfinite(model.codebook.vectors))

    def test_reset_dead_codes(self):
        model = HARQModel.init(8, 4, 2, 4, seed=0)
        state = T.make_optimizer(0.1)
        state.m1["codebook"] = np.ones_like(model.codebook.vectors)
        state.m2["codebook"] = np.ones_like(model.codebook.vectors)
        usage = np.array([[3, 0, 1, 0], [4, 4, 0, 0]])
        residuals = geo.exp_map_origin(np.random.default_rng(1).normal(size=(5, 2, 4)))
        before = model.codebook.vectors.copy()
        n = T.reset_dead_codes(model, usage, residuals, state, np.random.default_rng(2))
        assert n == 4
        for l, j in np.argwhere(usage == 0):
            assert any(np.array_equal(model.codebook.vectors[l, j], r) for r in residuals[:, l])
            assert state.m1["codebook"][l, j].sum() == 0
        np.testing.assert_array_equal(model.codebook.vectors[0, 0], before[0, 0])


class TestPersistence:
    def test_config_round_trip(self):
        cfg = T.TrainConfig(K=4, lam_len=3.0, straight_through="residual")
        assert T.TrainConfig.from_json(cfg.to_json()) == cfg

    def test_config_rejects_unknown_and_bad(self):
        with pytest.raises(ValueError):
            T.TrainConfig.from_dict({"nope": 1})
        with pytest.raises(ValueError):
            T.TrainConfig.from_dict({"tau": 1.5})

    def test_checkpoint_round_trip(self, tmp_path):
        model, x, _ = toy()
        cfg = T.TrainConfig()
        T.save_checkpoint(tmp_path / "m.npz", model, cfg)
        loaded, cfg2 = T.load_checkpoint(tmp_path / "m.npz")
        assert cfg2 == cfg
        for k, v in model.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[k], v)
        np.testing.assert_array_equal(forward(loaded, x).x_hat, forward(model, x).x_hat)

    def test_checkpoint_format_tag(self, tmp_path):
        np.savez(tmp_path / "bad.npz", meta=np.array(json.dumps({"format": "other"})))
        with pytest.raises(ValueError):
            T.load_checkpoint(tmp_path / "bad.npz")
