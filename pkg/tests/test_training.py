import numpy as np
import pytest

from advprop_lab.attacks import AttackSpec, IFGSM, attack, default_spec
from advprop_lab.data import synth_blobs
from advprop_lab.layers import TRAIN, build_desknet, model_forward
from advprop_lab.metrics import evaluate
from advprop_lab.optim import OptimizerConfig
from advprop_lab.training import (ADVPROP, FINEGRAINED, MADRY, MIXED, PRETRAIN_FINETUNE, VANILLA,
                                  RegimeError, TrainConfig, advprop_step, finegrained_step, loss_gradients,
                                  madry_step, make_optimizer, mixed_shared_bn_step, train, vanilla_step)

from conftest import assert_state_equal, random_batch, snapshot


class Recorder:
    """Optimizer stand-in that keeps the gradients it is handed."""

    def __init__(self):
        self.grads = None

    def step(self, grads):
        self.grads = {k: v.copy() for k, v in grads.items()}


def net(K=2, seed=7):
    return build_desknet(1, 3, K, image_size=8, seed=seed)


def opt_for(model, lr=1e-3):
    return make_optimizer(model, TrainConfig(optimizer=OptimizerConfig(learning_rate=lr)))


class TestSteps:
    def test_vanilla_zero_lr(self, rng):
        m = net()
        before = snapshot(m)
        rep = vanilla_step(m, random_batch(rng), opt_for(m, 0.0))
        after = m.state()
        for k in before:
            if "running" not in k:
                assert np.array_equal(before[k], after[k]), k
        assert rep.clean_loss > 0 and rep.adv_loss == 0

    def test_vanilla_step_decreases_loss(self):
        m = build_desknet(1, 2, 1, image_size=8, seed=0)
        x = np.stack([np.zeros((1, 8, 8)), np.ones((1, 8, 8))])
        y = np.array([0, 1])
        opt = make_optimizer(m, TrainConfig(optimizer=OptimizerConfig(kind="sgd_momentum", learning_rate=0.05)))
        first = vanilla_step(m, (x, y), opt).clean_loss
        (after,), _, _ = loss_gradients(m, [(x, y, 0, 1.0)])
        assert after < first

    def test_empty_batch(self):
        m = net()
        with pytest.raises(ValueError):
            vanilla_step(m, (np.zeros((0, 1, 8, 8)), np.zeros(0, int)), opt_for(m))

    def test_madry_eps0_equals_vanilla(self, rng):
        batch = random_batch(rng)
        a, b = net(), net()
        ra = vanilla_step(a, batch, opt_for(a))
        rb = madry_step(b, batch, default_spec(0), opt_for(b), np.random.default_rng(0))
        assert_state_equal(a.state(), b.state())
        assert rb.clean_loss == 0 and rb.adv_loss == ra.clean_loss

    def test_mixed_eps0_doubles_vanilla(self, rng):
        batch = random_batch(rng)
        a, b = net(), net()
        ra, rec = Recorder(), Recorder()
        rv = vanilla_step(a, batch, ra)
        rm = mixed_shared_bn_step(b, batch, default_spec(0), rec, np.random.default_rng(0))
        assert rm.clean_loss == rm.adv_loss == rv.clean_loss
        assert rm.total_loss == 2 * rv.clean_loss
        for k, g in ra.grads.items():
            np.testing.assert_allclose(rec.grads[k], 2 * g, rtol=1e-12, atol=1e-15)

    def test_mixed_uses_route0_only(self, rng):
        m = net()
        before = snapshot(m)
        rep = mixed_shared_bn_step(m, random_batch(rng), default_spec(2), opt_for(m), rng)
        after = m.state()
        for k in before:
            if "route1" in k:
                assert np.array_equal(before[k], after[k]), k
        assert rep.clean_loss > 0 and rep.adv_loss > 0

    def test_advprop_requires_two_routes(self, rng):
        m = net(K=1)
        with pytest.raises(RegimeError):
            advprop_step(m, random_batch(rng), default_spec(2), opt_for(m), rng)

    def test_advprop_eps0_equal_losses(self, rng):
        m = net()
        rep = advprop_step(m, random_batch(rng), default_spec(0), opt_for(m), rng)
        assert rep.clean_loss == rep.adv_loss
        assert rep.total_loss == rep.clean_loss + rep.adv_loss

    def test_advprop_gradient_decomposition(self, rng):
        x, y = random_batch(rng)
        spec = default_spec(4)
        m = net()
        start = snapshot(m)
        rec = Recorder()
        rep = advprop_step(m, (x, y), spec, rec, np.random.default_rng(3))
        assert abs(rep.total_loss - (rep.clean_loss + rep.adv_loss)) <= 1e-12

        ref = net()
        ref.load_state(start)
        xa = attack(ref, x, y, spec, 1, np.random.default_rng(3))
        _, _, gc = loss_gradients(ref, [(x, y, 0, 1.0)])
        _, _, ga = loss_gradients(ref, [(xa, y, 1, 1.0)])
        for name, g in rec.grads.items():
            if "route0" in name:
                assert name not in ga or not np.any(ga[name])
                np.testing.assert_allclose(g, gc[name], rtol=0, atol=1e-10)
            elif "route1" in name:
                assert name not in gc or not np.any(gc[name])
                np.testing.assert_allclose(g, ga[name], rtol=0, atol=1e-10)
            else:
                np.testing.assert_allclose(g, gc[name] + ga[name], rtol=0, atol=1e-10)

    def test_advprop_stat_writes(self, rng):
        x, y = random_batch(rng)
        spec = default_spec(4)
        m = net()
        start = snapshot(m)
        advprop_step(m, (x, y), spec, Recorder(), np.random.default_rng(3))

        ref = net()
        ref.load_state(start)
        xa = attack(ref, x, y, spec, 1, np.random.default_rng(3))
        assert_state_equal(start, ref.state())
        model_forward(ref, x, 0, TRAIN)
        model_forward(ref, xa, 1, TRAIN)
        assert_state_equal(ref.state(), m.state())

    def test_finegrained(self, rng):
        m = net(K=3)
        batch = random_batch(rng)
        with pytest.raises(RegimeError):
            finegrained_step(net(K=2), batch, batch, default_spec(2), opt_for(m), rng)
        rec = Recorder()
        rep = finegrained_step(m, batch, batch, default_spec(2), rec, rng)
        assert rep.aug_loss == rep.clean_loss
        assert rep.total_loss == pytest.approx(rep.clean_loss + rep.aug_loss + rep.adv_loss, abs=1e-12)

    def test_finegrained_route_stats_diverge(self):
        gen = np.random.default_rng(0)
        m = net(K=3)
        opt = opt_for(m)
        for _ in range(5):
            batch = random_batch(gen)
            finegrained_step(m, batch, batch, AttackSpec(IFGSM, 16 / 255, 4 / 255, 4, False), opt, gen)
        bn = m.bn_layers()[0]
        assert np.abs(bn.routes[2].running_mean - bn.routes[0].running_mean).max() > 0

    def test_finegrained_affine_isolation(self, rng):
        m = net(K=3)
        batch = random_batch(rng)
        rec = Recorder()
        x, y = batch
        finegrained_step(m, batch, batch, default_spec(2), rec, np.random.default_rng(1))
        ref = net(K=3)
        xa = attack(ref, x, y, default_spec(2), 2, np.random.default_rng(1))
        per_route = [loss_gradients(ref, [(xi, y, r, 1.0)])[2] for xi, r in ((x, 0), (x, 1), (xa, 2))]
        for name, g in rec.grads.items():
            for r in range(3):
                if f"route{r}" in name:
                    np.testing.assert_allclose(g, per_route[r][name], rtol=0, atol=1e-10)
                    for other in set(range(3)) - {r}:
                        assert name not in per_route[other] or not np.any(per_route[other][name])


def blobs():
    return synth_blobs(1000, seed=0, image_size=8)


class TestTrain:
    def test_zero_epochs(self):
        m = build_desknet(1, 2, 1, image_size=8)
        before = snapshot(m)
        _, hist = train(m, blobs(), TrainConfig(epochs=0))
        assert hist == []
        assert_state_equal(before, m.state())

    def test_vanilla_blobs(self):
        data = blobs()
        m = build_desknet(1, 2, 1, image_size=8, seed=0)
        # batch 16 gives 315 steps, enough for momentum-0.99 running stats to settle
        _, hist = train(m, data, TrainConfig(regime=VANILLA, epochs=5, batch_size=16))
        assert evaluate(m, data) > 0.95
        assert len(hist) == 5 and hist[-1]["eval_acc"] > 0.95

    def test_determinism(self):
        data = synth_blobs(200, seed=1, image_size=8)
        cfg = TrainConfig(regime=ADVPROP, epochs=2, batch_size=32, seed=5)
        a = train(build_desknet(1, 2, 2, image_size=8), data, cfg)[0]
        b = train(build_desknet(1, 2, 2, image_size=8), data, cfg)[0]
        assert_state_equal(a.state(), b.state())

    def test_regime_k_check(self):
        with pytest.raises(RegimeError):
            train(build_desknet(1, 2, 1, image_size=8), blobs(), TrainConfig(regime=ADVPROP))
        with pytest.raises(RegimeError):
            train(build_desknet(1, 2, 2, image_size=8), blobs(), TrainConfig(regime=FINEGRAINED))
        with pytest.raises(RegimeError):
            TrainConfig(regime="nope")

    def test_pretrain_finetune_phases(self):
        data = synth_blobs(64, seed=2, image_size=8)
        cfg = TrainConfig(regime=PRETRAIN_FINETUNE, epochs=5, batch_size=32, pretrain_fraction=0.5)
        _, hist = train(build_desknet(1, 2, 1, image_size=8), data, cfg)
        assert [h["phase"] for h in hist] == [MADRY, MADRY, VANILLA, VANILLA, VANILLA]
        assert hist[0]["clean_loss"] == 0 and hist[-1]["adv_loss"] == 0

    @pytest.mark.parametrize("regime,K", [(MIXED, 1), (FINEGRAINED, 3), (MADRY, 1)])
    def test_other_regimes_run(self, regime, K):
        data = synth_blobs(64, seed=3, image_size=8)
        _, hist = train(build_desknet(1, 2, K, image_size=8), data,
                        TrainConfig(regime=regime, epochs=1, batch_size=32, augmentation=True))
        assert np.isfinite(hist[0]["total_loss"])

    def test_lr_schedule_in_history(self):
        data = synth_blobs(64, seed=3, image_size=8)
        _, hist = train(build_desknet(1, 2, 1, image_size=8), data, TrainConfig(epochs=3, batch_size=32))
        assert [h["lr"] for h in hist] == [1e-3, 1e-3 * 0.97, 1e-3 * 0.97 ** 2]

    def test_bn_affine_excluded_from_weight_decay(self):
        m = net()
        opt = make_optimizer(m, TrainConfig())
        assert "bn1.route1.gamma" in opt.no_decay and "conv1.weight" not in opt.no_decay
        assert make_optimizer(m, TrainConfig(decay_bn=True)).no_decay == set()


def test_madry_loss_exceeds_vanilla_on_trained_model():
    from advprop_lab.data import digit_split

    model = build_desknet(1, 10, 1, seed=0)
    train(model, digit_split("train", 1000, 0), TrainConfig(epochs=1, batch_size=32))
    gen = np.random.default_rng(1)
    higher = total = 0
    for x, y in digit_split("test", 400, 0).batches(8):
        start = snapshot(model)
        rv = vanilla_step(model, (x, y), Recorder())
        model.load_state(start)
        rm = madry_step(model, (x, y), default_spec(4), Recorder(), gen)
        model.load_state(start)
        higher += rm.adv_loss >= rv.clean_loss
        total += 1
    assert higher >= 0.9 * total
