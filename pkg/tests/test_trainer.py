import numpy as np
import pytest

from dynchan import tensor as T
from dynchan.arch import tiny_descriptor
from dynchan.channels import ChannelMask
from dynchan.data import class_balanced_subset
from dynchan.errors import ConfigError, NumericError
from dynchan.model import build_model
from dynchan.trainer import (SGD, TrainConfig, lr_at, run_pipeline, run_random_baseline, run_single_stage,
                             run_two_stage, train_step)


@pytest.fixture(scope="module")
def small(mnist):
    train, test = mnist
    return class_balanced_subset(train, 8), test.subset(np.arange(100))


def _cfg(**kw):
    base = dict(arch="tiny", p=0.5, batch_size=16, epochs=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _batch(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 1, 28, 28)), rng.integers(0, 10, n)


class TestSchedule:
    def test_drops(self):
        cfg = TrainConfig(epochs=20)
        lrs = [lr_at(e, cfg) for e in range(20)]
        assert lrs[:10] == [0.1] * 10
        assert lrs[10:15] == pytest.approx([0.01] * 5)
        assert lrs[15:] == pytest.approx([0.001] * 5)

    def test_explicit_total(self):
        cfg = TrainConfig(epochs=20)
        assert lr_at(2, cfg, total=4) == pytest.approx(0.01)


class TestSGD:
    def test_nesterov_closed_form(self):
        lr, mu, wd = 0.05, 0.9, 1e-4
        w = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = SGD({"w": w}, lr, mu, wd)
        grads = [np.array([0.3, -0.1]), np.array([-0.2, 0.4]), np.array([0.05, 0.05])]
        ref_w, ref_v = np.array([1.0, -2.0]), np.zeros(2)
        for g in grads:
            w.grad = g.copy()
            opt.step()
            d = g + wd * ref_w
            ref_v = mu * ref_v + d
            ref_w = ref_w - lr * (d + mu * ref_v)
        np.testing.assert_allclose(w.data, ref_w, rtol=0, atol=1e-12)

    def test_first_step_value(self):
        # v1 = d, w1 = w0 - lr (1 + mu) d
        w = T.Tensor(np.array([2.0]), requires_grad=True)
        opt = SGD({"w": w}, 0.1, 0.9, 0.0)
        w.grad = np.array([1.0])
        opt.step()
        assert abs(w.data[0] - (2.0 - 0.1 * 1.9)) < 1e-12

    def test_masked_entries_untouched(self):
        w = T.Tensor(np.array([1.0, 1.0]), requires_grad=True)
        opt = SGD({"w": w}, 0.1, 0.9, 0.1)
        w.grad = np.array([1.0, 1.0])
        opt.step({"w": np.array([True, False])})
        assert w.data[1] == 1.0 and opt.buffers["w"][1] == 0.0 and w.data[0] != 1.0


class TestTrainStep:
    def test_zero_lr(self):
        m = build_model(tiny_descriptor(), seed=0)
        before = {k: v.copy() for k, v in m.state_arrays().items() if not k.endswith(("mean", "var"))}
        opt = SGD(m.params, lr=0.0)
        x, y = _batch()
        l1, _, _ = train_step(m, opt, x, y)
        l2, _, _ = train_step(m, opt, x, y)
        assert l1 == l2
        for k, v in before.items():
            assert np.array_equal(v, m.params[k].data)

    def test_full_mask_equals_plain(self):
        a = build_model(tiny_descriptor(), seed=0)
        b = a.copy()
        oa, ob = SGD(a.params), SGD(b.params)
        for s in range(3):
            x, y = _batch(seed=s)
            train_step(a, oa, x, y, None, want_report=False)
            train_step(b, ob, x, y, ChannelMask.full(b.registry), want_report=True)
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)
        for k in a.buffers:
            assert np.array_equal(a.buffers[k], b.buffers[k])

    def test_masked_kernels_frozen(self):
        m = build_model(tiny_descriptor(), seed=0)
        bits = np.ones(24, dtype=bool)
        bits[[2, 13]] = False
        mask = ChannelMask(m.registry, bits)
        snap = m.copy()
        opt = SGD(m.params)
        for s in range(4):
            train_step(m, opt, *_batch(seed=s), mask)
        p, q = m.params, snap.params
        assert np.array_equal(p["conv0.weight"].data[2], q["conv0.weight"].data[2])
        assert np.array_equal(p["conv1.weight"].data[:, 2], q["conv1.weight"].data[:, 2])
        assert np.array_equal(p["conv1.weight"].data[5], q["conv1.weight"].data[5])
        assert np.array_equal(p["fc.weight"].data[:, 5], q["fc.weight"].data[:, 5])
        assert p["bn1.weight"].data[5] == q["bn1.weight"].data[5]
        assert m.buffers["bn0.running_var"][2] == snap.buffers["bn0.running_var"][2]
        assert not np.array_equal(p["conv0.weight"].data[3], q["conv0.weight"].data[3])

    def test_report_covers_active_channels(self):
        m = build_model(tiny_descriptor(), seed=0)
        bits = np.zeros(24, dtype=bool)
        bits[[0, 3, 8, 20]] = True
        mask = ChannelMask(m.registry, bits)
        _, report, _ = train_step(m, SGD(m.params), *_batch(), mask, t=5)
        assert set(report.values) == set(mask.active_ids()) and report.t == 5

    def test_non_finite_loss(self):
        m = build_model(tiny_descriptor(), seed=0)
        x, y = _batch()
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            train_step(m, SGD(m.params), x, y)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(p=0.0), dict(p=1.5), dict(selection="greedy"),
                                    dict(pipeline="single-stage", freeze_epoch=5, epochs=5),
                                    dict(init_strategy="x"), dict(precision="float16")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            _cfg(**kw).validate()

    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.lr0, c.momentum, c.weight_decay, c.freeze_epoch) == (64, 0.1, 0.9, 1e-4, 40)
        assert c.lr_drop_at == (0.5, 0.75) and c.lr_drop_factor == 10


class TestPipelines:
    def test_two_stage_accounting(self, small):
        rec = run_two_stage(_cfg(), *small)
        rows = rec.step_rows
        init = [r for r in rows if r[0] == "init"]
        dyn = [r for r in rows if r[0] == "dynamic"]
        fine = [r for r in rows if r[0] == "finetune"]
        assert len(init) == 24 and [r[2] for r in init] == list(range(1, 25))
        assert dyn[0][2] == 25 and len(dyn) == 2 * 5
        assert len(fine) == 2 * 5
        ts = [r[2] for r in rows]
        assert all(b > a for a, b in zip(ts, ts[1:]))
        assert all(r[5] == 12 / 24 for r in init + dyn)
        assert rec.state.t == 24 + len(dyn)
        assert rec.final_mask.popcount == 12
        assert rec.final_model.desc.conv_widths == rec.final_mask.layer_counts()
        assert rec.final_cost.params < rec.baseline_cost.params
        assert np.isfinite(rec.final_accuracy)
        assert rec.epoch_rows[-1][0] == "finetune"

    def test_p_one_is_plain_training(self, small):
        rec = run_two_stage(_cfg(p=1.0, finetune_epochs=0), *small)
        assert not [r for r in rec.step_rows if r[0] == "init"]
        assert rec.final_mask.all_active
        assert rec.final_cost.params == rec.baseline_cost.params
        for k in rec.phase_a_model.params:
            assert np.array_equal(rec.phase_a_model.params[k].data, rec.final_model.params[k].data)

    def test_p_one_phase_a_matches_plain_sgd(self, small):
        train, test = small
        cfg = _cfg(p=1.0, epochs=1, finetune_epochs=0)
        rec = run_two_stage(cfg, train, test)
        from dynchan.data import BatchIterator
        m = build_model(tiny_descriptor(), seed=0, dtype=np.float32)
        opt = SGD(m.params, 0.1, 0.9, 1e-4)
        for x, y, _ in BatchIterator(train, 16, seed=1).epoch():
            train_step(m, opt, x, y, None, want_report=False)
        for k in m.params:
            assert np.array_equal(m.params[k].data, rec.phase_a_model.params[k].data)

    def test_deterministic(self, small):
        a = run_two_stage(_cfg(epochs=1), *small)
        b = run_two_stage(_cfg(epochs=1), *small)
        assert a.step_rows == b.step_rows and a.epoch_rows == b.epoch_rows
        assert a.final_mask == b.final_mask

    def test_random_baseline_same_budget(self, small):
        a = run_two_stage(_cfg(epochs=1), *small)
        b = run_random_baseline(_cfg(epochs=1), *small)
        assert len(a.step_rows) == len(b.step_rows)
        assert b.config["selection"] == "random"
        assert b.final_mask.popcount == a.final_mask.popcount

    def test_cover_init(self, small):
        rec = run_two_stage(_cfg(epochs=1, init_strategy="cover"), *small)
        init = [r for r in rec.step_rows if r[0] == "init"]
        assert 2 <= len(init) < 24
        dyn = [r for r in rec.step_rows if r[0] == "dynamic"]
        assert dyn[0][2] == 25

    def test_single_stage(self, small):
        cfg = _cfg(pipeline="single-stage", epochs=3, freeze_epoch=1)
        rec = run_pipeline(cfg, *small)
        stages = [r[0] for r in rec.step_rows]
        assert stages.count("dynamic") == 5 and stages.count("frozen") == 10
        assert "finetune" not in stages
        # one schedule over all epochs: epoch 2 of 3 is past the 50% drop
        frozen_lrs = {r[1]: r[4] for r in rec.step_rows if r[0] == "frozen"}
        assert frozen_lrs[1] == pytest.approx(0.1) and frozen_lrs[2] == pytest.approx(0.01)
        assert rec.final_model.desc.conv_widths == rec.final_mask.layer_counts()

    def test_single_stage_freeze_zero(self, small):
        cfg = _cfg(pipeline="single-stage", epochs=1, freeze_epoch=0)
        rec = run_single_stage(cfg, *small)
        stages = {r[0] for r in rec.step_rows}
        assert stages == {"init", "frozen"}
        frozen = [r for r in rec.step_rows if r[0] == "frozen"]
        assert all(r[5] == 0.5 for r in frozen)

    def test_saliency_dump_rows(self, small):
        rec = run_two_stage(_cfg(epochs=1, saliency_dump=True, finetune_epochs=0), *small)
        ts = {r[0] for r in rec.saliency_rows}
        assert min(ts) == 1 and all(0 <= r[4] <= 1 + 1e-12 for r in rec.saliency_rows)

    def test_summary(self, small):
        s = run_two_stage(_cfg(epochs=1, finetune_epochs=1), *small).summary()
        assert s["active_channels"] == 12 and s["total_channels"] == 24
        assert 0 < s["params_pct_baseline"] < 100
