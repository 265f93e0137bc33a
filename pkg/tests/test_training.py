"""Optimizer behaviour and the end-to-end minibatch loop."""

import math
import os

import numpy as np
import pytest

import zslvit.autodiff as ad
from zslvit.data import SynthSpec, generate
from zslvit.errors import ConfigError, NumericalError
from zslvit.training import (
    AdamState,
    TrainConfig,
    adam_step,
    clip_gradients,
    load_train_state,
    save_train_state,
    train,
    write_train_log,
)
from zslvit.model import ZslVit


def toy_dataset(seed=3):
    return generate(
        SynthSpec(
            num_seen=2,
            num_unseen=1,
            attr_dim=8,
            train_per_seen=4,
            test_per_seen=2,
            test_per_unseen=2,
            image_size=16,
            channels=1,
            grid=4,
            background_noise_std=0.1,
            attr_patch_fraction=0.5,
            seed=seed,
        )
    )


def toy_config(**overrides):
    base = dict(
        epochs=2,
        batch_size=4,
        learning_rate=3e-3,
        seed=0,
        patch_size=4,
        embed_dim=8,
        num_heads=2,
        mlp_ratio=2.0,
        num_layers=2,
        set_layers=(1,),
        eval_every=10,
        kappa=0.75,
    )
    base.update(overrides)
    return TrainConfig(**base)


def build(ds, cfg):
    return ZslVit(cfg.model_config(ds), seed=cfg.seed)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            toy_config(batch_size=0)
        with pytest.raises(ConfigError):
            toy_config(gamma=0.0)
        with pytest.raises(ConfigError):
            toy_config(kappa=1.5)
        with pytest.raises(ConfigError):
            toy_config(adam_beta1=1.0)
        with pytest.raises(ConfigError):
            toy_config(learning_rate=0.0)
        with pytest.raises(ConfigError):
            toy_config(eval_every=0)
        with pytest.raises(ConfigError):
            toy_config(epochs=-1)

    def test_model_config_follows_dataset(self):
        ds = toy_dataset()
        cfg = toy_config()
        mc = cfg.model_config(ds)
        assert mc.backbone.image_size == ds.image_size
        assert mc.backbone.channels == ds.channels
        assert mc.attr_dim == ds.attr_dim
        assert mc.backbone.set_layers == (1,)


class TestAdam:
    def test_zero_gradient_is_a_no_op(self):
        p = ad.param(np.array([1.0, -2.0]))
        p.grad = np.zeros(2)
        state = adam_step({"p": p}, AdamState(), toy_config())
        np.testing.assert_allclose(p.data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        cfg = toy_config(learning_rate=0.05)
        p = ad.param(np.array([1.0, -1.0, 0.5]))
        p.grad = np.array([0.3, -0.7, 0.001])
        adam_step({"p": p}, AdamState(), cfg)
        # bias-corrected first step is lr * g / (|g| + eps) ~ lr * sign(g)
        np.testing.assert_allclose(
            p.data, [1.0 - 0.05, -1.0 + 0.05, 0.5 - 0.05], rtol=1e-4
        )

    def test_non_finite_gradient_names_parameter(self):
        p = ad.param(np.ones(2))
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(NumericalError, match="offender"):
            adam_step({"offender": p}, AdamState(), toy_config())

    def test_quadratic_convergence(self):
        rng = np.random.default_rng(5)
        target = rng.normal(size=6)
        p = ad.param(np.zeros(6))
        cfg = toy_config(learning_rate=1e-2)
        state = AdamState()
        for _ in range(2000):
            diff = p.data - target
            p.grad = 2.0 * diff
            adam_step({"x": p}, state, cfg)
        loss = float(((p.data - target) ** 2).sum())
        assert loss < 1e-6

    def test_missing_gradient_treated_as_zero(self):
        p = ad.param(np.array([4.0]))
        p.grad = None
        adam_step({"p": p}, AdamState(), toy_config())
        np.testing.assert_allclose(p.data, [4.0])


class TestClipping:
    def test_small_gradients_untouched(self):
        p = ad.param(np.zeros(3))
        p.grad = np.array([0.3, 0.0, -0.4])
        norm = clip_gradients({"p": p}, 5.0)
        np.testing.assert_allclose(norm, 0.5)
        np.testing.assert_allclose(p.grad, [0.3, 0.0, -0.4])

    def test_large_gradients_rescaled_to_threshold(self):
        a = ad.param(np.zeros(2))
        b = ad.param(np.zeros(2))
        a.grad = np.array([30.0, 0.0])
        b.grad = np.array([0.0, 40.0])
        norm = clip_gradients({"a": a, "b": b}, 5.0)
        np.testing.assert_allclose(norm, 50.0)
        np.testing.assert_allclose(a.grad, [3.0, 0.0])
        np.testing.assert_allclose(b.grad, [0.0, 4.0])
        total = math.sqrt(float((a.grad**2).sum() + (b.grad**2).sum()))
        np.testing.assert_allclose(total, 5.0)

    def test_disabled_when_threshold_non_positive(self):
        p = ad.param(np.zeros(2))
        p.grad = np.array([100.0, 0.0])
        clip_gradients({"p": p}, 0.0)
        np.testing.assert_allclose(p.grad, [100.0, 0.0])


class TestTrainLoop:
    @pytest.mark.parametrize("seed", range(5))
    def test_loss_decreases_on_toy_problem(self, seed):
        ds = toy_dataset()
        cfg = toy_config(epochs=10, seed=seed)
        model = build(ds, cfg)
        state = train(model, ds, cfg)
        assert len(state.history) == 10
        assert state.history[-1]["total"] < state.history[0]["total"]

    def test_repeat_runs_are_identical(self, tmp_path):
        ds = toy_dataset()
        logs = []
        for name in ("a", "b"):
            cfg = toy_config(epochs=2, eval_every=1)
            model = build(ds, cfg)
            train(model, ds, cfg, out_dir=str(tmp_path / name))
            logs.append((tmp_path / name / "train_log.tsv").read_bytes())
        assert logs[0] == logs[1]

    def test_eval_rows_and_best_checkpoint(self, tmp_path):
        ds = toy_dataset()
        cfg = toy_config(epochs=2, eval_every=2)
        model = build(ds, cfg)
        state = train(model, ds, cfg, out_dir=str(tmp_path / "run"))
        assert state.history[0]["H"] is None
        assert state.history[1]["H"] is not None
        assert state.best_epoch == 2
        assert os.path.exists(tmp_path / "run" / "best" / "manifest.txt")
        assert os.path.exists(tmp_path / "run" / "final" / "train_state.json")
        text = (tmp_path / "run" / "train_log.tsv").read_text().splitlines()
        assert text[0] == "epoch\tl_set\tl_pre\ttotal\tU\tS\tH"
        assert text[1].split("\t")[4:] == ["", "", ""]
        assert text[2].split("\t")[4] != ""

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        ds = toy_dataset()
        cfg = toy_config(epochs=4, eval_every=1, checkpoint_every=2)

        straight = build(ds, cfg)
        full = train(straight, ds, cfg, out_dir=str(tmp_path / "full"))

        part = build(ds, cfg)
        ckpt = None
        try:
            train(part, ds, toy_config(epochs=2, eval_every=1, checkpoint_every=2),
                  out_dir=str(tmp_path / "part"))
            ckpt = str(tmp_path / "part" / "epoch_0002")
        finally:
            pass
        resumed_model = build(ds, cfg)
        resumed = train(resumed_model, ds, cfg, out_dir=str(tmp_path / "resumed"),
                        resume_from=ckpt)
        tail = resumed.history
        assert [r["epoch"] for r in tail] == [3, 4]
        for mine, ref in zip(tail, full.history[2:]):
            for col in ("l_set", "l_pre", "total", "U", "S", "H"):
                assert mine[col] == ref[col], (col, mine, ref)
        for name, p in resumed_model.parameters().items():
            np.testing.assert_array_equal(p.data, straight.parameters()[name].data)

    def test_divergence_aborts_with_numerical_error(self):
        ds = toy_dataset()
        cfg = toy_config(epochs=3, learning_rate=1e5, grad_clip=0.0)
        model = build(ds, cfg)
        with pytest.raises(NumericalError):
            train(model, ds, cfg)

    def test_zero_epochs_writes_final_state(self, tmp_path):
        ds = toy_dataset()
        cfg = toy_config(epochs=0)
        model = build(ds, cfg)
        state = train(model, ds, cfg, out_dir=str(tmp_path / "r"))
        assert state.history == []
        assert os.path.exists(tmp_path / "r" / "final" / "manifest.txt")
        assert os.path.exists(tmp_path / "r" / "best" / "manifest.txt")
        lines = (tmp_path / "r" / "train_log.tsv").read_text().splitlines()
        assert len(lines) == 1

    def test_cosine_decay_changes_trajectory(self):
        ds = toy_dataset()
        base = train(build(ds, toy_config()), ds, toy_config())
        cosine_cfg = toy_config(cosine_decay=True)
        cosine = train(build(ds, cosine_cfg), ds, cosine_cfg)
        assert base.history[-1]["total"] != cosine.history[-1]["total"]


class TestStateRoundtrip:
    def test_save_load_preserves_counters_and_rng(self, tmp_path):
        ds = toy_dataset()
        cfg = toy_config(epochs=1)
        model = build(ds, cfg)
        state = train(model, ds, cfg)
        rng = np.random.default_rng(99)
        rng.random(7)
        save_train_state(str(tmp_path / "ck"), model, state, rng)
        restored, rng2 = load_train_state(str(tmp_path / "ck"), model)
        assert restored.adam.step == state.adam.step
        assert restored.epoch == state.epoch
        assert restored.best_h == state.best_h
        np.testing.assert_array_equal(rng2.random(5), np.random.default_rng(99).random(12)[7:])
        for name, arr in state.adam.m.items():
            np.testing.assert_array_equal(restored.adam.m[name], arr)
            np.testing.assert_array_equal(restored.adam.v[name], state.adam.v[name])
