import math

import numpy as np
import pytest

from maskdiff.autograd import Tensor
from maskdiff.checkpoint import load_checkpoint, save_checkpoint
from maskdiff.data import PAD_ID
from maskdiff.errors import TrainingDivergedError
from maskdiff.model import DenoiserModel, ModelConfig
from maskdiff.trainer import (OptimState, TrainConfig, Trainer, adamw_update, clip_gradients, fit, lr_at)


def tiny(kind="ssm_only", seed=0):
    return DenoiserModel(ModelConfig.for_backbone(kind, n_layers=2, d_model=32, context_len=32), seed=seed)


def corpus(n=12, L=32, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, L))


# ---------------------------------------------------------------- optimizer


def test_decay_only_step():
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
    old = p["w"].data.copy()
    adamw_update(p, {"w": np.zeros(3)}, OptimState(lr=0.01, weight_decay=0.1))
    np.testing.assert_array_equal(p["w"].data, old * (1 - 0.001))


def test_first_step_is_signed_lr():
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
    adamw_update(p, {"w": np.array([0.3, -5.0, 1e-3])}, OptimState(lr=0.01, weight_decay=0.0))
    np.testing.assert_allclose(p["w"].data - [1.0, -2.0, 0.5], -0.01 * np.sign([0.3, -5.0, 1e-3]), atol=1e-3 * 0.01)


def test_quadratic_trajectory_matches_reference():
    lr, b1, b2, eps, wd = 0.05, 0.9, 0.95, 1e-8, 0.1
    x = Tensor(np.array([1.5]))
    state = OptimState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
    ref, m, v = 1.5, 0.0, 0.0
    for t in range(1, 11):
        adamw_update({"x": x}, {"x": 2 * x.data.copy()}, state)
        g = 2 * ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref * (1 - lr * wd)
        ref = ref - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(x.data[0] - ref) <= 1e-10
    assert state.step == 10


def test_non_finite_gradient_names_parameter():
    p = {"blocks.0.w": Tensor(np.ones(2))}
    with pytest.raises(TrainingDivergedError, match="blocks.0.w"):
        adamw_update(p, {"blocks.0.w": np.array([1.0, np.nan])}, OptimState(lr=0.1))


def test_clipping():
    g = {"a": np.full(4, 3.0), "b": np.full(2, 4.0)}
    norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(math.sqrt(36 + 32))
    assert math.sqrt(sum((x ** 2).sum() for x in g.values())) <= 1.0 + 1e-6
    small = {"a": np.array([0.1, 0.2])}
    clip_gradients(small, 1.0)
    np.testing.assert_array_equal(small["a"], [0.1, 0.2])


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, steps=1000, warmup_steps=100)
    assert lr_at(0, cfg) == pytest.approx(1e-5)
    assert lr_at(99, cfg) == pytest.approx(1e-3)
    assert lr_at(1000, cfg) == pytest.approx(1e-4)
    lrs = [lr_at(s, cfg) for s in range(100, 1001)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------------- train loop


def test_zero_lr_leaves_parameters_identical():
    m = tiny()
    before = {k: v.data.copy() for k, v in m.params.items()}
    tr = Trainer(m, TrainConfig(lr=0.0, batch=4))
    tr.train_step(corpus()[:4])
    for k, v in m.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_two_runs_identical():
    data = corpus()
    runs = []
    for _ in range(2):
        tr = Trainer(tiny(), TrainConfig(steps=15, batch=4, log_interval=1, seed=3))
        runs.append([r.loss for r in fit(tr, data)])
    assert runs[0] == runs[1] and len(runs[0]) == 15


def test_resume_matches_uninterrupted(tmp_path):
    data = corpus()
    cfg = TrainConfig(steps=20, batch=4, log_interval=1, seed=5, warmup_steps=5)
    full = [r.loss for r in fit(Trainer(tiny(), cfg), data)]
    first = Trainer(tiny(), cfg)
    for _ in range(10):
        first.train_step(first.select_batch(data, first.step))
    save_checkpoint(first.model, first.optim, tmp_path / "c.ckpt", seed=cfg.seed)
    ck = load_checkpoint(tmp_path / "c.ckpt")
    resumed = Trainer(ck.model, cfg, ck.optim)
    rest = [r.loss for r in fit(resumed, data)]
    assert rest == full[10:]


def test_zero_steps_is_noop():
    m = tiny()
    before = {k: v.data.copy() for k, v in m.params.items()}
    assert fit(Trainer(m, TrainConfig(steps=0)), corpus()) == []
    for k, v in m.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_report_file_and_checkpoints(tmp_path):
    calls = []
    tr = Trainer(tiny(), TrainConfig(steps=6, batch=4, log_interval=2, eval_interval=3, eval_mc=1, ckpt_interval=4))
    reps = fit(tr, corpus(), corpus(4, seed=1), pad_id=PAD_ID, report_path=tmp_path / "r.tsv",
               checkpoint_fn=lambda t: calls.append(t.step))
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert lines[0].startswith("# step")
    assert [int(line.split("\t")[0]) for line in lines[1:]] == [2, 3, 4, 6]
    assert reps[1].ppl_bound is not None and reps[0].ppl_bound is None
    assert calls == [4, 6]
    for r in reps:
        assert math.isfinite(r.loss) and math.isfinite(r.grad_norm)


def test_untrained_bound_near_uniform():
    m = DenoiserModel(ModelConfig(), seed=0)
    tr = Trainer(m, TrainConfig(batch=8))
    ppl = tr.evaluate(np.random.default_rng(0).integers(0, 256, (8, 256)), n_mc=2)
    assert 200 <= ppl <= 320


def test_repeated_batch_overfits():
    m = DenoiserModel(ModelConfig(n_layers=6, d_model=64, context_len=64), seed=0)
    batch = corpus(4, 64, seed=9)
    tr = Trainer(m, TrainConfig(lr=3e-3, steps=500, batch=4, warmup_steps=20))
    losses = []
    for _ in range(500):
        losses.append(tr.train_step(batch).loss)
        if len(losses) >= 20 and np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10]):
            break
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])
