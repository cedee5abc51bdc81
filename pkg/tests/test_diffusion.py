import math

import numpy as np
import pytest

from maskdiff.autograd import Tensor
from maskdiff.diffusion import NoiseSchedule, forward_mask, mdm_loss, nelbo_ppl_bound, step_time
from maskdiff.errors import DomainError, TokenIndexError


class ConstantModel:
    """Denoiser emitting the same logits everywhere; optionally a margin on the truth."""

    def __init__(self, n_classes, truth=None, margin=50.0):
        self.n_classes = n_classes
        self.mask_id = n_classes
        self.truth = truth
        self.margin = margin

    def forward_logits(self, ids, t):
        ids = np.asarray(ids)
        out = np.zeros(ids.shape + (self.n_classes,))
        if self.truth is not None:
            np.put_along_axis(out, np.broadcast_to(self.truth, ids.shape)[..., None], self.margin, axis=-1)
        return Tensor(out)


def test_schedule_grid():
    s = NoiseSchedule(steps=128)
    assert step_time(s, 128) == 1.0 and step_time(s, 0) == 0.0 and step_time(s, 64) == 0.5
    assert all(step_time(s, k) < step_time(s, k + 1) for k in range(128))
    with pytest.raises(TokenIndexError):
        step_time(s, 129)
    for t in (0.0, 0.25, 0.9):
        assert s.mask_probability(t) == pytest.approx(t, abs=1e-15)


def test_training_times_in_range():
    s = NoiseSchedule(t_min=1e-3)
    t = s.sample_times(np.random.default_rng(0), 10000)
    assert t.min() >= 1e-3 and t.max() <= 1.0


def test_mask_endpoints():
    rng = np.random.default_rng(0)
    x0 = rng.integers(0, 256, (4, 50))
    xt, m = forward_mask(x0, 0.0, rng, 257)
    np.testing.assert_array_equal(xt, x0)
    assert not m.any()
    ex = np.zeros_like(x0, dtype=bool)
    ex[:, :5] = True
    xt, m = forward_mask(x0, 1.0, rng, 257, exempt=ex)
    assert (xt[:, 5:] == 257).all()
    np.testing.assert_array_equal(xt[:, :5], x0[:, :5])


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_mask_fraction(t):
    n = 200_000
    x0 = np.zeros((20, n // 20), dtype=np.int64)
    _, m = forward_mask(x0, t, np.random.default_rng(1), 257)
    assert abs(m.mean() - t) <= 3 * math.sqrt(t * (1 - t) / n)


def test_mask_only_introduces_mask_id():
    rng = np.random.default_rng(2)
    x0 = rng.integers(0, 256, (8, 64))
    xt, m = forward_mask(x0, 0.4, rng, 257)
    np.testing.assert_array_equal(xt[~m], x0[~m])
    assert (xt[m] == 257).all()


def test_mask_pairwise_independence():
    x0 = np.zeros((10_000, 6), dtype=np.int64)
    _, m = forward_mask(x0, 0.5, np.random.default_rng(3), 257)
    c = np.corrcoef(m.T.astype(float))
    assert np.abs(c[np.triu_indices(6, 1)]).max() <= 0.05


def test_mask_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(DomainError):
        forward_mask(np.zeros((1, 3), dtype=np.int64), 1.5, rng, 257)
    with pytest.raises(DomainError):
        forward_mask(np.array([[1, 257]]), 0.5, rng, 257)


@pytest.mark.parametrize("t", [0.3, 0.5, 0.9])
def test_uniform_model_loss_is_log_v_at_fixed_t(t):
    model = ConstantModel(258)
    x0 = np.random.default_rng(0).integers(0, 258, (64, 512))
    vals = [mdm_loss(model, x0, NoiseSchedule(), np.random.default_rng(s), t=t).value.item() for s in range(10)]
    assert np.mean(vals) == pytest.approx(math.log(258), rel=0.01)


def test_perfect_model_has_zero_loss():
    x0 = np.random.default_rng(0).integers(0, 10, (4, 16))
    model = ConstantModel(10, truth=x0)
    assert mdm_loss(model, x0, NoiseSchedule(), np.random.default_rng(0)).value.item() <= 1e-6
    assert nelbo_ppl_bound(model, x0, 4, NoiseSchedule(), np.random.default_rng(1)) <= 1.1


def test_zero_masked_gives_zero():
    model = ConstantModel(10)
    x0 = np.zeros((2, 8), dtype=np.int64)
    est = mdm_loss(model, x0, NoiseSchedule(), np.random.default_rng(0), exempt=np.ones_like(x0, dtype=bool))
    assert est.masked_count == 0 and est.value.item() == 0.0


def test_single_symbol_bound_is_one():
    assert nelbo_ppl_bound(ConstantModel(1), np.zeros((5, 8), dtype=np.int64), 3, NoiseSchedule(),
                           np.random.default_rng(0)) == 1.0


def test_stratified_agrees_with_pooled():
    # a non-uniform fixed model: logits favour token 0
    class Skewed(ConstantModel):
        def forward_logits(self, ids, t):
            out = np.zeros(np.shape(ids) + (self.n_classes,))
            out[..., 0] = 2.0
            return Tensor(out)

    model = Skewed(8)
    x0 = np.random.default_rng(4).integers(0, 8, (256, 64))
    sched = NoiseSchedule()
    strat = [mdm_loss(model, x0, sched, np.random.default_rng(10 + i), t=t).value.item()
             for i, t in enumerate((0.2, 0.5, 0.8))]
    pooled = np.mean([mdm_loss(model, x0, sched, np.random.default_rng(100 + s)).value.item() for s in range(20)])
    assert np.mean(strat) == pytest.approx(pooled, rel=0.03)


def test_nelbo_errors():
    with pytest.raises(DomainError):
        nelbo_ppl_bound(ConstantModel(4), np.zeros((0, 4), dtype=np.int64), 1, NoiseSchedule(), np.random.default_rng(0))
    with pytest.raises(DomainError):
        nelbo_ppl_bound(ConstantModel(4), np.zeros((1, 4), dtype=np.int64), 0, NoiseSchedule(), np.random.default_rng(0))
