import math

import numpy as np
import pytest

from oracles import reverse_chain_distribution
from maskdiff.autograd import Tensor
from maskdiff.diffusion import NoiseSchedule, TokenSequence
from maskdiff.errors import ConfigError, DomainError
from maskdiff.model import DenoiserModel, ModelConfig
from maskdiff.sampler import SamplerConfig, generate, generate_batch, reverse_step


class FrozenLogits:
    """Constant-logit denoiser; records every input it sees."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)
        self.n_classes = len(self.logits)
        self.mask_id = self.n_classes
        self.seen = []

    def forward_logits(self, ids, t):
        self.seen.append(np.array(ids))
        return Tensor(np.broadcast_to(self.logits, np.shape(ids) + (self.n_classes,)).copy())


@pytest.fixture(scope="module")
def small_model():
    return DenoiserModel(ModelConfig(n_layers=2, d_model=32, context_len=64), seed=1)


def test_terminal_step_unmasks_everything():
    x = TokenSequence(np.full(50, 4))
    out = reverse_step(x, 0.3, 0.0, np.zeros((50, 4)), np.random.default_rng(0))
    assert (out.ids != 4).all() and out.ids.max() < 4


def test_unmasked_positions_are_copied():
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 4, 40)
    ids[::3] = 4
    out = reverse_step(TokenSequence(ids), 0.9, 0.5, rng.standard_normal((40, 4)), rng)
    keep = ids != 4
    np.testing.assert_array_equal(out.ids[keep], ids[keep])


def test_unmask_fraction():
    n = 100_000
    out = reverse_step(TokenSequence(np.full(n, 3)), 0.8, 0.4, np.zeros((n, 3)), np.random.default_rng(2))
    assert abs((out.ids != 3).mean() - 0.5) <= 0.005


def test_prompt_positions_never_change():
    pm = np.zeros(10, dtype=bool)
    pm[:4] = True
    ids = np.full(10, 5)
    ids[:4] = [0, 1, 2, 3]
    out = reverse_step(TokenSequence(ids, pm), 1.0, 0.0, np.zeros((10, 5)), np.random.default_rng(3))
    np.testing.assert_array_equal(out.ids[:4], [0, 1, 2, 3])


def test_reverse_step_errors():
    x = TokenSequence(np.full(3, 2))
    with pytest.raises(DomainError):
        reverse_step(x, 0.5, 0.5, np.zeros((3, 2)), np.random.default_rng(0))
    with pytest.raises(DomainError):
        reverse_step(x, 0.0, 0.0, np.zeros((3, 2)), np.random.default_rng(0))


def test_temperature_sharpens():
    n = 20000
    logits = np.tile([1.0, 0.0], (n, 1))
    hot = reverse_step(TokenSequence(np.full(n, 2)), 1.0, 0.0, logits, np.random.default_rng(4), temperature=0.25)
    assert (hot.ids == 0).mean() == pytest.approx(1 / (1 + math.exp(-4)), abs=0.01)


def test_toy_chain_matches_enumeration():
    logits = [0.4, -0.3]
    probs = np.exp(logits) / np.exp(logits).sum()
    exact = reverse_chain_distribution(probs, L=2, S=2, mask_id=2)
    model = FrozenLogits(logits)
    runs = 20000
    counts: dict = {}
    for seed in range(runs):
        out = tuple(generate(model, SamplerConfig(S=2, L=2, seed=seed)).ids.tolist())
        counts[out] = counts.get(out, 0) + 1
    keys = set(exact) | set(counts)
    tv = 0.5 * sum(abs(counts.get(k, 0) / runs - exact.get(k, 0.0)) for k in keys)
    assert tv <= 0.02


def test_generate_output_complete(small_model):
    out = generate(small_model, SamplerConfig(S=8, L=40, seed=3))
    assert len(out) == 40 and (out.ids != small_model.mask_id).all()


def test_prompt_preserved(small_model):
    prompt = TokenSequence(np.arange(65, 73))
    out = generate(small_model, SamplerConfig(S=4, L=20, seed=2, prompt=prompt))
    np.testing.assert_array_equal(out.ids[:8], np.arange(65, 73))


def test_positional_prompt():
    ids = np.zeros(6, dtype=np.int64)
    pm = np.zeros(6, dtype=bool)
    ids[[1, 4]] = [1, 0]
    pm[[1, 4]] = True
    model = FrozenLogits([0.0, 0.0])
    out = generate(model, SamplerConfig(S=3, L=6, seed=0, prompt=TokenSequence(ids, pm)))
    assert out.ids[1] == 1 and out.ids[4] == 0
    for seen in model.seen:
        assert seen[0, 1] == 1 and seen[0, 4] == 0


def test_monotone_unmasking():
    model = FrozenLogits([0.0, 0.0, 0.0])
    generate(model, SamplerConfig(S=16, L=200, seed=5))
    counts = [int((s == 3).sum()) for s in model.seen]
    assert counts[0] == 200 and all(b <= a for a, b in zip(counts, counts[1:]))


def test_expected_remaining_mask_fraction():
    S, L = 8, 10_000
    model = FrozenLogits([0.0, 0.0])
    generate(model, SamplerConfig(S=S, L=L, seed=6))
    # seen[j] is the input at step k = S - j, i.e. after S - k reverse steps
    for j, seen in enumerate(model.seen[1:], start=1):
        expect = (S - j) / S
        frac = (seen == 2).mean()
        assert abs(frac - expect) <= 3 * math.sqrt(expect * (1 - expect) / L) + 1e-12


def test_determinism_and_batch(small_model):
    cfgs = [SamplerConfig(S=4, L=16, seed=s) for s in (1, 2, 3, 4)]
    seq = [generate(small_model, c).ids for c in cfgs]
    again = [generate(small_model, c).ids for c in cfgs]
    batch = generate_batch(small_model, cfgs, workers=4)
    for a, b, c in zip(seq, again, batch):
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c.ids)
    np.testing.assert_array_equal(generate_batch(small_model, cfgs[:1])[0].ids, seq[0])


def test_config_errors(small_model):
    with pytest.raises(ConfigError):
        SamplerConfig(S=0)
    with pytest.raises(ConfigError):
        SamplerConfig(temperature=0.0)
    with pytest.raises(ConfigError):
        generate(small_model, SamplerConfig(S=2, L=100))
    with pytest.raises(ConfigError):
        generate(small_model, SamplerConfig(S=2, L=8), NoiseSchedule(steps=4))
