import numpy as np
import pytest

from momoe.autodiff import ContractError, Tensor
from momoe.dynamics import DynamicsConfig
from momoe.mgda import mgda_step
from momoe.tasks import (
    build_quadratic_task,
    build_tiny_lm_task,
    corrupt_tokens,
    layers_to_converge,
    unigram_entropy,
    unroll,
)


def test_experts_are_negative_gradient_fields():
    task = build_quadratic_task(3, 4, seed=0)
    x = np.random.default_rng(1).normal(size=(1, 4))
    for i, ex in enumerate(task.layer.experts):
        H, c = task.objectives.hessians[i], task.objectives.centers[i]
        assert np.allclose(ex(Tensor(x)).data, -(x - c) @ H, atol=1e-12)


def test_oracle_unroll_matches_mgda():
    task = build_quadratic_task(3, 4, seed=2)
    x0 = np.random.default_rng(3).normal(size=(1, 4)) * 2
    traj = unroll(task.layer_fn(oracle=True), DynamicsConfig(mode="baseline", gamma=0.05), x0, 30)
    x = x0[0]
    for t in range(1, 31):
        x = mgda_step(task.objectives, x, 0.05, normalize=False)
        assert np.max(np.abs(traj[t][0] - x)) < 1e-10


def test_single_expert_converges_to_its_center():
    task = build_quadratic_task(1, 3, seed=4, spectrum=(1.0, 2.0))
    c = task.objectives.centers[0]
    traj = unroll(task.layer_fn(), DynamicsConfig(mode="baseline", gamma=0.3), np.zeros((1, 3)), 200)
    assert np.allclose(traj[-1][0], c, atol=1e-8)


def test_heavy_ball_needs_fewer_layers_on_ill_conditioned_task():
    task = build_quadratic_task(1, 10, seed=5, spectrum=(1.0, 100.0), centers=np.zeros((1, 10)))
    x0 = np.ones((1, 10))
    L, m = 100.0, 1.0
    gd = layers_to_converge(task.layer_fn(), DynamicsConfig(mode="baseline", gamma=2 / (L + m)), x0)
    mu = ((np.sqrt(L) - np.sqrt(m)) / (np.sqrt(L) + np.sqrt(m))) ** 2
    hb = layers_to_converge(task.layer_fn(), DynamicsConfig(mode="heavy_ball", mu=mu,
                                                           gamma=4 / (np.sqrt(L) + np.sqrt(m)) ** 2), x0)
    assert hb < gd <= 10_000


def test_tiny_corpus_contracts():
    rng = np.random.default_rng(6)
    c = build_tiny_lm_task(20, 10, rng, train_sequences=30, valid_sequences=5)
    assert c.train.shape == (30, 10) and c.valid.shape == (5, 10)
    assert c.train.max() < 19 and c.valid.max() < 19  # sentinel id unused
    assert np.allclose(c.transition.sum(1), 1.0)
    with pytest.raises(ContractError):
        build_tiny_lm_task(300, 10, rng)
    with pytest.raises(ContractError):
        build_tiny_lm_task(20, 65, rng)


def test_tiny_corpus_is_seeded():
    a = build_tiny_lm_task(16, 8, np.random.default_rng(7))
    b = build_tiny_lm_task(16, 8, np.random.default_rng(7))
    assert np.array_equal(a.train, b.train) and np.array_equal(a.valid, b.valid)


def test_corruption_rates():
    tokens = np.random.default_rng(8).integers(0, 50, size=(100, 100))
    assert np.array_equal(corrupt_tokens(tokens, 0.0, 99, 0), tokens)
    assert np.all(corrupt_tokens(tokens, 1.0, 99, 0) == 99)
    hits = int((corrupt_tokens(tokens, 0.1, 99, 1) == 99).sum())
    assert 900 <= hits <= 1100
    with pytest.raises(ContractError):
        corrupt_tokens(tokens, 1.5, 99, 0)


def test_unigram_entropy():
    assert unigram_entropy(np.array([1, 1, 1])) == 0.0
    assert unigram_entropy(np.array([0, 1, 2, 3])) == pytest.approx(np.log(4))
