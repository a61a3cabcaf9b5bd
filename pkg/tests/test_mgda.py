import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from momoe.autodiff import ContractError, Tensor, backward
from momoe.mgda import (
    ObjectiveSet,
    analogy_probe,
    is_pareto_stationary,
    local_gradients,
    mgda_direction,
    mgda_step,
    min_norm_point,
    router_vs_oracle,
    segment_min_norm,
    simplex_grid_min_norm,
)
from momoe.model import ModelConfig, SMoEStack
from momoe.dynamics import DynamicsConfig


def two_opposed():
    return ObjectiveSet(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.stack([np.eye(2)] * 2))


def test_local_gradient_examples():
    obj = ObjectiveSet(np.zeros((1, 2)), np.eye(2)[None])
    g, u, z = local_gradients(obj, np.array([3.0, 4.0]))
    assert np.allclose(g, [[3, 4]]) and np.allclose(u, [[0.6, 0.8]]) and not z[0]
    g, u, z = local_gradients(obj, np.zeros(2))
    assert z[0] and np.all(u == 0)


def test_local_gradients_match_autodiff():
    rng = np.random.default_rng(0)
    obj = ObjectiveSet.random(3, 4, rng)
    x0 = rng.normal(size=4)
    grads, _, _ = local_gradients(obj, x0)
    for i in range(3):
        x = Tensor(x0.copy(), requires_grad=True)
        d = x - Tensor(obj.centers[i])
        val = (d.reshape(1, 4) @ Tensor(obj.hessians[i]) @ d.reshape(4, 1)).sum() * 0.5
        backward(val)
        assert np.allclose(x.grad, grads[i], atol=1e-10)


def test_objective_set_validation():
    with pytest.raises(ContractError):
        ObjectiveSet(np.zeros((1, 2)), np.array([[[1.0, 2.0], [0.0, 1.0]]]))
    with pytest.raises(ContractError):
        ObjectiveSet(np.zeros((1, 2)), -np.eye(2)[None])


def test_min_norm_examples():
    r = min_norm_point([[2.0, 1.0]])
    assert r.alpha.tolist() == [1.0] and np.allclose(r.point, [2, 1])
    r = min_norm_point([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(r.alpha, 0.5) and np.linalg.norm(r.point) == pytest.approx(1 / np.sqrt(2))
    # brute force over alpha_1 in [0, 1] with step 1e-4
    a = np.linspace(0, 1, 10001)
    assert np.linalg.norm(r.point) <= np.min(np.hypot(a, 1 - a)) + 1e-12
    r = min_norm_point([[1.0, 0.0], [-1.0, 0.0]])
    assert np.linalg.norm(r.point) < 1e-10 and np.allclose(r.alpha, 0.5)


def test_segment_closed_form_agrees():
    rng = np.random.default_rng(1)
    for _ in range(50):
        v1, v2 = rng.normal(size=(2, 3))
        a, p = segment_min_norm(v1, v2)
        r = min_norm_point(np.stack([v1, v2]))
        assert np.linalg.norm(p) == pytest.approx(np.linalg.norm(r.point), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda e: arrays(np.float64, (e, 3), elements=st.floats(-10, 10))))
def test_min_norm_optimality_condition(V):
    r = min_norm_point(V)
    assert r.converged
    assert np.all(r.alpha >= 0) and abs(r.alpha.sum() - 1) < 1e-12
    assert np.min(V @ r.point) >= r.point @ r.point - 1e-9 * max(1.0, np.abs(V).max() ** 2)


@pytest.mark.parametrize("E,N", [(2, 1), (2, 5), (3, 2), (3, 8), (4, 3), (4, 8)])
def test_min_norm_against_grid(E, N):
    rng = np.random.default_rng(E * 10 + N)
    V = rng.normal(size=(E, N))
    r = min_norm_point(V)
    g, alpha = simplex_grid_min_norm(V, 1e-3)
    assert abs(alpha.sum() - 1) < 1e-12 and np.all(alpha >= -1e-15)
    sn = np.linalg.norm(r.point)
    assert -1e-12 <= g * g - sn * sn <= 1e-5


def test_pareto_stationarity():
    single = ObjectiveSet(np.array([[1.0, 2.0]]), np.eye(2)[None])
    assert is_pareto_stationary(single, np.array([1.0, 2.0]))
    obj = two_opposed()
    for s in (-0.9, 0.0, 0.4):
        assert is_pareto_stationary(obj, np.array([s, 0.0]))
    assert not is_pareto_stationary(obj, np.array([0.0, 5.0]))
    with pytest.raises(ContractError):
        is_pareto_stationary(obj, np.zeros(2), tol=0.0)


def test_mgda_descent_and_convergence():
    rng = np.random.default_rng(2)
    obj = ObjectiveSet.random(3, 4, rng)
    x = rng.normal(size=4) * 3
    for _ in range(20):
        d = mgda_direction(obj, x)
        unit = local_gradients(obj, x)[1]
        assert np.min(unit @ d.direction) >= d.direction @ d.direction - 1e-9
        nxt = mgda_step(obj, x, 1e-3)
        assert np.all(obj.values(nxt) <= obj.values(x) + 1e-15)
        x = nxt
    obj = two_opposed()
    x = np.array([0.3, 2.0])
    for _ in range(10_000):
        x = mgda_step(obj, x, 0.05, normalize=False)
        if np.linalg.norm(mgda_direction(obj, x, normalize=False).direction) < 1e-6:
            break
    assert is_pareto_stationary(obj, x, tol=1e-6)


def test_mgda_drops_vanishing_gradients():
    obj = ObjectiveSet(np.array([[0.0, 0.0], [1.0, 1.0]]), np.stack([np.eye(2)] * 2))
    d = mgda_direction(obj, np.zeros(2))
    assert d.dropped.tolist() == [True, False] and d.alpha[0] == 0.0


def test_router_vs_oracle_is_descriptive():
    from momoe.tasks import build_quadratic_task

    task = build_quadratic_task(3, 4, seed=3)
    out = router_vs_oracle(task.layer, task.objectives, np.ones(4))
    assert out["router"].shape == out["oracle"].shape == (3,)
    assert out["router"].sum() == pytest.approx(1.0) and out["oracle"].sum() == pytest.approx(1.0)


def test_analogy_probe_smoke_and_determinism():
    rng = np.random.default_rng(4)
    cfg = ModelConfig(layers=3, dim=8, experts=4, k=2, vocab=16)
    model = SMoEStack(cfg, [DynamicsConfig.for_mode("heavy_ball")] * 3, rng)
    batch = rng.integers(0, 16, size=(4, 6))
    a = analogy_probe(model, {"init": batch})
    b = analogy_probe(model, {"init": batch})
    assert [r[0] for r in a.rows] == [0, 1, 2]
    assert all(np.isfinite(r[2]) for r in a.rows)
    assert a.to_csv("config_hash=x") == b.to_csv("config_hash=x")
    assert a.to_csv().splitlines()[0] == "layer,checkpoint,mean_output_norm"
    assert 0.0 <= a.monotone_fraction <= 1.0
