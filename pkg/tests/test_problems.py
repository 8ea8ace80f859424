import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aptmtl.errors import InvalidInputError
from aptmtl.problems import (TOY_INITS, QuadraticTask, eval_tasks, make_conflict_ensemble,
                             make_problem, make_toy2d, pareto_stationarity)

seeds = st.integers(0, 2**32 - 1)


def toy_reference(x1, x2):
    """Loss-only transcription of the reference toy, kept in its original sign form."""
    lower = 5e-6
    f1 = math.log(max(abs(0.5 * (-x1 - 7) - math.tanh(-x2)), lower)) + 6
    f2 = math.log(max(abs(0.5 * (-x1 + 3) + math.tanh(-x2) + 2), lower)) + 6
    c1 = max(math.tanh(x2 * 0.5), 0.0)
    f1_sq = ((-x1 + 7) ** 2 + 0.1 * (-x2 - 8) ** 2) / 10 - 20
    f2_sq = ((-x1 - 7) ** 2 + 0.1 * (-x2 - 8) ** 2) / 10 - 20
    c2 = max(math.tanh(-x2 * 0.5), 0.0)
    return np.array([f1 * c1 + f1_sq * c2, f2 * c1 + f2_sq * c2])


def central_difference(spec, theta, h=1e-5):
    jac = np.zeros((spec.num_tasks, spec.dim))
    for j in range(spec.dim):
        e = np.zeros(spec.dim)
        e[j] = h
        jac[:, j] = (eval_tasks(spec, theta + e)[0] - eval_tasks(spec, theta - e)[0]) / (2 * h)
    return jac


def check_fd(spec, theta):
    g = eval_tasks(spec, theta)[1].flat
    fd = central_difference(spec, theta)
    for gi, fi in zip(g, fd):
        assert np.linalg.norm(fi - gi) <= 1e-5 * max(np.linalg.norm(gi), 1.0)


# --- gradients ------------------------------------------------------------

@pytest.mark.parametrize("name,params", [
    ("quad2", {"dim": 3, "condition": 10.0}),
    ("quadK", {"K": 4, "dim": 5, "condition": 100.0}),
    ("quadK", {"K": 3, "dim": 4, "matrix_shape": (2, 2)}),
    ("toy2d", {}),
    ("toy2d", {"scales": (0.1, 1.0)}),
])
def test_finite_differences_20_points(name, params):
    spec = make_problem(name, **params)
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 20:
        theta = rng.uniform(-10, 10, spec.dim)
        if name == "toy2d":
            x1, x2 = theta
            a1 = 0.5 * (-x1 - 7) + math.tanh(x2)
            a2 = 0.5 * (-x1 + 3) - math.tanh(x2) + 2
            if abs(x2) < 1e-3 or min(abs(a1), abs(a2)) < 1e-2:
                continue  # kinks of the clamp / abs
        check_fd(spec, theta)
        checked += 1


def test_toy_matches_reference_losses():
    spec = make_toy2d()
    rng = np.random.default_rng(11)
    for theta in list(rng.uniform(-10, 10, (50, 2))) + [np.array(p) for p in TOY_INITS]:
        np.testing.assert_allclose(eval_tasks(spec, theta)[0], toy_reference(*theta), rtol=1e-13,
                                   atol=1e-13)


def test_toy_scales_multiply_losses_and_grads():
    base, scaled = make_toy2d(), make_toy2d((0.1, 2.0))
    theta = np.array([1.5, -2.0])
    (l0, g0), (l1, g1) = eval_tasks(base, theta), eval_tasks(scaled, theta)
    np.testing.assert_allclose(l1, l0 * [0.1, 2.0], rtol=1e-15)
    np.testing.assert_allclose(g1.flat, g0.flat * [[0.1], [2.0]], rtol=1e-15)


def test_toy_inits_are_five_fixed_points():
    spec = make_toy2d()
    assert len(spec.meta["inits"]) == 5
    assert spec.meta["inits"][0] == [-8.5, 7.5]


# --- quadratics -----------------------------------------------------------

def test_quadratic_task_examples():
    t = QuadraticTask(np.array([1.0, -2.0]), np.eye(2))
    np.testing.assert_array_equal(t.grad(np.array([3.0, 0.0])), [2.0, 2.0])
    assert t.loss(np.array([1.0, -2.0])) == 0.0
    for bad in (np.array([[1.0, 0.5], [0.0, 1.0]]), np.diag([1.0, -1.0]), np.eye(3)):
        with pytest.raises(InvalidInputError):
            QuadraticTask(np.zeros(2), bad)


def test_eval_tasks_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        eval_tasks(make_problem("quad2", dim=3), np.zeros(4))


def test_ensemble_orthogonal_at_origin():
    spec = make_conflict_ensemble(3, 2, 5, conflict_angle=np.pi / 2)
    g = eval_tasks(spec, np.zeros(5))[1].flat
    assert abs(g[0] @ g[1]) <= 1e-8


@pytest.mark.parametrize("K,dim,angle", [(2, 3, 2.5), (3, 4, 2.0), (4, 4, np.pi / 2), (3, 2, 2.0)])
def test_ensemble_pairwise_angle(K, dim, angle):
    g = eval_tasks(make_conflict_ensemble(0, K, dim, conflict_angle=angle), np.zeros(dim))[1].flat
    u = g / np.linalg.norm(g, axis=1, keepdims=True)
    cos = u @ u.T
    off = cos[~np.eye(K, dtype=bool)]
    assert np.all(off <= math.cos(angle) + 1e-10)


def test_ensemble_infeasible_angle():
    with pytest.raises(InvalidInputError):
        make_conflict_ensemble(0, 3, 4, conflict_angle=np.pi)
    with pytest.raises(InvalidInputError):
        make_conflict_ensemble(0, 4, 2, conflict_angle=np.pi / 2)


@given(seeds)
def test_ensemble_condition_number(seed):
    spec = make_conflict_ensemble(seed, 3, 4, condition=100.0)
    for t in spec.tasks:
        ev = np.linalg.eigvalsh(t.curvature)
        assert 50.0 <= ev[-1] / ev[0] <= 200.0


def test_ensemble_deterministic():
    a = make_conflict_ensemble(42, 3, 4, condition=10.0)
    b = make_conflict_ensemble(42, 3, 4, condition=10.0)
    for ta, tb in zip(a.tasks, b.tasks):
        assert ta.center.tobytes() == tb.center.tobytes()
        assert ta.curvature.tobytes() == tb.curvature.tobytes()
    c = make_conflict_ensemble(43, 3, 4, condition=10.0)
    assert a.tasks[0].center.tobytes() != c.tasks[0].center.tobytes()


# --- Pareto stationarity ---------------------------------------------------

def test_pareto_examples():
    spec = make_conflict_ensemble(1, 2, 3, shared_curvature=True)
    c1, c2 = (t.center for t in spec.tasks)
    for s in np.linspace(0, 1, 11):
        assert pareto_stationarity(spec, (1 - s) * c1 + s * c2).min_norm_value <= 1e-8
    rep = pareto_stationarity(spec, c1)
    assert rep.min_norm_value == 0.0
    np.testing.assert_allclose(rep.weights.weights, [1.0, 0.0], atol=1e-12)

    ident = make_conflict_ensemble(1, 2, 3, condition=1.0)
    far = 0.5 * (ident.tasks[0].center + ident.tasks[1].center) + 100.0 * np.ones(3)
    assert pareto_stationarity(ident, far).min_norm_value > 1.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_shared_curvature_pareto_set_is_hull(seed):
    K, dim = 3, 4
    spec = make_conflict_ensemble(seed, K, dim, condition=10.0, shared_curvature=True)
    centers = np.array([t.center for t in spec.tasks])
    # a unit normal to the affine span of the centers
    span = (centers[1:] - centers[0]).T
    q, _ = np.linalg.qr(np.column_stack([span, np.eye(dim)]))
    normal = q[:, K - 1]
    rng = np.random.default_rng(seed)
    for w in rng.dirichlet(np.ones(K), 10):
        p = w @ centers
        assert pareto_stationarity(spec, p).min_norm_value <= 1e-6
        assert pareto_stationarity(spec, p + normal).min_norm_value > 1e-3


def test_make_problem_dispatch():
    assert make_problem("toy2d").kind == "toy2d"
    assert make_problem("quad2").num_tasks == 2
    assert make_problem("quadK").num_tasks == 3
    assert make_problem("quadK", K=3, dim=4, matrix_shape=(2, 2)).layout == (("W", (2, 2)),)
    with pytest.raises(InvalidInputError):
        make_problem("quad2", K=3)
    with pytest.raises(InvalidInputError):
        make_problem("rosenbrock")
    with pytest.raises(InvalidInputError):
        make_problem("quadK", dim=4, matrix_shape=(3, 2))
