import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aptmtl.aggregators import AggregationResult
from aptmtl.errors import InvalidInputError
from aptmtl.linalg import newton_schulz, polar_factor
from aptmtl.optimizers import (MomentumBounds, Optimizer, OptimizerConfig, TrackingMonitor,
                               adaptive_beta, sgd_step, tracking_bound_constant,
                               tracking_error_recursion_check)

seeds = st.integers(0, 2**32 - 1)


def agg(vec, layout=None):
    vec = np.asarray(vec, dtype=float).ravel()
    return AggregationResult(vec, None, "test", layout or (("theta", (vec.size,)),))


def with_angle(rho):
    """Unit vectors (g_now, g_prev) in R^2 whose cosine is exactly rho for rho in {-1, 0, 1}."""
    return {1.0: ([1.0, 0.0], [2.0, 0.0]), 0.0: ([1.0, 0.0], [0.0, 3.0]),
            -1.0: ([1.0, 0.0], [-1.0, 0.0])}[rho]


# --- adaptive beta --------------------------------------------------------

@pytest.mark.parametrize("rho,beta", [(1.0, 0.9), (0.0, 0.5), (-1.0, 0.1)])
def test_adaptive_beta_endpoints(rho, beta):
    b, r = adaptive_beta(*map(np.array, with_angle(rho)), MomentumBounds(0.1, 0.9))
    assert r == rho
    assert b == pytest.approx(beta, abs=1e-15)


def test_adaptive_beta_undefined_cases():
    bounds = MomentumBounds(0.2, 0.7)
    assert adaptive_beta(np.ones(2), None, bounds) == (0.7, None)
    assert adaptive_beta(np.zeros(2), np.ones(2), bounds) == (0.7, None)
    assert adaptive_beta(np.ones(2), np.zeros(2), bounds) == (0.7, None)


@given(seeds, seeds, st.floats(0.0, 0.5), st.floats(0.5, 0.99))
def test_adaptive_beta_bounded_and_monotone(s1, s2, lo, hi):
    bounds = MomentumBounds(lo, hi)
    a, b = np.random.default_rng(s1).standard_normal((2, 4))
    c, d = np.random.default_rng(s2).standard_normal((2, 4))
    (b1, r1), (b2, r2) = adaptive_beta(a, b, bounds), adaptive_beta(c, d, bounds)
    assert lo <= b1 <= hi and lo <= b2 <= hi
    if r1 <= r2:
        assert b1 <= b2
    else:
        assert b1 >= b2


def test_bounds_validation():
    for lo, hi in [(-0.1, 0.9), (0.5, 0.4), (0.1, 1.0)]:
        with pytest.raises(InvalidInputError):
            MomentumBounds(lo, hi)


def test_tracking_bound_constant():
    assert tracking_bound_constant(0.9) == pytest.approx(324.0)
    assert tracking_bound_constant(0.5) == pytest.approx(4.0)
    assert tracking_bound_constant(0.0) == 0.0


# --- config ---------------------------------------------------------------

def test_config_defaults_and_validation():
    assert OptimizerConfig("adam").lr == 1e-4
    assert OptimizerConfig("muon").lr == 0.02
    with pytest.raises(InvalidInputError):
        OptimizerConfig("adam", weight_decay=1e-4)
    for kwargs in ({"name": "lion"}, {"lr": -1.0}, {"beta1": 1.0}, {"beta2": -0.1},
                   {"ns_iterations": 0}):
        with pytest.raises(InvalidInputError):
            OptimizerConfig(**kwargs)
    cfg = OptimizerConfig("sgd", lr=0.4, halve_lr_at=3)
    assert [cfg.lr_at(t) for t in (1, 3, 4)] == [0.4, 0.4, 0.2]


# --- SGD ------------------------------------------------------------------

def test_sgd_examples():
    out = sgd_step({"theta": np.array([1.0, 1.0])}, agg([1, 0]), 0.5)
    np.testing.assert_allclose(out["theta"], [0.5, 1.0])
    out = sgd_step({"theta": np.array([1.0, 1.0])}, agg([0, 0]), 0.5)
    np.testing.assert_allclose(out["theta"], [1.0, 1.0])


@given(seeds, st.floats(1e-3, 1.0))
def test_sgd_linear(seed, eta):
    p = {"theta": np.zeros(3)}
    g1, g2 = np.random.default_rng(seed).standard_normal((2, 3))
    two = sgd_step(sgd_step(p, agg(g1), eta), agg(g2), eta)
    one = sgd_step(p, agg(g1 + g2), eta)
    np.testing.assert_allclose(two["theta"], one["theta"], atol=1e-14)


def test_sgd_optimizer_zero_tracking_error():
    opt = Optimizer(OptimizerConfig("sgd", lr=0.1))
    p = {"theta": np.ones(2)}
    for g in ([1.0, 2.0], [-3.0, 0.5]):
        p, rep = opt.step(p, agg(g))
        assert rep.beta_used == 0.0 and rep.tracking_error_norm == 0.0


# --- Adam -----------------------------------------------------------------

def adam_oracle(grads, lr, b1, b2, eps, theta0, betas=None, wd=0.0):
    """Textbook loop; ``betas`` overrides beta_1 per step (bias correction uses their product)."""
    theta = np.array(theta0, dtype=float)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    prod = 1.0
    for t, g in enumerate(grads, start=1):
        beta = b1 if betas is None else betas[t - 1]
        theta = theta * (1 - lr * wd)
        m = beta * m + (1 - beta) * g
        v = b2 * v + (1 - b2) * g * g
        prod *= beta
        mhat = m / (1 - prod)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
    return theta


def test_adam_first_step_hand_trace():
    opt = Optimizer(OptimizerConfig("adam", lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8))
    p, _ = opt.step({"theta": np.zeros(1)}, agg([1.0]))
    assert p["theta"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


@given(seeds, st.floats(0.0, 0.99), st.integers(1, 30))
def test_adam_matches_oracle(seed, beta1, steps):
    grads = np.random.default_rng(seed).standard_normal((steps, 3))
    opt = Optimizer(OptimizerConfig("adam", lr=0.01, beta1=beta1))
    p = {"theta": np.array([0.5, -1.0, 2.0])}
    for g in grads:
        p, _ = opt.step(p, agg(g))
    np.testing.assert_allclose(p["theta"], adam_oracle(grads, 0.01, beta1, 0.999, 1e-8,
                                                        [0.5, -1.0, 2.0]), atol=1e-12)


@given(seeds, st.integers(2, 30))
def test_adaptive_adam_matches_oracle(seed, steps):
    grads = np.random.default_rng(seed).standard_normal((steps, 3))
    betas = [0.9]
    for t in range(1, steps):
        rho = grads[t] @ grads[t - 1] / np.linalg.norm(grads[t]) / np.linalg.norm(grads[t - 1])
        betas.append(0.1 + 0.8 * (rho + 1) / 2)
    opt = Optimizer(OptimizerConfig("adam", lr=0.01, adaptive=True))
    p = {"theta": np.zeros(3)}
    used = []
    for g in grads:
        p, rep = opt.step(p, agg(g))
        used.append(rep.beta_used)
    np.testing.assert_allclose(used, betas, atol=1e-12)
    np.testing.assert_allclose(p["theta"], adam_oracle(grads, 0.01, None, 0.999, 1e-8,
                                                        np.zeros(3), betas), atol=1e-12)


def test_adaptive_constant_gradient_settles_at_beta_max():
    opt = Optimizer(OptimizerConfig("adam", adaptive=True))
    p = {"theta": np.zeros(2)}
    for _ in range(4):
        p, rep = opt.step(p, agg([1.0, -2.0]))
        assert rep.beta_used == pytest.approx(0.9, abs=1e-12)


@given(st.floats(0.0, 0.99), st.integers(1, 40))
def test_bias_corrected_momentum_constant_gradient(beta1, steps):
    g = np.array([0.7, -1.3])
    opt = Optimizer(OptimizerConfig("adam", beta1=beta1))
    p = {"theta": np.zeros(2)}
    for _ in range(steps):
        p, _ = opt.step(p, agg(g))
    st_ = opt.state
    np.testing.assert_allclose(st_.m["theta"] / (1 - st_.beta_product), g, atol=1e-12)
    assert 0.0 <= st_.beta_product <= 1.0


def test_beta_zero_momentum_is_gradient():
    opt = Optimizer(OptimizerConfig("adam", beta1=0.0), record_history=True)
    p = {"theta": np.zeros(2)}
    for g in ([1.0, 0.0], [0.0, -3.0], [2.0, 2.0]):
        p, rep = opt.step(p, agg(g))
        np.testing.assert_array_equal(opt.state.m["theta"], g)
        assert rep.tracking_error_norm == 0.0
    assert tracking_error_recursion_check(opt.state.history) == 0.0


def test_adamw_pure_decay():
    opt = Optimizer(OptimizerConfig("adamw", lr=0.1, weight_decay=1e-4))
    p, _ = opt.step({"theta": np.array([2.0, -4.0])}, agg([0.0, 0.0]))
    np.testing.assert_allclose(p["theta"], np.array([2.0, -4.0]) * (1 - 0.1 * 1e-4), atol=1e-15)


@given(seeds)
def test_adamw_matches_oracle(seed):
    grads = np.random.default_rng(seed).standard_normal((10, 2))
    opt = Optimizer(OptimizerConfig("adamw", lr=0.05, weight_decay=0.1))
    p = {"theta": np.ones(2)}
    for g in grads:
        p, _ = opt.step(p, agg(g))
    np.testing.assert_allclose(p["theta"], adam_oracle(grads, 0.05, 0.9, 0.999, 1e-8, np.ones(2),
                                                        wd=0.1), atol=1e-12)


def test_shape_mismatch():
    opt = Optimizer(OptimizerConfig("adam"))
    with pytest.raises(InvalidInputError):
        opt.step({"theta": np.zeros(3)}, agg([1.0, 2.0]))
    with pytest.raises(InvalidInputError):
        opt.step({"w": np.zeros(2)}, agg([1.0, 2.0]))


# --- Muon -----------------------------------------------------------------

def mat_agg(g):
    g = np.asarray(g, dtype=float)
    return AggregationResult(g.ravel(), None, "test", (("W", g.shape),))


def test_muon_equalizes_singular_directions():
    opt = Optimizer(OptimizerConfig("muon", lr=0.02, beta1=0.0, ns_iterations=10))
    p, _ = opt.step({"W": np.zeros((2, 2))}, mat_agg(np.diag([4.0, 0.01])))
    assert np.max(np.abs(p["W"] - (-0.02 * np.eye(2)))) <= 0.05 * 0.02


def test_muon_orthogonal_gradient():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))
    opt = Optimizer(OptimizerConfig("muon", lr=0.1, beta1=0.0, ns_iterations=10))
    p, _ = opt.step({"W": np.zeros((4, 4))}, mat_agg(q))
    np.testing.assert_allclose(-p["W"] / 0.1, q, atol=1e-3)


def test_muon_zero_lr_is_null_step():
    opt = Optimizer(OptimizerConfig("muon", lr=0.0))
    w = np.arange(6.0).reshape(2, 3)
    p, _ = opt.step({"W": w.copy()}, mat_agg(np.ones((2, 3))))
    np.testing.assert_array_equal(p["W"], w)


@given(seeds, st.floats(0.0, 0.95), st.integers(1, 8))
def test_muon_matches_oracle(seed, beta1, steps):
    grads = np.random.default_rng(seed).standard_normal((steps, 3, 2))
    opt = Optimizer(OptimizerConfig("muon", lr=0.02, beta1=beta1))
    p = {"W": np.zeros((3, 2))}
    w, m = np.zeros((3, 2)), np.zeros((3, 2))
    for g in grads:
        p, _ = opt.step(p, mat_agg(g))
        m = beta1 * m + (1 - beta1) * g
        w = w - 0.02 * newton_schulz(m, 5)
    np.testing.assert_allclose(p["W"], w, atol=1e-12)


def test_muon_vector_block_falls_back_to_adam():
    layout = (("W", (2, 2)), ("b", (2,)))
    g = np.array([1.0, 0.0, 0.0, 2.0, 0.5, -0.5])
    opt = Optimizer(OptimizerConfig("muon", lr=0.1, beta1=0.9, ns_iterations=10))
    p, _ = opt.step({"W": np.zeros((2, 2)), "b": np.zeros(2)}, agg(g, layout))
    np.testing.assert_allclose(p["b"], adam_oracle([g[4:]], 0.1, 0.9, 0.999, 1e-8, np.zeros(2)),
                               atol=1e-15)
    np.testing.assert_allclose(p["W"], -0.1 * polar_factor(np.diag([1.0, 2.0])), atol=1e-3)


def test_muon_zero_momentum_flagged():
    opt = Optimizer(OptimizerConfig("muon"))
    p, rep = opt.step({"W": np.ones((2, 2))}, mat_agg(np.zeros((2, 2))))
    assert rep.flags == ("degenerate-update:W",)
    np.testing.assert_array_equal(p["W"], np.ones((2, 2)))


# --- tracking error -------------------------------------------------------

@pytest.mark.parametrize("name", ["adam", "adamw", "muon"])
@pytest.mark.parametrize("adaptive", [False, True])
def test_tracking_identity_on_recorded_runs(name, adaptive):
    rng = np.random.default_rng(5)
    cfg = OptimizerConfig(name, adaptive=adaptive, beta1=0.7,
                          weight_decay=0.01 if name == "adamw" else 0.0)
    opt = Optimizer(cfg, record_history=True)
    p = {"W": np.zeros((3, 2))}
    for _ in range(40):
        p, _ = opt.step(p, mat_agg(rng.standard_normal((3, 2))))
    assert tracking_error_recursion_check(opt.state.history) <= 1e-10
    assert opt.monitor.max_residual <= 1e-10


def test_tracking_check_needs_two_steps():
    with pytest.raises(InvalidInputError):
        tracking_error_recursion_check([(0.9, np.ones(2), np.ones(2))])


def test_tracking_constant_gradient_geometric_decay():
    opt = Optimizer(OptimizerConfig("adam", beta1=0.8))
    p = {"theta": np.zeros(2)}
    norms = []
    for _ in range(6):
        p, rep = opt.step(p, agg([1.0, 1.0]))
        norms.append(rep.tracking_error_norm)
    np.testing.assert_allclose(np.array(norms[1:]) / np.array(norms[:-1]), 0.8, atol=1e-12)


@given(seeds, st.integers(2, 60), st.floats(0.0, 0.99))
def test_tracking_bound_geometric(seed, steps, beta_max):
    # sum |delta_t|^2 <= (1 - b)^-2 sum beta_t^2 |G_t - G_{t-1}|^2 for beta_t <= b.
    rng = np.random.default_rng(seed)
    mon = TrackingMonitor()
    m = np.zeros(3)
    for _ in range(steps):
        g = rng.standard_normal(3) * rng.uniform(0.1, 10)
        beta = rng.uniform(0, beta_max)
        m = beta * m + (1 - beta) * g
        mon.update(beta, g, m)
    assert mon.max_residual <= 1e-10 * max(1.0, np.abs(m).max())
    assert mon.ratio <= 1.0 / (1.0 - beta_max) ** 2 + 1e-9
    if beta_max >= 0.5:
        assert mon.ratio <= tracking_bound_constant(beta_max) + 1e-9


def test_monitor_ratio_degenerate():
    mon = TrackingMonitor()
    assert mon.ratio == 0.0 and mon.mean_delta_sq == 0.0
