"""Update rules driven by an aggregated multi-task gradient.

Parameters are dicts of named numpy blocks, matching the layout of the
:class:`~aptmtl.aggregators.AggregationResult` fed to each step. Adam-family
and Muon steps optionally replace the static first-moment coefficient with the
curvature-adaptive one from :func:`adaptive_beta`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregators import AggregationResult, cosine
from .errors import InvalidInputError, ZeroGradientError
from .linalg import newton_schulz

DEFAULT_LR = {"sgd": 1e-2, "adam": 1e-4, "adamw": 1e-4, "muon": 0.02}
OPTIMIZERS = tuple(DEFAULT_LR)


@dataclass(frozen=True)
class MomentumBounds:
    beta_min: float = 0.1
    beta_max: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.beta_min <= self.beta_max < 1.0:
            raise InvalidInputError(
                f"need 0 <= beta_min <= beta_max < 1, got ({self.beta_min}, {self.beta_max})")


def adaptive_beta(g_now, g_prev, bounds: MomentumBounds) -> tuple[float, float | None]:
    """Momentum coefficient from the cosine of adjacent combined gradients.

    Without a usable previous gradient (first step, or a zero vector on either
    side) the curvature proxy is undefined and ``beta_max`` is returned.
    """
    if g_prev is None:
        return bounds.beta_max, None
    a = np.ravel(g_now)
    b = np.ravel(g_prev)
    if not a.any() or not b.any():
        return bounds.beta_max, None
    rho = cosine(a, b)
    span = bounds.beta_max - bounds.beta_min
    beta = bounds.beta_min + span * float(np.clip((rho + 1.0) / 2.0, 0.0, 1.0))
    return float(np.clip(beta, bounds.beta_min, bounds.beta_max)), rho


def tracking_bound_constant(beta_max: float) -> float:
    """Checked constant C = 4 (beta_max / (1 - beta_max))^2 of the tracking-error monitor."""
    return 4.0 * (beta_max / (1.0 - beta_max)) ** 2


class TrackingMonitor:
    """Online checks on the tracking error delta_t = m_t - G_t.

    Since m_t = beta_t m_{t-1} + (1 - beta_t) G_t with m_0 = 0, the error obeys
    delta_t = beta_t (delta_{t-1} + G_{t-1} - G_t) exactly (G_0 = 0). The monitor
    records the largest violation of that identity and the two averages compared
    by the tracking-error bound.
    """

    def __init__(self):
        self.steps = 0
        self.max_residual = 0.0
        self.sum_delta_sq = 0.0
        self.sum_variation = 0.0
        self._prev_delta = None
        self._prev_g = None

    def update(self, beta: float, combined, momentum) -> float:
        g = np.asarray(combined, dtype=np.float64).ravel()
        delta = np.asarray(momentum, dtype=np.float64).ravel() - g
        prev_delta = self._prev_delta if self._prev_delta is not None else np.zeros_like(g)
        prev_g = self._prev_g if self._prev_g is not None else np.zeros_like(g)
        residual = float(np.linalg.norm(delta - beta * (prev_delta + prev_g - g)))
        self.max_residual = max(self.max_residual, residual)
        self.sum_delta_sq += float(delta @ delta)
        diff = g - prev_g
        self.sum_variation += beta**2 * float(diff @ diff)
        self.steps += 1
        self._prev_delta, self._prev_g = delta, g
        return float(np.linalg.norm(delta))

    @property
    def mean_delta_sq(self) -> float:
        return self.sum_delta_sq / self.steps if self.steps else 0.0

    @property
    def ratio(self) -> float:
        """(1/T) sum ||delta_t||^2 divided by (1/T) sum beta_t^2 ||G_t - G_{t-1}||^2."""
        if self.sum_variation == 0.0:
            return 0.0 if self.sum_delta_sq == 0.0 else float("inf")
        return self.sum_delta_sq / self.sum_variation


def tracking_error_recursion_check(history) -> float:
    """Max over t of ||delta_t - beta_t (delta_{t-1} + G_{t-1} - G_t)||.

    ``history`` is a sequence of ``(beta, combined, momentum)`` triples from
    consecutive steps.
    """
    history = list(history)
    if len(history) < 2:
        raise InvalidInputError("need at least two recorded steps")
    worst = 0.0
    for (_, g_prev, m_prev), (beta, g, m) in zip(history, history[1:]):
        g_prev, g = np.ravel(g_prev), np.ravel(g)
        delta_prev = np.ravel(m_prev) - g_prev
        delta = np.ravel(m) - g
        worst = max(worst, float(np.linalg.norm(delta - beta * (delta_prev + g_prev - g))))
    return worst


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    adaptive: bool = False
    bounds: MomentumBounds = field(default_factory=MomentumBounds)
    ns_iterations: int = 5
    halve_lr_at: int | None = None

    def __post_init__(self):
        if self.name not in OPTIMIZERS:
            raise InvalidInputError(f"unknown optimizer {self.name!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.name]
        if self.lr < 0:
            raise InvalidInputError("learning rate must be >= 0")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise InvalidInputError("beta1 and beta2 must lie in [0, 1)")
        if self.weight_decay and self.name == "adam":
            raise InvalidInputError("weight decay is only decoupled; use 'adamw'")
        if self.ns_iterations < 1:
            raise InvalidInputError("ns_iterations must be >= 1")

    def lr_at(self, step: int) -> float:
        if self.halve_lr_at is not None and step > self.halve_lr_at:
            return self.lr / 2.0
        return self.lr


@dataclass
class StepReport:
    beta_used: float
    rho: float | None
    tracking_error_norm: float
    update_norm: float
    flags: tuple[str, ...] = ()


@dataclass
class OptimizerState:
    config: OptimizerConfig
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    prev_combined: np.ndarray | None = None
    beta_product: float = 1.0
    last_beta: float | None = None
    monitor: TrackingMonitor = field(default_factory=TrackingMonitor)
    history: list | None = None

    def record(self, beta, combined, momentum):
        if self.history is not None:
            self.history.append((beta, combined.copy(), momentum.copy()))


def sgd_step(params: dict, g: AggregationResult, eta: float) -> dict:
    grads = g.blocks()
    return {name: p - eta * grads[name] for name, p in params.items()}


def _check_shapes(params: dict, grads: dict):
    if params.keys() != grads.keys() or any(np.shape(params[k]) != np.shape(grads[k]) for k in params):
        raise InvalidInputError("parameter blocks do not match the gradient layout")


def _select_beta(state: OptimizerState, g: AggregationResult, adaptive: bool):
    if adaptive:
        return adaptive_beta(g.combined, state.prev_combined, state.config.bounds)
    return state.config.beta1, None


def _adam_block(state, name, p, grad, beta, lr, rho1, rho2):
    cfg = state.config
    m = state.m.get(name, np.zeros_like(p))
    v = state.v.get(name, np.zeros_like(p))
    m = beta * m + (1.0 - beta) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    state.m[name], state.v[name] = m, v
    return p - lr * (m / rho1) / (np.sqrt(v / rho2) + cfg.eps)


def _finish(state, params, new_params, g, beta, rho, flags=()):
    momentum = np.concatenate([np.ravel(state.m[name]) for name in params])
    delta_norm = state.monitor.update(beta, g.combined, momentum)
    state.record(beta, g.combined, momentum)
    state.prev_combined = g.combined.copy()
    state.last_beta = beta
    update_norm = float(np.sqrt(sum(np.sum((new_params[k] - params[k]) ** 2) for k in params)))
    return new_params, StepReport(beta, rho, delta_norm, update_norm, tuple(flags))


def adam_step(state: OptimizerState, params: dict, g: AggregationResult,
              adaptive: bool | None = None) -> tuple[dict, StepReport]:
    """One Adam (or AdamW, by config name) step with static or adaptive beta_1.

    Bias correction for the first moment uses 1 - prod_j beta_j so it stays exact
    when beta varies between steps.
    """
    cfg = state.config
    adaptive = cfg.adaptive if adaptive is None else adaptive
    grads = g.blocks()
    _check_shapes(params, grads)
    beta, rho = _select_beta(state, g, adaptive)
    state.step += 1
    state.beta_product *= beta
    lr = cfg.lr_at(state.step)
    rho1 = 1.0 - state.beta_product
    rho2 = 1.0 - cfg.beta2**state.step
    new_params = {}
    for name, p in params.items():
        if cfg.name == "adamw" and cfg.weight_decay:
            p = p * (1.0 - lr * cfg.weight_decay)
        new_params[name] = _adam_block(state, name, p, grads[name], beta, lr, rho1, rho2)
    return _finish(state, params, new_params, g, beta, rho)


def muon_step(state: OptimizerState, params: dict, g: AggregationResult,
              adaptive: bool | None = None, ns_iterations: int | None = None) -> tuple[dict, StepReport]:
    """Muon: momentum, then Newton-Schulz orthogonalization per matrix block.

    Non-matrix blocks take an Adam step with the same learning rate and beta.
    """
    cfg = state.config
    adaptive = cfg.adaptive if adaptive is None else adaptive
    ns_iterations = ns_iterations or cfg.ns_iterations
    grads = g.blocks()
    _check_shapes(params, grads)
    beta, rho = _select_beta(state, g, adaptive)
    state.step += 1
    state.beta_product *= beta
    lr = cfg.lr_at(state.step)
    rho1 = 1.0 - state.beta_product
    rho2 = 1.0 - cfg.beta2**state.step
    flags = []
    new_params = {}
    for name, p in params.items():
        if cfg.weight_decay:
            p = p * (1.0 - lr * cfg.weight_decay)
        if np.ndim(p) != 2:
            new_params[name] = _adam_block(state, name, p, grads[name], beta, lr, rho1, rho2)
            continue
        m = beta * state.m.get(name, np.zeros_like(p)) + (1.0 - beta) * grads[name]
        state.m[name] = m
        try:
            new_params[name] = p - lr * newton_schulz(m, ns_iterations)
        except ZeroGradientError:
            flags.append(f"degenerate-update:{name}")
            new_params[name] = p
    return _finish(state, params, new_params, g, beta, rho, flags)


class Optimizer:
    """Owns an :class:`OptimizerState` and dispatches on the configured rule."""

    def __init__(self, config: OptimizerConfig | None = None, record_history: bool = False, **kwargs):
        self.config = config or OptimizerConfig(**kwargs)
        self.state = OptimizerState(self.config, history=[] if record_history else None)

    def step(self, params: dict, g: AggregationResult) -> tuple[dict, StepReport]:
        name = self.config.name
        if name == "sgd":
            state = self.state
            grads = g.blocks()
            _check_shapes(params, grads)
            state.step += 1
            new_params = sgd_step(params, g, self.config.lr_at(state.step))
            # Momentum-free: m_t = G_t, so the tracking error is identically zero.
            state.m = {k: np.array(v, copy=True) for k, v in grads.items()}
            return _finish(state, params, new_params, g, 0.0, None)
        if name == "muon":
            return muon_step(self.state, params, g)
        return adam_step(self.state, params, g)

    @property
    def monitor(self) -> TrackingMonitor:
        return self.state.monitor
