"""Synthetic multi-task objectives with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregators import TaskGradients
from .errors import InvalidInputError
from .linalg import Simplex, min_norm_simplex


@dataclass(frozen=True)
class QuadraticTask:
    """L(theta) = 1/2 (theta - center)^T curvature (theta - center)."""

    center: np.ndarray
    curvature: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).ravel()
        a = np.asarray(self.curvature, dtype=np.float64)
        if a.shape != (c.size, c.size):
            raise InvalidInputError("curvature must be square and match the center")
        if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max())):
            raise InvalidInputError("curvature must be symmetric")
        if np.linalg.eigvalsh(a)[0] <= 0.0:
            raise InvalidInputError("curvature must be positive definite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "curvature", a)

    def loss(self, theta) -> float:
        d = theta - self.center
        return 0.5 * float(d @ self.curvature @ d)

    def grad(self, theta) -> np.ndarray:
        return self.curvature @ (theta - self.center)


def _layout(dim: int, matrix_shape) -> tuple:
    if matrix_shape is None:
        return (("theta", (dim,)),)
    rows, cols = (int(s) for s in matrix_shape)
    if rows * cols != dim:
        raise InvalidInputError(f"matrix_shape {matrix_shape} does not hold {dim} parameters")
    return (("W", (rows, cols)),)


@dataclass(frozen=True)
class ProblemSpec:
    """A K-task problem over a flat parameter vector of length ``dim``.

    ``layout`` tells optimizers how the flat vector splits into named blocks.
    """

    kind: str
    dim: int
    tasks: tuple
    layout: tuple
    scales: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks) if self.kind != "toy2d" else 2

    def task_optimum_losses(self) -> np.ndarray | None:
        """Per-task single-task optimal losses, when known in closed form."""
        if self.kind == "quadratic-ensemble":
            return np.zeros(len(self.tasks))
        return None


# Two-task toy: log-valley objectives for x2 > 0 blended with shifted quadratics
# for x2 < 0, as in the CAGrad / FAMO reference toy.
TOY_LOWER = 5e-6
TOY_INITS = (
    (-8.5, 7.5),
    (-8.5, -5.0),
    (9.0, 9.0),
    (-7.5, -0.5),
    (9.0, -1.0),
)


def _toy2d(theta, scales) -> tuple[np.ndarray, np.ndarray]:
    x1, x2 = theta
    t2 = np.tanh(x2)
    sech2 = 1.0 - t2 * t2
    th = np.tanh(0.5 * x2)
    sech2_half = 1.0 - th * th

    a1 = 0.5 * (-x1 - 7.0) + t2
    a2 = 0.5 * (-x1 + 3.0) - t2 + 2.0
    da1 = np.array([-0.5, sech2])
    da2 = np.array([-0.5, -sech2])
    f1 = np.log(max(abs(a1), TOY_LOWER)) + 6.0
    f2 = np.log(max(abs(a2), TOY_LOWER)) + 6.0
    df1 = da1 / a1 if abs(a1) > TOY_LOWER else np.zeros(2)
    df2 = da2 / a2 if abs(a2) > TOY_LOWER else np.zeros(2)

    c1 = max(th, 0.0)
    dc1 = np.array([0.0, 0.5 * sech2_half if th > 0.0 else 0.0])
    c2 = max(-th, 0.0)
    dc2 = np.array([0.0, -0.5 * sech2_half if th < 0.0 else 0.0])

    q1 = ((7.0 - x1) ** 2 + 0.1 * (x2 + 8.0) ** 2) / 10.0 - 20.0
    q2 = ((x1 + 7.0) ** 2 + 0.1 * (x2 + 8.0) ** 2) / 10.0 - 20.0
    dq1 = np.array([(x1 - 7.0) / 5.0, 0.02 * (x2 + 8.0)])
    dq2 = np.array([(x1 + 7.0) / 5.0, 0.02 * (x2 + 8.0)])

    losses = np.array([f1 * c1 + q1 * c2, f2 * c1 + q2 * c2])
    grads = np.stack([
        c1 * df1 + f1 * dc1 + c2 * dq1 + q1 * dc2,
        c1 * df2 + f2 * dc1 + c2 * dq2 + q2 * dc2,
    ])
    s = np.asarray(scales, dtype=np.float64)
    return losses * s, grads * s[:, None]


def make_toy2d(scales=(1.0, 1.0)) -> ProblemSpec:
    return ProblemSpec("toy2d", 2, (), (("theta", (2,)),), tuple(float(s) for s in scales),
                       {"inits": [list(p) for p in TOY_INITS]})


def eval_tasks(spec: ProblemSpec, theta) -> tuple[np.ndarray, TaskGradients]:
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if theta.size != spec.dim:
        raise InvalidInputError(f"theta has length {theta.size}, problem expects {spec.dim}")
    if spec.kind == "toy2d":
        losses, grads = _toy2d(theta, spec.scales or (1.0, 1.0))
    else:
        losses = np.array([t.loss(theta) for t in spec.tasks])
        grads = np.stack([t.grad(theta) for t in spec.tasks])
    return losses, TaskGradients(grads, spec.layout)


@dataclass(frozen=True)
class StationarityReport:
    min_norm_value: float
    weights: Simplex


def pareto_stationarity(spec: ProblemSpec, theta) -> StationarityReport:
    """Norm of the min-norm convex combination of task gradients at ``theta``."""
    _, tg = eval_tasks(spec, theta)
    simplex, point = min_norm_simplex(list(tg.flat))
    return StationarityReport(float(np.linalg.norm(point)), simplex)


def _random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _conflicting_directions(k: int, dim: int, angle: float) -> np.ndarray:
    """K unit vectors with pairwise angle ``angle`` (before rotation).

    When ``dim`` leaves no room for the shared component, the regular simplex is
    returned instead; its pairwise angle is the largest possible, so still >= ``angle``.
    """
    cos_a = np.cos(angle)
    floor = -1.0 / (k - 1)
    if cos_a < floor - 1e-12:
        raise InvalidInputError(
            f"{k} directions cannot be pairwise separated by {angle:.4f} rad (max {np.arccos(floor):.4f})")
    # Regular simplex vertices: centred basis vectors in R^k, spanning k-1 dims.
    simplex = np.eye(k) - 1.0 / k
    simplex /= np.linalg.norm(simplex, axis=1, keepdims=True)
    share = float(np.clip((cos_a - floor) / (1.0 - floor), 0.0, 1.0))
    if dim == k - 1:
        share = 0.0
    if dim < k - 1:
        raise InvalidInputError(f"dim={dim} too small for {k} directions at angle {angle:.4f}")
    basis = np.linalg.svd(simplex)[2][: k - 1]  # orthonormal basis of the simplex span
    coords = simplex @ basis.T
    out = np.zeros((k, dim))
    out[:, : k - 1] = np.sqrt(1.0 - share) * coords
    if share > 0.0:
        out[:, k - 1] = np.sqrt(share)
    return out


def make_conflict_ensemble(seed: int, K: int, dim: int, condition: float = 10.0,
                           conflict_angle: float = np.pi / 2, *, shared_curvature: bool = False,
                           matrix_shape=None, radius: float = 1.0) -> ProblemSpec:
    """Quadratic tasks whose gradients at the origin are pairwise ``conflict_angle`` apart.

    Each curvature has log-spaced eigenvalues from 1 to ``condition`` in a random
    seeded eigenbasis; centers are placed so that g_i(0) = -radius * d_i for the
    constructed unit directions d_i.
    """
    if K < 2 or dim < 2:
        raise InvalidInputError("need K >= 2 and dim >= 2")
    if condition < 1.0:
        raise InvalidInputError("condition number must be >= 1")
    layout = _layout(dim, matrix_shape)
    rng = np.random.default_rng(seed)
    directions = _conflicting_directions(K, dim, conflict_angle) @ _random_rotation(rng, dim).T
    eig = np.geomspace(1.0, condition, dim)
    shared = None
    tasks = []
    for i in range(K):
        if shared is None or not shared_curvature:
            q = _random_rotation(rng, dim)
            a = (q * eig) @ q.T
            a = 0.5 * (a + a.T)
            shared = a
        a = shared
        center = np.linalg.solve(a, radius * directions[i])
        tasks.append(QuadraticTask(center, a))
    return ProblemSpec("quadratic-ensemble", dim, tuple(tasks), layout,
                       meta={"seed": seed, "condition": condition, "conflict_angle": conflict_angle})


def make_problem(name: str, **params) -> ProblemSpec:
    """Build a registered problem: ``quad2``, ``quadK`` or ``toy2d``."""
    if name == "toy2d":
        return make_toy2d(**params)
    if name == "quad2":
        params.setdefault("K", 2)
        if params["K"] != 2:
            raise InvalidInputError("quad2 is the two-task ensemble; use quadK")
    elif name != "quadK":
        raise InvalidInputError(f"unknown problem {name!r}")
    params.setdefault("K", 3)
    params.setdefault("dim", 4)
    params.setdefault("seed", 0)
    return make_conflict_ensemble(**params)


PROBLEMS = ("quad2", "quadK", "toy2d")
