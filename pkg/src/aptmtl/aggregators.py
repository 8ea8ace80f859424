"""Multi-task gradient aggregators.

Each aggregator maps a :class:`TaskGradients` (K per-task gradients over the
shared parameters) to one combined direction G_t.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError, UndefinedCosineError
from .linalg import min_norm_simplex, project_simplex


def split_blocks(vec, layout) -> dict[str, np.ndarray]:
    """Reshape a flattened vector into named blocks following ``layout``."""
    out, start = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        out[name] = vec[start:start + n].reshape(shape)
        start += n
    return out


@dataclass(frozen=True)
class TaskGradients:
    """Per-task gradients, stored flattened as a (K, P) array.

    ``layout`` lists the named parameter blocks in order with their shapes; the
    flattened view is their row-major concatenation.
    """

    flat: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        flat = np.atleast_2d(np.asarray(self.flat, dtype=np.float64))
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        size = sum(int(np.prod(s)) for _, s in layout)
        if flat.shape[1] != size:
            raise InvalidInputError(f"flattened length {flat.shape[1]} != layout size {size}")
        if not np.all(np.isfinite(flat)):
            raise InvalidInputError("task gradients contain non-finite values")
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "layout", layout)

    @classmethod
    def from_vectors(cls, vectors, name: str = "theta") -> "TaskGradients":
        flat = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        return cls(flat, ((name, (flat.shape[1],)),))

    @classmethod
    def from_blocks(cls, per_task: list[dict]) -> "TaskGradients":
        if not per_task:
            raise InvalidInputError("need at least one task")
        layout = tuple((n, np.shape(b)) for n, b in per_task[0].items())
        rows = []
        for blocks in per_task:
            if tuple((n, np.shape(b)) for n, b in blocks.items()) != layout:
                raise InvalidInputError("tasks have differing block shapes")
            rows.append(np.concatenate([np.ravel(b) for b in blocks.values()]))
        return cls(np.stack(rows), layout)

    @property
    def num_tasks(self) -> int:
        return self.flat.shape[0]

    def __len__(self):
        return self.num_tasks

    def slices(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        out, start = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    def split(self, vec) -> dict[str, np.ndarray]:
        """Reshape one flattened vector into named blocks."""
        return split_blocks(np.asarray(vec), self.layout)

    def task_blocks(self, i: int) -> dict[str, np.ndarray]:
        return self.split(self.flat[i])

    def block(self, name: str) -> np.ndarray:
        """All tasks' gradients for one block, shape (K, *block_shape)."""
        sl, shape = self.slices()[name]
        return self.flat[:, sl].reshape((self.num_tasks,) + shape)

    def permuted(self, order) -> "TaskGradients":
        return TaskGradients(self.flat[list(order)], self.layout)


@dataclass(frozen=True)
class AggregationResult:
    combined: np.ndarray
    weights: np.ndarray | None
    method: str
    layout: tuple = ()
    flags: tuple[str, ...] = ()

    def blocks(self) -> dict[str, np.ndarray]:
        return split_blocks(self.combined, self.layout)


@dataclass(frozen=True)
class LdpConfig:
    xi: float = 4.0
    per_block: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.xi) and self.xi > 0):
            raise InvalidInputError(f"xi must be finite and > 0, got {self.xi}")


def cosine(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedCosineError("cosine with a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _result(tg: TaskGradients, weights, method, flags=()) -> AggregationResult:
    weights = np.asarray(weights, dtype=np.float64)
    return AggregationResult(weights @ tg.flat, weights, method, tg.layout, tuple(flags))


def ls_aggregate(tg: TaskGradients) -> AggregationResult:
    k = tg.num_tasks
    return AggregationResult(tg.flat.mean(axis=0), np.full(k, 1.0 / k), "ls", tg.layout)


def pcgrad(tg: TaskGradients, seed: int = 0) -> AggregationResult:
    """PCGrad: project each task gradient off every conflicting peer, in random order.

    Projections are taken against the original (unmodified) peer gradients. The
    result is the mean of the modified gradients, so it coincides with the LS
    direction when nothing conflicts.
    """
    k = tg.num_tasks
    if k < 2:
        raise InvalidInputError("pcgrad needs at least two tasks")
    rng = np.random.default_rng(seed)
    g = tg.flat
    sq = np.einsum("ij,ij->i", g, g)
    flags = set()
    projected = g.copy()
    for i in range(k):
        others = [j for j in range(k) if j != i]
        for j in rng.permutation(others):
            if sq[j] == 0.0:
                flags.add("zero-task-gradient-skipped")
                continue
            dot = projected[i] @ g[j]
            if dot < 0.0:
                projected[i] -= dot / sq[j] * g[j]
    return AggregationResult(projected.mean(axis=0), None, "pcgrad", tg.layout, tuple(sorted(flags)))


def mgda(tg: TaskGradients, max_iter: int = 250) -> AggregationResult:
    simplex, _ = min_norm_simplex(list(tg.flat), max_iter=max_iter)
    return _result(tg, simplex.weights, "mgda")


def cagrad_objective(w, gram: np.ndarray, c: float) -> float:
    """g_w . g_0 + c ||g_0|| ||g_w|| evaluated from the Gram matrix."""
    w = np.asarray(w, dtype=np.float64)
    k = gram.shape[0]
    mean_w = np.full(k, 1.0 / k)
    g0_norm = np.sqrt(max(mean_w @ gram @ mean_w, 0.0))
    return float(w @ gram @ mean_w + c * g0_norm * np.sqrt(max(w @ gram @ w, 0.0)))


def _cagrad_weights_pair(gram: np.ndarray, c: float) -> np.ndarray:
    """Exact minimizer for two tasks, w = (gamma, 1 - gamma).

    With e = g1 - g2 the objective is L*gamma + s*sqrt(A gamma^2 + 2B gamma + C)
    plus a constant; it is convex in gamma and its stationary point solves a
    quadratic in y = A gamma + B.
    """
    g11, g12, g22 = gram[0, 0], gram[0, 1], gram[1, 1]
    a = g11 + g22 - 2.0 * g12
    if a <= 0.0:
        return np.array([0.5, 0.5])
    b = g12 - g22
    cc = g22
    lin = 0.5 * (g11 - g22)  # e . g0
    s = c * 0.5 * np.sqrt(max(g11 + g22 + 2.0 * g12, 0.0))
    disc = max(a * cc - b * b, 0.0)
    candidates = [0.0, 1.0]
    if s * s * a > lin * lin:
        y = -np.sign(lin) * abs(lin) * np.sqrt(disc / (s * s * a - lin * lin))
        candidates.append(float(np.clip((y - b) / a, 0.0, 1.0)))

    def f(gamma):
        return lin * gamma + s * np.sqrt(max(a * gamma * gamma + 2.0 * b * gamma + cc, 0.0))

    gamma = min(candidates[::-1], key=f)
    return np.array([gamma, 1.0 - gamma])


def _cagrad_weights(gram: np.ndarray, c: float, steps: int) -> np.ndarray:
    k = gram.shape[0]
    if k == 2:
        return _cagrad_weights_pair(gram, c)
    mean_w = np.full(k, 1.0 / k)
    b = gram @ mean_w
    sqrt_phi = c * np.sqrt(max(mean_w @ b, 0.0))
    lam = max(np.trace(gram), 1e-300)  # upper bound on the top eigenvalue

    def f(w):
        return w @ b + sqrt_phi * np.sqrt(max(w @ gram @ w, 0.0))

    w = mean_w.copy()
    fw = f(w)
    for _ in range(steps):
        gw_norm = np.sqrt(max(w @ gram @ w, 0.0))
        if gw_norm == 0.0:
            break
        grad = b + sqrt_phi * (gram @ w) / gw_norm
        # Lipschitz estimate of the gradient near w; halved on failed descent.
        step = 1.0 / (lam * (1.0 + sqrt_phi / gw_norm))
        while True:
            cand = project_simplex(w - step * grad)
            fc = f(cand)
            if fc <= fw - 1e-4 * (grad @ (w - cand)) or step < 1e-20:
                break
            step *= 0.5
        if fc >= fw:
            break
        w, fw = cand, fc
    return w


def cagrad(tg: TaskGradients, c: float = 0.4, steps: int = 500) -> AggregationResult:
    """Conflict-averse gradient.

    Minimizes g_w . g_0 + sqrt(phi) ||g_w|| over the simplex (phi = c^2 ||g_0||^2)
    and returns d = g_0 + sqrt(phi)/||g_w|| g_w. Two tasks are solved exactly;
    more use projected gradient descent with backtracking.
    """
    k = tg.num_tasks
    if k < 2:
        raise InvalidInputError("cagrad needs at least two tasks")
    if not 0.0 <= c < 1.0:
        raise InvalidInputError(f"cagrad requires 0 <= c < 1, got {c}")
    mean_w = np.full(k, 1.0 / k)
    g0 = tg.flat.mean(axis=0)
    g0_norm = np.linalg.norm(g0)
    if c == 0.0 or g0_norm == 0.0:
        return AggregationResult(g0, mean_w, "cagrad", tg.layout)
    gram = tg.flat @ tg.flat.T
    w = _cagrad_weights(gram, c, steps)
    gw_norm = np.linalg.norm(w @ tg.flat)
    if gw_norm == 0.0:
        return AggregationResult(g0, mean_w, "cagrad", tg.layout, ("degenerate-gw",))
    weights = mean_w + (c * g0_norm / gw_norm) * w
    return _result(tg, weights, "cagrad")


def _ldp_weights(g: np.ndarray, xi: float, layout_name: str | None = None) -> np.ndarray:
    k = g.shape[0]
    anchor = g.mean(axis=0)
    where = f" in block {layout_name!r}" if layout_name else ""
    if np.linalg.norm(anchor) == 0.0:
        raise UndefinedCosineError(f"ldp: mean gradient is zero{where}")
    cos = np.empty(k)
    for i in range(k):
        try:
            cos[i] = cosine(g[i], anchor)
        except UndefinedCosineError:
            raise UndefinedCosineError(f"ldp: task {i} gradient is zero{where}", task=i) from None
    return ldp_weights_from_cosines(cos, xi)


def ldp_weights_from_cosines(cos, xi: float) -> np.ndarray:
    """Sigmoid gates of xi * cos, rescaled to sum to K."""
    cos = np.asarray(cos, dtype=np.float64)
    gates = 1.0 / (1.0 + np.exp(-xi * cos))
    return cos.size * gates / gates.sum()


def ldp(tg: TaskGradients, cfg: LdpConfig | None = None) -> AggregationResult:
    """Light direction preservation: sigmoid-gated weights from cosines to the mean.

    Weights sum to K, so the result has the scale of a gradient sum.
    """
    cfg = cfg or LdpConfig()
    if not cfg.per_block:
        return _result(tg, _ldp_weights(tg.flat, cfg.xi), "ldp")
    combined = np.empty(tg.flat.shape[1])
    weights = []
    for name, (sl, _) in tg.slices().items():
        w = _ldp_weights(tg.flat[:, sl], cfg.xi, name)
        combined[sl] = w @ tg.flat[:, sl]
        weights.append(w)
    return AggregationResult(combined, np.stack(weights), "ldp", tg.layout, ("per-block",))


AGGREGATORS: dict[str, Callable[..., AggregationResult]] = {
    "ls": ls_aggregate,
    "pcgrad": pcgrad,
    "mgda": mgda,
    "cagrad": cagrad,
    "ldp": ldp,
}


def aggregate(method: str, tg: TaskGradients, **params) -> AggregationResult:
    """Dispatch by identifier: ``ls``, ``pcgrad``, ``mgda``, ``cagrad`` or ``ldp``."""
    try:
        fn = AGGREGATORS[method]
    except KeyError:
        raise InvalidInputError(f"unknown aggregator {method!r}") from None
    if method == "ldp":
        return fn(tg, LdpConfig(**params))
    return fn(tg, **params)
