"""Measurements on aggregated gradients and updates, plus benchmark summary metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .aggregators import TaskGradients, cosine
from .errors import InvalidInputError, UndefinedCosineError, UndefinedRankError
from .linalg import as_matrix, polar_factor, svd


def similarity_profile(combined, tg: TaskGradients) -> np.ndarray:
    """Cosine between the combined direction and each task gradient."""
    return np.array([cosine(combined, g) for g in tg.flat])


@dataclass(frozen=True)
class ProjectionProfile:
    norms: np.ndarray
    ratio: float | None
    sign_mixed: bool


def projection_profile(update, tg: TaskGradients) -> ProjectionProfile:
    """Scalar projections <update, g_i>/||g_i|| and their max/min ratio.

    The ratio is only defined when every projection is strictly positive;
    otherwise ``ratio`` is None and ``sign_mixed`` is set.
    """
    u = np.ravel(np.asarray(update, dtype=np.float64))
    norms = np.linalg.norm(tg.flat, axis=1)
    if np.any(norms == 0.0):
        i = int(np.argmin(norms))
        raise UndefinedCosineError(f"projection onto zero gradient of task {i}", task=i)
    p = tg.flat @ u / norms
    if np.all(p > 0.0):
        return ProjectionProfile(p, float(p.max() / p.min()), False)
    return ProjectionProfile(p, None, True)


def effective_rank(a) -> float:
    """exp of the Shannon entropy of the sigma / sum(sigma) distribution."""
    sigma = svd(as_matrix(a)).sigma
    total = sigma.sum()
    if total == 0.0:
        raise UndefinedRankError("effective rank of a zero matrix")
    p = sigma[sigma > 0.0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


@dataclass(frozen=True)
class MuonProjections:
    """Projections of a gradient matrix G and its polar factor O onto task gradients."""

    proj_g: np.ndarray
    proj_o: np.ndarray
    alpha: np.ndarray  # (K, r): <g_i, u_k v_k^T>_F
    sigma: np.ndarray


def muon_projection_pair(g, task_grads) -> MuonProjections:
    g = as_matrix(g)
    dec = svd(g)
    o = polar_factor(g)
    tasks = [as_matrix(t) for t in task_grads]
    if any(t.shape != g.shape for t in tasks):
        raise InvalidInputError("task gradients must match the shape of G")
    # <g_i, u_k v_k^T>_F = u_k^T g_i v_k
    alpha = np.array([np.einsum("ik,ij,kj->k", dec.u, t, dec.vt) for t in tasks])
    proj_g = np.array([np.sum(g * t) for t in tasks])
    proj_o = np.array([np.sum(o * t) for t in tasks])
    return MuonProjections(proj_g, proj_o, alpha, dec.sigma)


@dataclass(frozen=True)
class BenchmarkScores:
    method: np.ndarray
    baseline: np.ndarray
    higher_better: np.ndarray

    def __post_init__(self):
        arrays = [np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in
                  (self.method, self.baseline)]
        hb = np.atleast_1d(np.asarray(self.higher_better, dtype=bool))
        if not (arrays[0].shape == arrays[1].shape == hb.shape) or arrays[0].ndim != 1:
            raise InvalidInputError("scores, baselines and directions must have equal lengths")
        if np.any(arrays[1] == 0.0):
            raise InvalidInputError("baseline metric values must be nonzero")
        object.__setattr__(self, "method", arrays[0])
        object.__setattr__(self, "baseline", arrays[1])
        object.__setattr__(self, "higher_better", hb)


def delta_m(scores: BenchmarkScores) -> float:
    """Mean signed relative change vs baselines, in percent; negative is better."""
    sign = np.where(scores.higher_better, -1.0, 1.0)
    rel = (scores.method - scores.baseline) / scores.baseline
    return float(np.mean(sign * rel) * 100.0)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n ascending, ties get the mean of the ranks they span."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mean_rank(table: dict, higher_better) -> dict[str, float]:
    """Average per-metric rank of each method (1 = best)."""
    names = list(table)
    if not names:
        raise InvalidInputError("empty score table")
    hb = np.atleast_1d(np.asarray(higher_better, dtype=bool))
    try:
        scores = np.array([np.asarray(table[n], dtype=np.float64) for n in names])
    except ValueError:
        raise InvalidInputError("score table rows have differing lengths") from None
    if scores.ndim != 2 or scores.shape[1] != hb.size:
        raise InvalidInputError("score table does not match the number of metrics")
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("score table has missing entries")
    ranks = np.column_stack([
        _average_ranks(-scores[:, k] if hb[k] else scores[:, k]) for k in range(hb.size)
    ])
    return {n: float(r) for n, r in zip(names, ranks.mean(axis=1))}


@dataclass
class DiagnosticsRecord:
    step: int
    cos_combined_vs_task: list | None
    proj_norms: list | None
    proj_norm_ratio: float | None
    sign_mixed: bool
    effective_rank: dict = field(default_factory=dict)
    beta: float | None = None
    rho: float | None = None
    tracking_error: float | None = None
    update_cos_prev: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_cos(a, b):
    try:
        return cosine(a, b)
    except UndefinedCosineError:
        return None


def step_diagnostics(step: int, tg: TaskGradients, combined, update, *, beta=None, rho=None,
                     tracking_error=None, prev_update=None) -> DiagnosticsRecord:
    """Collect the per-step record, tolerating zero vectors (fields become None)."""
    combined = np.asarray(combined)
    cos = [_safe_cos(combined, g) for g in tg.flat]
    try:
        prof = projection_profile(update, tg)
        norms, ratio, mixed = prof.norms.tolist(), prof.ratio, prof.sign_mixed
    except UndefinedCosineError:
        norms, ratio, mixed = None, None, True
    erank = {}
    for name, block in tg.split(combined).items():
        if block.ndim == 2 and np.any(block):
            erank[name] = effective_rank(block)
    return DiagnosticsRecord(
        step=step,
        cos_combined_vs_task=None if any(c is None for c in cos) else cos,
        proj_norms=norms,
        proj_norm_ratio=ratio,
        sign_mixed=mixed,
        effective_rank=erank,
        beta=beta,
        rho=rho,
        tracking_error=tracking_error,
        update_cos_prev=None if prev_update is None else _safe_cos(update, prev_update),
    )
