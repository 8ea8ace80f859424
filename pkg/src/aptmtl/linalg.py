"""Small dense linear algebra: SVD, polar factors, Newton-Schulz, simplex problems.

Matrices are plain 2-D float64 numpy arrays. Everything here is a pure function.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegeneratePolarError, InvalidInputError, ZeroGradientError

MUON_COEFFICIENTS = (3.4445, -4.7750, 2.0315)
# Quintic with f(1) = 1 and f'(1) = 0; converges to the polar factor.
POLISH_COEFFICIENTS = (15 / 8, -10 / 8, 3 / 8)
MAX_FAST_ITERATIONS = 5

POLAR_RANK_RTOL = 1e-12
SVD_MAX_DIM = 512


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def as_matrix(a) -> np.ndarray:
    m = np.array(a, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.size == 0:
        raise InvalidInputError("empty matrix")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix contains non-finite entries")
    return m


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Tournament schedule: n-1 rounds of disjoint column pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return tuple(rounds)


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged in ``keep`` with an orthonormal completion."""
    m, n = u.shape
    basis = [u[:, j] for j in range(n) if keep[j]]
    out = u.copy()
    candidates = iter(np.eye(m))
    for j in range(n):
        if keep[j]:
            continue
        for e in candidates:
            r = e.copy()
            for _ in range(2):
                for b in basis:
                    r -= (b @ r) * b
            nr = np.linalg.norm(r)
            if nr > 1e-8:
                r /= nr
                basis.append(r)
                out[:, j] = r
                break
    return out


def svd(a, *, tol: float = 1e-15, max_sweeps: int = 80) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``u`` (m x r), ``sigma`` (r,), ``vt`` (r x n) with r = min(m, n) and
    singular values sorted in non-increasing order.
    """
    a = as_matrix(a)
    m, n = a.shape
    if min(m, n) > SVD_MAX_DIM:
        raise InvalidInputError(f"svd is meant for small matrices, got {a.shape}")
    if m < n:
        r = svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(u=r.vt.T, sigma=r.sigma, vt=r.u.T)

    w = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            with np.errstate(over="ignore"):  # zeta = inf gives t = 0, the right limit
                zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            w[:, p], w[:, q] = c * wp - s * wq, s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break

    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]
    scale = sigma[0] if sigma[0] > 0 else 1.0
    keep = sigma > max(m, n) * np.finfo(float).eps * scale
    u = np.zeros_like(w)
    u[:, keep] = w[:, keep] / sigma[keep]
    if not keep.all():
        sigma = np.where(keep, sigma, 0.0)
        u = _complete_basis(u, keep)
    return SvdResult(u=u, sigma=sigma, vt=v.T)


def polar_factor(a) -> np.ndarray:
    """Orthogonal polar factor U V^T of a full-rank matrix."""
    r = svd(a)
    full = r.sigma.size
    rank = int(np.sum(r.sigma > POLAR_RANK_RTOL * r.sigma[0])) if r.sigma[0] > 0 else 0
    if rank < full:
        raise DegeneratePolarError(rank, full)
    return r.u @ r.vt


def newton_schulz_schedule(iterations: int, coefficients=MUON_COEFFICIENTS,
                           polish=POLISH_COEFFICIENTS) -> list[tuple[float, float, float]]:
    """Per-iteration quintic coefficients.

    The Muon coefficients grow small singular values fast but settle in a band
    around 0.7-1.2 instead of at 1. With ``polish`` set, iterations beyond the
    fifth use the convergent quintic, so up to five iterations are plain Muon.
    ``polish=None`` repeats ``coefficients`` for every iteration.
    """
    if iterations < 1:
        raise InvalidInputError("iterations must be >= 1")
    if polish is None:
        return [tuple(coefficients)] * iterations
    n_polish = max(0, iterations - MAX_FAST_ITERATIONS)
    return [tuple(coefficients)] * (iterations - n_polish) + [tuple(polish)] * n_polish


def newton_schulz(g, iterations: int = 5, coefficients=MUON_COEFFICIENTS,
                  polish=POLISH_COEFFICIENTS) -> np.ndarray:
    """Approximate the polar factor of ``g`` with a quintic Newton-Schulz iteration."""
    x = as_matrix(g)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise ZeroGradientError("newton_schulz of a zero matrix")
    x = x / norm
    tall = x.shape[0] > x.shape[1]
    if tall:
        x = x.T
    for a, b, c in newton_schulz_schedule(iterations, coefficients, polish):
        gram = x @ x.T
        x = a * x + (b * gram + c * gram @ gram) @ x
    return x.T if tall else x


@dataclass(frozen=True)
class Simplex:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"not a point of the probability simplex: {w}")
        object.__setattr__(self, "weights", w)


def _renormalize(w: np.ndarray) -> np.ndarray:
    w = np.clip(w, 0.0, None)
    return w / w.sum()


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return _renormalize(np.maximum(v - css[rho] / (rho + 1), 0.0))


def _line_min(aa: float, ab: float, bb: float) -> float:
    """argmin over gamma in [0, 1] of ||gamma*a + (1-gamma)*b||^2 from inner products."""
    denom = aa + bb - 2.0 * ab
    if denom <= 0.0:
        return 0.5
    return float(np.clip((bb - ab) / denom, 0.0, 1.0))


def _affine_min(M: np.ndarray, idx: list[int]) -> np.ndarray:
    """Weights (summing to 1, any sign) of the min-norm point in the affine hull of idx."""
    n = len(idx)
    sub = M[np.ix_(idx, idx)]
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = sub
    kkt[:n, n] = kkt[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:n]
    return sol / sol.sum()


def min_norm_simplex(points, max_iter: int = 250, tol: float = 1e-12) -> tuple[Simplex, np.ndarray]:
    """Minimum-norm point in the convex hull of ``points``.

    K = 2 uses the closed form. Larger K runs Wolfe's min-norm-point method: a
    Frank-Wolfe vertex selection followed by an exact affine solve on the active
    set, which terminates finitely instead of zig-zagging toward a face.
    ``max_iter`` caps the number of vertex additions.
    """
    pts = [np.asarray(p, dtype=np.float64).ravel() for p in points]
    if not pts:
        raise InvalidInputError("min_norm_simplex needs at least one point")
    if len({p.size for p in pts}) != 1:
        raise InvalidInputError("points have mismatched dimensions")
    P = np.stack(pts)
    if not np.all(np.isfinite(P)):
        raise InvalidInputError("points contain non-finite entries")
    k = P.shape[0]
    if k == 1:
        return Simplex(np.ones(1)), P[0].copy()

    M = P @ P.T
    if k == 2:
        gamma = _line_min(M[0, 0], M[0, 1], M[1, 1])
        w = np.array([gamma, 1.0 - gamma])
        return Simplex(w), w @ P

    scale = max(float(np.max(np.diag(M))), 1e-300)
    start = int(np.argmin(np.diag(M)))
    active = [start]
    lam = np.ones(1)
    for _ in range(max_iter):
        w = np.zeros(k)
        w[active] = lam
        grad = M @ w
        xx = float(w @ grad)
        j = int(np.argmin(grad))
        if xx - grad[j] <= tol * scale or j in active:
            break
        active.append(j)
        lam = np.append(lam, 0.0)
        for _ in range(k + 1):
            alpha = _affine_min(M, active)
            if np.all(alpha > tol):
                lam = alpha
                break
            # Step from lam toward alpha until the first weight hits zero, drop it.
            neg = alpha <= tol
            denom = lam[neg] - alpha[neg]
            ratios = np.where(denom > 0.0, lam[neg] / np.where(denom > 0.0, denom, 1.0), 0.0)
            theta = float(np.clip(np.min(ratios), 0.0, 1.0))
            lam = (1.0 - theta) * lam + theta * alpha
            keep = lam > tol
            if not keep.all():
                active = [a for a, kp in zip(active, keep) if kp]
                lam = lam[keep] / lam[keep].sum()
    w = np.zeros(k)
    w[active] = lam
    w = _renormalize(w)
    return Simplex(w), w @ P
