"""Dense real linear algebra used by every other module.

Matrices are plain 2-D ``float64`` numpy arrays. The spectral norm is computed
with a deterministic power iteration so that results do not depend on the
LAPACK build.
"""

from __future__ import annotations

import numpy as np

DEFAULT_REL_TOL = 1e-10
DEFAULT_MAX_ITERS = 10_000
_RESTART_SEED = 0x5EED


class ConvergenceError(RuntimeError):
    """Power iteration did not reach the requested tolerance.

    The last iterate is kept on ``estimate`` so callers can decide whether it
    is good enough.
    """

    def __init__(self, message: str, estimate: float, iterations: int):
        super().__init__(message)
        self.estimate = estimate
        self.iterations = iterations


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``m`` to a finite 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def row_norms(m) -> np.ndarray:
    """Euclidean norm of every row. An empty matrix gives an empty vector."""
    a = as_matrix(m)
    if a.shape[0] == 0:
        return np.zeros(0)
    return np.sqrt(np.einsum("ij,ij->i", a, a))


def frobenius_norm(m) -> float:
    a = as_matrix(m)
    return float(np.sqrt(np.sum(a * a)))


def _power_iterate(gram: np.ndarray, x: np.ndarray, rel_tol: float, max_iters: int):
    """Run power iteration on a symmetric PSD matrix from unit vector ``x``.

    Returns ``(rayleigh, converged, iterations)``.
    """
    lam = float(x @ gram @ x)
    for it in range(1, max_iters + 1):
        y = gram @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0, True, it
        x = y / ny
        lam_new = float(x @ gram @ x)
        if abs(lam_new - lam) <= rel_tol * abs(lam_new):
            return lam_new, True, it
        lam = lam_new
    return lam, False, max_iters


def spectral_norm(m, rel_tol: float = DEFAULT_REL_TOL, max_iters: int = DEFAULT_MAX_ITERS) -> float:
    """Largest singular value of ``m`` by power iteration on ``m^T m``.

    The iteration starts from the normalized all-ones vector. Because that
    start can sit exactly on a non-dominant eigenvector (and then "converge"
    immediately to the wrong value), every run is confirmed by one restart
    from a fixed-seed random vector and the larger Rayleigh quotient wins.

    Raises
    ------
    ConvergenceError
        If either run fails to settle within ``max_iters`` iterations.
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    a = as_matrix(m)
    if a.size == 0 or not np.any(a):
        return 0.0
    # iterate on the smaller Gram matrix
    gram = a.T @ a if a.shape[1] <= a.shape[0] else a @ a.T
    n = gram.shape[0]
    starts = [np.full(n, 1.0 / np.sqrt(n))]
    rnd = np.random.default_rng(_RESTART_SEED).standard_normal(n)
    starts.append(rnd / np.linalg.norm(rnd))
    best = 0.0
    for x0 in starts:
        lam, ok, iters = _power_iterate(gram, x0, rel_tol, max_iters)
        if not ok:
            raise ConvergenceError(
                f"power iteration did not converge in {max_iters} iterations",
                estimate=float(np.sqrt(max(lam, 0.0))),
                iterations=iters,
            )
        best = max(best, lam)
    return float(np.sqrt(max(best, 0.0)))


def spectral_norms(stack, rel_tol: float = DEFAULT_REL_TOL, max_iters: int = DEFAULT_MAX_ITERS) -> np.ndarray:
    """Vectorized :func:`spectral_norm` over a stack of shape ``(..., r, c)``.

    Uses the same two starting vectors as the scalar version and iterates
    until every matrix in the stack has settled.
    """
    a = np.asarray(stack, dtype=np.float64)
    if a.ndim < 2:
        raise ValueError("expected a stack of matrices")
    lead = a.shape[:-2]
    r, c = a.shape[-2:]
    a = a.reshape((-1, r, c))
    if a.shape[0] == 0 or r == 0 or c == 0:
        return np.zeros(lead)
    gram = np.swapaxes(a, 1, 2) @ a if c <= r else a @ np.swapaxes(a, 1, 2)
    n = gram.shape[-1]
    rnd = np.random.default_rng(_RESTART_SEED).standard_normal(n)
    starts = [np.full(n, 1.0 / np.sqrt(n)), rnd / np.linalg.norm(rnd)]
    best = np.zeros(a.shape[0])
    for x0 in starts:
        x = np.broadcast_to(x0, (a.shape[0], n)).copy()
        lam = np.einsum("bi,bij,bj->b", x, gram, x)
        done = np.zeros(a.shape[0], dtype=bool)
        for _ in range(max_iters):
            y = np.einsum("bij,bj->bi", gram, x)
            ny = np.linalg.norm(y, axis=1)
            zero = ny == 0.0
            x = np.where(zero[:, None], x, y / np.where(zero, 1.0, ny)[:, None])
            lam_new = np.where(zero, 0.0, np.einsum("bi,bij,bj->b", x, gram, x))
            settled = zero | (np.abs(lam_new - lam) <= rel_tol * np.abs(lam_new))
            lam = np.where(done, lam, lam_new)
            done |= settled
            if done.all():
                break
        else:
            worst = int(np.argmin(done))
            raise ConvergenceError(
                f"power iteration did not converge for matrix {worst}",
                estimate=float(np.sqrt(max(lam[worst], 0.0))),
                iterations=max_iters,
            )
        best = np.maximum(best, lam)
    return np.sqrt(np.maximum(best, 0.0)).reshape(lead)
