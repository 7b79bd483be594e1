"""Dense small-matrix kernels for the whitening layers.

Covariance, symmetric eigendecomposition (the exact-whitening and oracle
path) and the coupled Newton-Schulz iteration for the inverse matrix
square root. Everything is float64, and every symmetric intermediate is
re-symmetrized explicitly: the analytic backward pass assumes the iterates
commute with their input, which floating-point drift would silently break.
"""

from typing import NamedTuple

import numpy as np

from .errors import InputError, NumericError

# Magnitude at which a Newton-Schulz iterate is declared divergent. The
# iteration only blows up when the convergence precondition (spectrum of
# the input inside the unit ball around I) was violated by the caller.
_DIVERGENCE_LIMIT = 1e100


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a finite, 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise InputError(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise InputError(f"{name}: non-finite input")
    return m


def check_square(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    a = as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise InputError(f"{name}: expected square matrix, got shape {a.shape}")
    return a


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


class EigenPair(NamedTuple):
    """Eigenvalues in descending order; eigenvectors as orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def covariance(x_c: np.ndarray, eps: float) -> np.ndarray:
    """Biased covariance (1/m) X_C X_C^T + eps*I of a pre-centered d x m batch.

    Centering is the caller's job. The result is exactly symmetrized before
    returning so downstream eigen/iteration code sees a bitwise-symmetric
    matrix.
    """
    x_c = as_matrix(x_c, "x_c")
    if eps < 0.0:
        raise InputError("eps must be >= 0")
    m = x_c.shape[1]
    sigma = (x_c @ x_c.T) / m
    sigma = symmetrize(sigma)
    if eps:
        sigma[np.diag_indices_from(sigma)] += eps
    return sigma


def sym_eigen(a: np.ndarray) -> EigenPair:
    """Eigendecomposition of a symmetric matrix with a fixed sign convention.

    Eigenvalues are returned in descending order. Each eigenvector is
    flipped, if necessary, so that its largest-magnitude component is
    positive, which makes the output deterministic for a fixed input.
    """
    a = check_square(a, "a")
    scale = max(1.0, float(np.abs(a).max()))
    if float(np.abs(a - a.T).max()) > 1e-8 * scale:
        raise InputError("sym_eigen: matrix is not symmetric")
    try:
        evals, evecs = np.linalg.eigh(symmetrize(a))
    except np.linalg.LinAlgError as exc:
        raise NumericError("eigen did not converge") from exc
    # descending, with a stable sort so ties keep their original vectors
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    evecs = evecs[:, order]
    anchor = np.abs(evecs).argmax(axis=0)
    signs = np.sign(evecs[anchor, np.arange(evecs.shape[1])])
    signs[signs == 0] = 1.0
    evecs *= signs
    return EigenPair(evals, evecs)


def newton_schulz(sigma_n: np.ndarray, iterations: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Newton-Schulz iterates P_k = (3 P_{k-1} - P_{k-1}^3 A) / 2 toward A^{-1/2}.

    Requires a symmetric PSD input with unit trace, which puts the spectrum
    in (0, 1] and guarantees convergence. Returns the final iterate together
    with the full list [P_0, ..., P_T]; the backward pass replays the
    recursion and needs all of them. Each iterate is re-symmetrized.

    The recurrence is evaluated in the coupled form
        T_k = (3 I - P_{k-1} Q_{k-1}) / 2,   P_k = T_k P_{k-1},   Q_k = Q_{k-1} T_k
    with Q_0 = A, which produces the same iterates (Q_k = A P_k in exact
    arithmetic, everything being polynomials in A) but is numerically
    self-correcting. The plain cube form amplifies rounding in
    eigen-directions with value ratios above ~4 once converged, and visibly
    diverges for large iteration counts; same per-step cost of three d^3
    products either way.
    """
    a = check_square(sigma_n, "sigma_n")
    if iterations < 0:
        raise InputError("iterations must be >= 0")
    d = a.shape[0]
    if abs(float(np.trace(a)) - 1.0) > 1e-10:
        raise InputError("sigma_n must have unit trace")
    eye = np.eye(d)
    p = eye
    q = a
    iterates = [p]
    t = np.empty_like(a)
    for _ in range(iterations):
        np.matmul(p, q, out=t)
        t *= -0.5
        t += 1.5 * eye
        p = symmetrize(t @ p)
        q = q @ t
        peak = float(np.abs(p).max())
        # a NaN peak fails the comparison and lands here as well
        if not peak <= _DIVERGENCE_LIMIT:
            raise NumericError("iteration diverged")
        iterates.append(p)
    return p, iterates


def spectral_norm_bound(a: np.ndarray) -> float:
    """||A - I||_2 for symmetric A, i.e. max_i |lambda_i - 1|.

    Diagnostic for the Newton-Schulz convergence precondition: the
    iteration converges iff this is < 1.
    """
    evals = sym_eigen(a).eigenvalues
    return float(np.abs(evals - 1.0).max())
