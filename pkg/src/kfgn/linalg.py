"""Dense float64 linear algebra used by the curvature solvers.

Matrices are plain 2-D ``numpy`` arrays. Kronecker-structured routines use
the column-major ``vec`` convention, so that ``(Q kron G) vec(V) == vec(G V Q^T)``
and a layer update ``V`` has the shape of the weight matrix ``(rows(G), rows(Q))``.
"""
from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg

from .errors import (
    ContractError,
    DegenerateCurvatureError,
    NegativeCurvatureError,
    NumericBreakdownError,
    SingularMatrixError,
)

SYMMETRY_RTOL = 1e-12
CG_TOL = 1e-6
CG_MAX_ITER = 250
JITTER_CEILING = 1e-4
OMEGA_NORMS = ("trace", "frobenius")


class SymEig(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


class CGResult(NamedTuple):
    x: np.ndarray
    iters: int
    residual: float


def as_matrix(M, name="matrix") -> np.ndarray:
    """Return ``M`` as a finite 2-D float64 array or raise ContractError."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise ContractError(f"{name} must be a non-empty 2-D array, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ContractError(f"{name} has non-finite entries")
    return M


def _check_symmetric(M, name):
    M = as_matrix(M, name)
    if M.shape[0] != M.shape[1]:
        raise ContractError(f"{name} must be square, got {M.shape}")
    scale = max(np.abs(M).max(), np.finfo(float).tiny)
    if np.abs(M - M.T).max() > SYMMETRY_RTOL * scale:
        raise ContractError(f"{name} is not symmetric")
    return M


def sym_eig(M) -> SymEig:
    """Symmetric eigendecomposition, eigenvalues ascending."""
    M = _check_symmetric(M, "M")
    e, V = np.linalg.eigh(0.5 * (M + M.T))
    return SymEig(e, V)


def chol_solve(A, B, jitter: float = 0.0, context: str = "") -> np.ndarray:
    """Solve ``(A + jitter I) X = B`` by Cholesky.

    If the factorisation fails the jitter is raised tenfold until it would
    exceed ``1e-4 * tr(A) / dim(A)``, after which SingularMatrixError is
    raised.
    """
    A = as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ContractError(f"A must be square, got {A.shape}")
    if jitter < 0:
        raise ContractError("jitter must be non-negative")
    B = np.asarray(B, dtype=np.float64)
    n = A.shape[0]
    scale = np.trace(A) / n
    if not scale > 0:
        scale = 1.0
    ceiling = JITTER_CEILING * scale
    j = float(jitter)
    eye = np.eye(n)
    while True:
        try:
            factor = scipy.linalg.cho_factor(A + j * eye, lower=True, check_finite=False)
            return scipy.linalg.cho_solve(factor, B, check_finite=False)
        except np.linalg.LinAlgError:
            j = max(10.0 * j, 1e-10 * scale)
            if j > ceiling:
                where = f" in {context}" if context else ""
                raise SingularMatrixError(
                    f"Cholesky failed{where}: matrix of size {n} is singular "
                    f"even with jitter {ceiling:.3g}"
                ) from None


def cg_solve(
    apply: Callable[[np.ndarray], np.ndarray],
    b,
    tol: float = CG_TOL,
    max_iter: int = CG_MAX_ITER,
) -> CGResult:
    """Matrix-free conjugate gradients for a PSD operator, starting at zero.

    Stops once ``||apply(x) - b|| <= tol * ||b||`` or after ``max_iter``
    iterations; the final relative residual is reported either way.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(x, 0, 0.0)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    it = 0
    while it < max_iter:
        Ap = np.asarray(apply(p), dtype=np.float64)
        pAp = p @ Ap
        if not np.isfinite(pAp):
            raise NumericBreakdownError(f"non-finite curvature at CG iteration {it}")
        if pAp <= 0:
            raise NegativeCurvatureError(
                f"p^T A p = {pAp:.3g} <= 0 at CG iteration {it}; operator is not PSD"
            )
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rr_new = r @ r
        if not np.isfinite(rr_new):
            raise NumericBreakdownError(f"non-finite residual at CG iteration {it}")
        if np.sqrt(rr_new) <= tol * bnorm:
            rr = rr_new
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    # recurrence residual drifts from the true one; report the true value
    resid = np.linalg.norm(np.asarray(apply(x)) - b) / bnorm
    return CGResult(x, it, float(resid))


def _factor_norm(M, norm):
    if norm == "trace":
        return np.trace(M)
    if norm == "frobenius":
        return np.linalg.norm(M, "fro")
    raise ContractError(f"unknown norm {norm!r}, expected one of {OMEGA_NORMS}")


def omega_star(Q, G, norm: str = "trace") -> float:
    """Split of the damping between the two Kronecker factors.

    Minimises ``w^-1 ||Q kron I|| + w ||I kron G||``. For the trace norm this is
    ``sqrt(tr(Q) dim(G) / (tr(G) dim(Q)))``.
    """
    Q = as_matrix(Q, "Q")
    G = as_matrix(G, "G")
    nq, ng = _factor_norm(Q, norm), _factor_norm(G, norm)
    if not (nq > 0 and ng > 0):
        raise DegenerateCurvatureError(
            f"Kronecker factor has non-positive {norm} norm (Q: {nq:.3g}, G: {ng:.3g})"
        )
    dq, dg = Q.shape[0], G.shape[0]
    if norm == "trace":
        return float(np.sqrt((nq * dg) / (ng * dq)))
    return float(np.sqrt((nq * np.sqrt(dg)) / (ng * np.sqrt(dq))))


def omega_residual_bound(Q, G, k: float, omega: float, norm: str = "trace") -> float:
    """Upper bound ``w^-1 sqrt(k) ||Q kron I|| + w sqrt(k) ||I kron G||`` on the
    error of the factored damping."""
    Q = as_matrix(Q, "Q")
    G = as_matrix(G, "G")
    dq, dg = Q.shape[0], G.shape[0]
    if norm == "trace":
        a, b = np.trace(Q) * dg, np.trace(G) * dq
    else:
        a = np.linalg.norm(Q, "fro") * np.sqrt(dg)
        b = np.linalg.norm(G, "fro") * np.sqrt(dq)
    rk = np.sqrt(k)
    return float(rk * a / omega + omega * rk * b)


def _check_kron_operands(Q, G, V):
    Q = as_matrix(Q, "Q")
    G = as_matrix(G, "G")
    V = as_matrix(V, "V")
    if Q.shape[0] != Q.shape[1] or G.shape[0] != G.shape[1]:
        raise ContractError("Kronecker factors must be square")
    if V.shape != (G.shape[0], Q.shape[0]):
        raise ContractError(
            f"V has shape {V.shape}, expected {(G.shape[0], Q.shape[0])} for these factors"
        )
    return Q, G, V


def kron_solve_approx(Q, G, k: float, V, omega: float, context: str = "") -> np.ndarray:
    """``(G + w^-1 sqrt(k) I)^-1 V (Q + w sqrt(k) I)^-1`` via two Cholesky solves."""
    Q, G, V = _check_kron_operands(Q, G, V)
    if k < 0:
        raise ContractError("k must be non-negative")
    if not omega > 0:
        raise ContractError("omega must be positive")
    rk = np.sqrt(k)
    X = chol_solve(G, V, rk / omega, context=f"{context} G factor".strip())
    # Q is symmetric, so X Q'^-1 = (Q'^-1 X^T)^T
    return chol_solve(Q, X.T, rk * omega, context=f"{context} Q factor".strip()).T


def kron_solve_exact(Q, G, k: float, V) -> np.ndarray:
    """Solve ``(Q kron G + k I) vec(X) = vec(V)`` through both eigendecompositions."""
    Q, G, V = _check_kron_operands(Q, G, V)
    eq, Uq = sym_eig(Q)
    eg, Ug = sym_eig(G)
    denom = np.outer(eg, eq) + k
    if np.any(denom <= 0):
        raise SingularMatrixError("Q kron G + kI is not positive definite")
    Vt = Ug.T @ V @ Uq
    return Ug @ (Vt / denom) @ Uq.T


def psd_project(M) -> np.ndarray:
    """Clamp negative eigenvalues of a symmetric matrix (or stack) to zero."""
    M = np.asarray(M, dtype=np.float64)
    e, U = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    e = np.clip(e, 0.0, None)
    return (U * e[..., None, :]) @ np.swapaxes(U, -1, -2)


def psd_sqrt_factors(M) -> np.ndarray:
    """Columns ``c_k`` with ``sum_k c_k c_k^T`` equal to the PSD projection of ``M``.

    Works on a single matrix or a stack ``(..., D, D)``; the result has the
    same shape, column ``k`` of each matrix being ``sqrt(max(e_k, 0)) u_k``.
    """
    M = np.asarray(M, dtype=np.float64)
    e, U = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    return U * np.sqrt(np.clip(e, 0.0, None))[..., None, :]
