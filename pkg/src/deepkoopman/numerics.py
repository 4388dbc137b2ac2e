"""Dense linear algebra kernel.

Matrices are plain 2-D float64 ``numpy`` arrays. The SVD is a one-sided
Jacobi (Hestenes) iteration written here so that the pseudoinverse and the
least-squares fits built on it are deterministic and self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_PINV_TOL = 1e-12


class NumericalError(RuntimeError):
    """Raised when a numerical routine fails (non-convergence, loss of SPD)."""


def as_matrix(M, name: str = "M") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``M = U @ diag(S) @ Vt``.

    Attributes
    ----------
    U : (r, k) ndarray
        Orthonormal columns, ``k = min(r, c)``.
    S : (k,) ndarray
        Singular values, descending and nonnegative.
    Vt : (k, c) ndarray
        Orthonormal rows.
    rank : int
        Number of singular values above ``rank_tol * S[0]``.
    """

    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray
    rank: int

    def numerical_rank(self, rel_tol: float) -> int:
        if self.S.size == 0 or self.S[0] == 0.0:
            return 0
        return int(np.sum(self.S > rel_tol * self.S[0]))


def _complete_orthonormal(Q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``Q`` not flagged in ``keep`` by an orthonormal
    complement of the kept columns (Gram-Schmidt against the unit basis)."""
    r, k = Q.shape
    Q = Q.copy()
    basis = [Q[:, j] for j in range(k) if keep[j]]
    candidates = iter(np.eye(r))
    for j in range(k):
        if keep[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):  # twice is enough (Kahan)
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                Q[:, j] = v / nv
                basis.append(Q[:, j])
                break
        else:  # pragma: no cover - impossible while k <= r
            raise NumericalError("could not complete orthonormal basis")
    return Q


def _jacobi_tall(M: np.ndarray, max_sweeps: int, tol: float):
    """One-sided Jacobi on a matrix with ``rows >= cols``."""
    W = M.copy()
    c = W.shape[1]
    V = np.eye(c)
    # columns below this squared norm are numerically zero and never rotated
    negligible = (np.finfo(float).eps * np.linalg.norm(M)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for i in range(c - 1):
            for j in range(i + 1, c):
                wi, wj = W[:, i], W[:, j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                if min(alpha, beta) <= negligible or abs(gamma) <= tol * np.sqrt(alpha) * np.sqrt(beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                W[:, [i, j]] = np.column_stack((cs * wi - sn * wj, sn * wi + cs * wj))
                vi, vj = V[:, i].copy(), V[:, j].copy()
                V[:, i] = cs * vi - sn * vj
                V[:, j] = sn * vi + cs * vj
        if not rotated:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    S = np.linalg.norm(W, axis=0)
    order = np.argsort(-S, kind="stable")
    S, W, V = S[order], W[:, order], V[:, order]
    smax = S[0] if S.size else 0.0
    # columns this small carry no direction; they are re-orthogonalised below
    keep = S > smax * np.finfo(float).eps * max(W.shape) if smax > 0 else np.zeros(S.shape, bool)
    U = np.zeros_like(W)
    U[:, keep] = W[:, keep] / S[keep]
    if not np.all(keep):
        U = _complete_orthonormal(U, keep)
    return U, S, V.T


def svd(M, rank_tol: float = 1e-10, max_sweeps: int = 60, tol: float = 1e-15) -> SvdResult:
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Raises
    ------
    NumericalError
        If the rotations have not converged after ``max_sweeps`` sweeps.
    """
    M = as_matrix(M)
    r, c = M.shape
    if r == 0 or c == 0:
        k = min(r, c)
        return SvdResult(np.zeros((r, k)), np.zeros(k), np.zeros((k, c)), 0)
    # work on a unit-scaled copy so squared column norms neither under- nor overflow
    scale = float(np.max(np.abs(M)))
    Ms = M / scale if scale > 0 else M
    if r >= c:
        U, S, Vt = _jacobi_tall(Ms, max_sweeps, tol)
    else:
        V, S, Ut = _jacobi_tall(Ms.T, max_sweeps, tol)
        U, Vt = Ut.T, V.T
    if scale > 0:
        S = S * scale
    res = SvdResult(U, S, Vt, 0)
    return SvdResult(U, S, Vt, res.numerical_rank(rank_tol))


def pinv(M, rel_tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse via truncated SVD.

    Singular values at or below ``rel_tol * S[0]`` are treated as zero, as
    are subnormal ones, whose reciprocals would overflow.
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    res = svd(M)
    if res.S.size == 0 or res.S[0] == 0.0:
        return np.zeros(as_matrix(M).shape[::-1])
    keep = res.S > max(rel_tol * res.S[0], np.finfo(float).tiny)
    inv_s = np.zeros_like(res.S)
    inv_s[keep] = 1.0 / res.S[keep]
    return (res.Vt.T * inv_s) @ res.U.T


def lstsq_min_norm(X, Y, rel_tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Minimum-norm ``A`` minimising ``||Y - A X||_F``, i.e. ``A = Y X^+``."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"X and Y need the same number of columns ({X.shape[1]} != {Y.shape[1]})")
    return Y @ pinv(X, rel_tol)


def cholesky_solve(M, R) -> np.ndarray:
    """Solve ``M S = R`` for symmetric positive definite ``M``."""
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("matrix is not symmetric positive definite") from exc
    return np.linalg.solve(np.swapaxes(L, -1, -2), np.linalg.solve(L, R))


def tikhonov_lstsq(X, Y, eps: float) -> np.ndarray:
    """Ridge fit ``A = Y X^T (X X^T + eps I)^-1`` through a Cholesky solve."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"X and Y need the same number of columns ({X.shape[1]} != {Y.shape[1]})")
    G = X @ X.T + eps * np.eye(X.shape[0])
    # A^T = G^-1 X Y^T  (G symmetric)
    return cholesky_solve(G, X @ Y.T).T


def matrix_exp(M, t: float = 1.0) -> np.ndarray:
    """``exp(t M)`` by scaling and squaring with a truncated Taylor series."""
    M = as_matrix(M)
    if M.shape[0] != M.shape[1]:
        raise ValueError("matrix_exp needs a square matrix")
    tM = t * M
    n = M.shape[0]
    norm = np.abs(tM).sum(axis=0).max() if n else 0.0
    s = 0
    if norm > 0.5:
        s = int(np.ceil(np.log2(norm / 0.5)))
    B = tM / (2.0 ** s)
    E = np.eye(n)
    term = np.eye(n)
    for k in range(1, 40):
        term = term @ B / k
        E = E + term
        if np.abs(term).max() <= 1e-18 * np.abs(E).max():
            break
    for _ in range(s):
        E = E @ E
    return E


def _scaled_norm2(a) -> float:
    # divide by the largest magnitude first so squares neither underflow nor overflow
    a = np.abs(np.asarray(a, dtype=float))
    scale = float(a.max()) if a.size else 0.0
    if scale == 0.0 or not np.isfinite(scale):
        return scale
    return scale * float(np.sqrt(np.sum(np.square(a / scale))))


def frobenius(M) -> float:
    return _scaled_norm2(M)


def l1(v) -> float:
    return float(np.sum(np.abs(np.asarray(v, dtype=float))))


def l2(v) -> float:
    return _scaled_norm2(v)


def write_matrix_csv(M, path) -> None:
    """Dump a matrix as CSV, one row per line, round-trip precision."""
    M = as_matrix(M)
    lines = [",".join(repr(float(v)) for v in row) for row in M]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_matrix_csv(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if len(rows[-1]) != len(rows[0]):
            raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} values, got {len(rows[-1])}")
    return np.array(rows, dtype=float)
