"""Dense real linear algebra used throughout the package.

Everything operates on float64 numpy arrays. Decompositions are delegated to
LAPACK through numpy; this module adds the validation, tolerances and error
types the rest of the package relies on.
"""

import numpy as np

DEFAULT_RANK_TOL = 1e-10
SINGULAR_COND = 1e12


class LinAlgFailure(ArithmeticError):
    """Base class for numerical failures raised by this package."""


class ConvergenceError(LinAlgFailure):
    """A decomposition did not converge."""


class SingularMatrixError(LinAlgFailure):
    """A matrix is (numerically) singular."""

    def __init__(self, message, condition=np.inf):
        super().__init__(message)
        self.condition = condition


def as_matrix(m, name="matrix"):
    """Return `m` as a finite 2-D float64 array, raising ValueError otherwise."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def svd(m):
    """Thin singular value decomposition.

    Returns
    -------
    U : ndarray, shape (rows, r)
    s : ndarray, shape (r,)
        Non-negative, descending.
    V : ndarray, shape (cols, r)
        Note: ``V``, not ``V^T``; ``m = U @ diag(s) @ V.T``.
    """
    m = as_matrix(m)
    try:
        U, s, Vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(str(exc)) from exc
    return U, s, Vt.T


def singular_values(m):
    m = as_matrix(m)
    try:
        return np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(str(exc)) from exc


def condition_number(m):
    """2-norm condition number; ``inf`` for rank-deficient input."""
    s = singular_values(m)
    if s[-1] == 0.0:
        return np.inf
    return float(s[0] / s[-1])


def solve(a, b):
    """Solve ``a @ X = b`` for square `a`.

    Returns
    -------
    X : ndarray
    cond : float
        Condition number of `a` (2-norm).

    Raises
    ------
    SingularMatrixError
        If the condition number of `a` exceeds 1e12.
    """
    a = as_matrix(a, "a")
    b_arr = np.asarray(b, dtype=np.float64)
    vector = b_arr.ndim == 1
    b_mat = as_matrix(b_arr, "b")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"a must be square, got shape {a.shape}")
    if b_mat.shape[0] != a.shape[0]:
        raise ValueError(f"shape mismatch: a {a.shape}, b {b_mat.shape}")
    cond = condition_number(a)
    if not cond < SINGULAR_COND:
        raise SingularMatrixError(f"matrix is singular (cond={cond:.3g})", cond)
    x = np.linalg.solve(a, b_mat)
    return (x[:, 0] if vector else x), cond


def inverse(a):
    a = as_matrix(a, "a")
    x, _ = solve(a, np.eye(a.shape[0]))
    return x


def numerical_rank(m, rel_tol=DEFAULT_RANK_TOL):
    """Number of singular values above ``rel_tol * s_max``; 0 for a zero matrix."""
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    s = singular_values(m)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def center_columns(m):
    """Subtract column means. Returns ``(centered, means)``."""
    m = as_matrix(m)
    means = m.mean(axis=0)
    return m - means, means


def covariance(x, y=None):
    """Sample cross-covariance of column-centered data (divisor n - 1)."""
    x = as_matrix(x, "x")
    y = x if y is None else as_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must have the same number of rows")
    n = x.shape[0]
    xc, _ = center_columns(x)
    yc, _ = center_columns(y)
    return xc.T @ yc / max(n - 1, 1)


def inv_sqrt_psd(c):
    """Inverse symmetric square root of a positive definite matrix."""
    c = as_matrix(c)
    c = 0.5 * (c + c.T)
    w, v = np.linalg.eigh(c)
    if w[0] <= 0.0:
        raise SingularMatrixError("matrix is not positive definite", np.inf)
    return (v / np.sqrt(w)) @ v.T


def random_invertible(rng, n, cond_max=100.0):
    """Random n x n matrix with condition number below `cond_max`.

    Built as ``Q1 diag(s) Q2`` with Haar-random orthogonal factors and
    singular values spread log-uniformly inside ``[1, sqrt(cond_max)]``.
    """
    q1, r1 = np.linalg.qr(rng.standard_normal((n, n)))
    q1 = q1 * np.sign(np.diag(r1))
    q2, r2 = np.linalg.qr(rng.standard_normal((n, n)))
    q2 = q2 * np.sign(np.diag(r2))
    s = np.exp(rng.uniform(0.0, 0.5 * np.log(cond_max), size=n))
    return (q1 * s) @ q2
