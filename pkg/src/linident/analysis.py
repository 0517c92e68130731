"""Measurement and verification of linear identifiability.

Similarity measures (PCA, CCA, SVCCA, least-squares map fitting) work on
plain representation matrices. The recovery routines rebuild the invertible
maps between two models directly from their context vectors:

* :func:`diversity_check_f` searches observed candidate sets for M target
  pairs whose g-difference vectors form an invertible M x M matrix;
* :func:`theorem1_recover` turns two such matrices (one per model, same
  pairs) into the map ``A`` with ``f'(x) = A f*(x)``;
* :func:`context_recover` does the same for ``g`` through the augmented
  vectors ``[-Z(x, S); f(x)]`` and ``[1; g(y)]``.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .linalg import SingularMatrixError, as_matrix, center_columns, covariance, svd
from .model import encode_f, encode_g, z_normalizer

COND_INVERTIBLE = 1e8
RIDGE_SCALE = 1e-8
RIDGE_TRIGGER_COND = 1e10
DEFAULT_ATTEMPTS = 50


class RankDeficiencyError(linalg.LinAlgFailure):
    pass


class InsufficientTargetsError(ValueError):
    pass


class InsufficientDiversityError(linalg.LinAlgFailure):
    pass


class InconsistentNormalizerError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Report types
# ---------------------------------------------------------------------------


@dataclass
class ReprDump:
    """An n x M matrix of representations plus provenance."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = as_matrix(self.data, "representation")

    def save(self, path):
        """JSON metadata line, then one CSV row of M floats per example."""
        with Path(path).open("w", newline="") as fh:
            fh.write(json.dumps(self.meta, sort_keys=True, default=_to_json) + "\n")
            writer = csv.writer(fh)
            for row in self.data:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def load(cls, path):
        with Path(path).open() as fh:
            meta = json.loads(fh.readline())
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        return cls(np.array(rows), meta)


def _matrix(x):
    return x.data if isinstance(x, ReprDump) else as_matrix(x)


@dataclass
class CcaReport:
    correlations: np.ndarray
    C: np.ndarray
    D: np.ndarray
    ridge: tuple = (0.0, 0.0)

    @property
    def mean_rho(self):
        return float(np.mean(self.correlations))

    def to_dict(self):
        return {
            "mean_rho": self.mean_rho,
            "correlations": self.correlations.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
            "ridge": list(self.ridge),
        }


@dataclass
class DiversityReport:
    role: str  # "L_for_f" or "M_for_g"
    rank: int
    condition: float
    required: int
    tuples: list
    attempts_used: int = 1

    @property
    def satisfied(self):
        return self.rank == self.required and self.condition < COND_INVERTIBLE

    def to_dict(self):
        d = asdict(self)
        d["satisfied"] = self.satisfied
        d["condition"] = _finite_or_str(self.condition)
        return d


@dataclass
class RecoveryReport:
    map: np.ndarray
    residual: float
    condition: float
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "map": self.map.tolist(),
            "residual": self.residual,
            "condition": _finite_or_str(self.condition),
            "details": self.details,
        }


def _finite_or_str(v):
    return float(v) if np.isfinite(v) else str(v)


def _to_json(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_json_report(path, report):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True, default=_to_json))


# ---------------------------------------------------------------------------
# PCA / CCA / SVCCA
# ---------------------------------------------------------------------------


def pca_project(X, k):
    """Project centred data onto its top-`k` principal directions.

    Returns
    -------
    projected : ndarray, shape (n, k)
    explained : ndarray, shape (k,)
        Fraction of total variance per retained component, descending.
    """
    X = _matrix(X)
    if not 1 <= k <= X.shape[1]:
        raise ValueError(f"k must lie in [1, {X.shape[1]}], got {k}")
    Xc, _ = center_columns(X)
    _, s, V = svd(Xc)
    total = np.sum(s ** 2)
    explained = s[:k] ** 2 / total if total > 0 else np.zeros(k)
    return Xc @ V[:, :k], explained


def _whitener(cov):
    """Inverse square root of a covariance, adding a ridge only if ill-conditioned."""
    scale = float(np.mean(np.diag(cov)))
    if not scale > 0:
        raise RankDeficiencyError("representation has zero variance")
    ridge = 0.0
    if linalg.condition_number(cov) > RIDGE_TRIGGER_COND:
        ridge = RIDGE_SCALE * scale
        cov = cov + ridge * np.eye(len(cov))
        cond = linalg.condition_number(cov)
        if not cond < linalg.SINGULAR_COND:
            raise RankDeficiencyError(f"covariance singular after ridge (cond={cond:.3g})")
    return linalg.inv_sqrt_psd(cov), ridge


def cca(X, Y):
    """Canonical correlation analysis of two representation matrices.

    Singular values of ``Σxx^{-1/2} Σxy Σyy^{-1/2}`` give the correlations;
    ``C = Σxx^{-1/2} U`` and ``D = Σyy^{-1/2} V`` hold the canonical
    directions as columns. A ridge of ``1e-8 * mean(diag Σ)`` is added to a
    covariance only when its condition number exceeds 1e10.
    """
    X, Y = _matrix(X), _matrix(Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y need the same number of rows")
    if X.shape[0] < 2:
        raise RankDeficiencyError("need at least two samples")
    wx, rx = _whitener(covariance(X))
    wy, ry = _whitener(covariance(Y))
    U, s, V = svd(wx @ covariance(X, Y) @ wy)
    rho = np.clip(s, 0.0, 1.0)
    return CcaReport(rho, wx @ U, wy @ V, (rx, ry))


def svcca(X, Y, k):
    """PCA-truncate both inputs to `k` components, then run :func:`cca`."""
    px, _ = pca_project(X, k)
    py, _ = pca_project(Y, k)
    return cca(px, py)


def mean_pairwise_svcca(reprs, k):
    """Mean ρ of :func:`svcca` averaged over all unordered pairs of `reprs`."""
    vals = [svcca(reprs[i], reprs[j], k).mean_rho
            for i in range(len(reprs)) for j in range(i + 1, len(reprs))]
    return float(np.mean(vals)), vals


# ---------------------------------------------------------------------------
# Linear map fitting
# ---------------------------------------------------------------------------


def fit_linear_map(X, Y):
    """Least-squares ``A`` minimising ``||X Aᵀ - Y||_F``.

    ``residual`` is ``||X Aᵀ - Y||_F / ||Y||_F``.
    """
    X, Y = _matrix(X), _matrix(Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y need the same number of rows")
    rank = linalg.numerical_rank(X)
    if rank < X.shape[1]:
        raise RankDeficiencyError(f"X has rank {rank} < {X.shape[1]} columns")
    sol, *_ = np.linalg.lstsq(X, Y, rcond=None)
    A = sol.T
    ynorm = np.linalg.norm(Y)
    residual = float(np.linalg.norm(X @ sol - Y) / ynorm) if ynorm > 0 else 0.0
    cond = linalg.condition_number(A) if A.shape[0] == A.shape[1] else np.nan
    return RecoveryReport(A, residual, cond)


# ---------------------------------------------------------------------------
# Diversity condition and recovery oracles
# ---------------------------------------------------------------------------


def _distinct_targets(batch):
    used = np.flatnonzero(batch.candidates.any(axis=0))
    return used


def _draw_pairs(batch, M, rng):
    """M distinct unordered target pairs, each taken from one observed candidate set."""
    pairs = set()
    order = []
    n = len(batch)
    for _ in range(50 * M):
        row = rng.integers(n)
        members = np.flatnonzero(batch.candidates[row])
        a, b = rng.choice(members, size=2, replace=False)
        key = (min(a, b), max(a, b))
        if key not in pairs:
            pairs.add(key)
            order.append((int(a), int(b)))
            if len(order) == M:
                break
    return order


def difference_matrix(G, pairs):
    """M x M matrix whose i-th column is ``G[a_i] - G[b_i]``."""
    return np.stack([G[a] - G[b] for a, b in pairs], axis=1)


def _l_stats(L):
    rank = linalg.numerical_rank(L)
    cond = linalg.condition_number(L) if rank else np.inf
    return rank, cond


def diversity_check_f(model, batch, attempts=DEFAULT_ATTEMPTS, seed=0, others=()):
    """Search for M target pairs whose g-differences form an invertible matrix.

    Pairs are drawn from the observed candidate sets of `batch`. Up to
    `attempts` pair sets are tried; the best (highest rank, then lowest
    condition) is reported. If `others` holds more models, a pair set only
    counts as satisfying when it works for every model at once.

    Raises
    ------
    InsufficientTargetsError
        When fewer than M + 1 distinct targets are observed.
    """
    M = model.repr_dim
    targets = _distinct_targets(batch)
    if len(targets) < M + 1:
        raise InsufficientTargetsError(
            f"{len(targets)} distinct targets observed; need at least M + 1 = {M + 1}"
        )
    Gs = [encode_g(m, batch.pool) for m in (model, *others)]
    rng = np.random.default_rng(seed)
    best = None
    for attempt in range(1, attempts + 1):
        pairs = _draw_pairs(batch, M, rng)
        if len(pairs) < M:
            continue
        stats = [_l_stats(difference_matrix(G, pairs)) for G in Gs]
        rank = min(s[0] for s in stats)
        cond = max(s[1] for s in stats)
        report = DiversityReport("L_for_f", rank, cond, M, pairs, attempt)
        if best is None or (rank, -cond) > (best.rank, -best.condition):
            best = report
        if best.satisfied:
            break
    if best is None:
        best = DiversityReport("L_for_f", 0, np.inf, M, [], attempts)
    best.attempts_used = attempt
    return best


def theorem1_recover(model_prime, model_star, batch, eval_inputs=None,
                     attempts=DEFAULT_ATTEMPTS, seed=0):
    """Recover ``A`` with ``f'(x) = A f*(x)`` from g-difference matrices.

    With ``L'`` and ``L*`` built on the same target pairs,
    ``A = (L* L'^{-1})ᵀ``, computed as the solution of ``L'ᵀ A = L*ᵀ``.
    The residual ``||F' - F* Aᵀ|| / ||F'||`` is measured on `eval_inputs`
    (default: the batch inputs).

    Raises
    ------
    SingularMatrixError
        If no pair set makes both ``L'`` and ``L*`` invertible; run
        :func:`diversity_check_f` to diagnose.
    """
    div = diversity_check_f(model_star, batch, attempts, seed, others=(model_prime,))
    if not div.satisfied:
        raise SingularMatrixError(
            f"L' / L* not invertible (rank {div.rank}/{div.required}, "
            f"cond {div.condition:.3g}); re-run the diversity check",
            div.condition,
        )
    L_prime = difference_matrix(encode_g(model_prime, batch.pool), div.tuples)
    L_star = difference_matrix(encode_g(model_star, batch.pool), div.tuples)
    A, _ = linalg.solve(L_prime.T, L_star.T)
    xs = batch.inputs if eval_inputs is None else eval_inputs
    F_prime = encode_f(model_prime, xs)
    F_star = encode_f(model_star, xs)
    residual = float(np.linalg.norm(F_prime - F_star @ A.T) / np.linalg.norm(F_prime))
    return RecoveryReport(
        A, residual, linalg.condition_number(A),
        {"tuples": div.tuples, "L_condition": div.condition},
    )


def augmented_f(model, batch):
    """Columns ``[-Z(x, S); f(x)]`` for every example of `batch`, shape (M+1, n)."""
    F = encode_f(model, batch.inputs)
    Z = z_normalizer(model, batch.inputs, batch.pool, batch.candidates)
    return np.vstack([-Z[None, :], F.T])


def context_recover(model_prime, model_star, batch, attempts=DEFAULT_ATTEMPTS, seed=0,
                    tol=1e-6):
    """Recover ``B`` with ``g'(y) = B g*(y)`` through the augmented representation.

    Picks M + 1 examples whose augmented vectors form invertible matrices
    ``M'`` and ``M*``, forms ``Ã = (M* M'^{-1})ᵀ`` so that
    ``[1; g'(y)] = Ã [1; g*(y)]``, checks the first coordinate stays 1 on
    every observed target, then fits ``B`` by least squares over the
    observed targets and checks it is invertible.

    Raises
    ------
    InsufficientDiversityError
        If the observed ``g*`` vectors do not span R^M or no invertible
        ``M'``/``M*`` pair is found.
    InconsistentNormalizerError
        If the first row of ``Ã`` maps some ``[1; g*(y)]`` away from 1 by
        more than `tol` (relative). ``tol=None`` only reports the deviation.
    """
    M = model_star.repr_dim
    targets = _distinct_targets(batch)
    G_star = encode_g(model_star, batch.pool)[targets]
    G_prime = encode_g(model_prime, batch.pool)[targets]
    if linalg.numerical_rank(G_star) < M or linalg.numerical_rank(G_prime) < M:
        raise InsufficientDiversityError("observed context vectors do not span R^M")

    aug_prime = augmented_f(model_prime, batch)
    aug_star = augmented_f(model_star, batch)
    n = aug_star.shape[1]
    if n < M + 1:
        raise InsufficientDiversityError(f"need at least {M + 1} examples, got {n}")
    rng = np.random.default_rng(seed)
    chosen, best_cond = None, np.inf
    for _ in range(attempts):
        cols = rng.choice(n, size=M + 1, replace=False)
        cond = max(linalg.condition_number(aug_prime[:, cols]),
                   linalg.condition_number(aug_star[:, cols]))
        if cond < best_cond:
            chosen, best_cond = cols, cond
        if cond < COND_INVERTIBLE:
            break
    if not best_cond < COND_INVERTIBLE:
        raise InsufficientDiversityError(
            f"augmented matrices M'/M* not invertible (cond {best_cond:.3g})"
        )
    Mp, Ms = aug_prime[:, chosen], aug_star[:, chosen]
    A_aug, _ = linalg.solve(Mp.T, Ms.T)

    g_tilde_star = np.hstack([np.ones((len(targets), 1)), G_star])
    first = g_tilde_star @ A_aug[0]
    deviation = float(np.max(np.abs(first - 1.0)))
    if tol is not None and deviation > tol * max(1.0, float(np.max(np.abs(g_tilde_star)))):
        raise InconsistentNormalizerError(
            f"first augmented coordinate deviates from 1 by {deviation:.3g}"
        )

    fit = fit_linear_map(G_star, G_prime)
    if not fit.condition < COND_INVERTIBLE:
        raise InsufficientDiversityError(f"recovered B is singular (cond {fit.condition:.3g})")
    fit.details = {
        "augmented_map": A_aug.tolist(),
        "affine_offset": A_aug[1:, 0].tolist(),
        "first_row_deviation": deviation,
        "M_condition": best_cond,
        "examples": [int(c) for c in chosen],
    }
    return fit
