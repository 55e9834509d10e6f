"""L1-penalized sparse coding and greedy pursuit over a fixed dictionary.

`lasso_cd` minimizes  0.5 * ||D a - y||^2 + lambda * ||a||_1  by cyclic
coordinate descent with soft-thresholding; convergence is declared on the
KKT residual, which `kkt_residual` computes independently of the solver
state.  `omp` is the greedy least-squares pursuit used during dictionary
training.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceWarning, ParameterError

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 1000
_POLISH_EVERY = 8


@dataclass(frozen=True, eq=False)
class Dictionary:
    """A bank of K atoms stored as the columns of an (n x K) matrix."""

    atoms: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        arr = np.array(self.atoms, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise ParameterError("atoms must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("dictionary contains non-finite entries")
        if self.normalized:
            norms = np.linalg.norm(arr, axis=0)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                worst = float(np.max(np.abs(norms - 1.0)))
                raise ParameterError(f"columns of a normalized dictionary must be unit norm (off by {worst:.2e})")
        arr.flags.writeable = False
        object.__setattr__(self, "atoms", arr)

    @property
    def n_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]


@dataclass(frozen=True, eq=False)
class SparseCode:
    """Sparse coefficients over K atoms: strictly increasing indices, nonzero values."""

    indices: np.ndarray
    values: np.ndarray
    dim_k: int

    def __post_init__(self) -> None:
        idx = np.array(self.indices, dtype=np.int64, copy=True).reshape(-1)
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if idx.size != vals.size:
            raise ParameterError("indices and values must have equal length")
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise ParameterError("indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.dim_k:
                raise ParameterError(f"indices must lie in [0, {self.dim_k})")
            if np.any(vals == 0.0) or not np.all(np.isfinite(vals)):
                raise ParameterError("stored values must be nonzero and finite")
        idx.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "dim_k", int(self.dim_k))

    @classmethod
    def from_dense(cls, alpha: np.ndarray, dim_k: int | None = None) -> "SparseCode":
        alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
        idx = np.nonzero(alpha)[0]
        return cls(idx, alpha[idx], dim_k if dim_k is not None else alpha.size)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dim_k, dtype=np.float64)
        dense[self.indices] = self.values
        return dense

    @property
    def nnz(self) -> int:
        return int(self.indices.size)


def _soft(rho: np.ndarray, lam: float) -> np.ndarray:
    return np.sign(rho) * np.maximum(np.abs(rho) - lam, 0.0)


def _kkt_from_gradient(grad: np.ndarray, alpha: np.ndarray, lam: float) -> np.ndarray:
    # grad = D^T (D a - y).  On the support the stationarity condition is
    # grad_i = -lam * sign(a_i); off it |grad_i| <= lam.
    on_support = np.abs(grad + lam * np.sign(alpha))
    off_support = np.maximum(np.abs(grad) - lam, 0.0)
    return np.where(alpha != 0.0, on_support, off_support)


def lasso_objective(dictionary: Dictionary, y: np.ndarray, lam: float, alpha: np.ndarray) -> float:
    """0.5 * ||D a - y||^2 + lam * ||a||_1 for a dense coefficient vector."""
    resid = dictionary.atoms @ alpha - np.asarray(y, dtype=np.float64)
    return float(0.5 * resid @ resid + lam * np.abs(alpha).sum())


def _check_problem(dictionary: Dictionary, y: np.ndarray, lam: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != dictionary.n_dim:
        raise ParameterError(f"y has length {y.size}, dictionary rows {dictionary.n_dim}")
    if not lam > 0:
        raise ParameterError(f"lambda must be positive, got {lam}")
    return y

def lasso_cd(
    dictionary: Dictionary,
    y: np.ndarray,
    lam: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> SparseCode:
    """Solve the penalized L1 problem by cyclic coordinate descent.

    Sweeps the atoms in fixed index order, soft-thresholding one coefficient
    at a time against the precomputed Gram matrix, and stops at the first
    sweep whose KKT residual is <= tol.  Hitting max_iter first raises a
    ConvergenceWarning carrying the residual; the code is still returned.
    """
    y = _check_problem(dictionary, y, lam)
    alpha, kkt = _lasso_cd_batch(dictionary.atoms, y[:, None], lam, tol, max_iter)
    if kkt[0] > tol:
        warnings.warn(
            ConvergenceWarning(
                f"coordinate descent stopped after {max_iter} sweeps with KKT residual {kkt[0]:.3e}",
                residual=kkt[0],
            )
        )
    return SparseCode.from_dense(alpha[:, 0], dictionary.n_atoms)


def _polish_one(
    gram: np.ndarray,
    corr_col: np.ndarray,
    code_col: np.ndarray,
    lam: float,
    tol: float,
) -> np.ndarray | None:
    """Feature-sign refinement of one problem; new code or None.

    Cyclic descent localizes the support quickly but crawls when a
    coordinate must cross zero or a boundary atom sits at the penalty
    threshold, so the solver periodically hands the iterate to this walk
    over explicit (support, sign) patterns.  Each round solves the
    sign-fixed stationarity system exactly (direct solve, with an
    eigendecomposition fallback for singular supports; a singular but
    consistent system is shifted along its null direction into the sign
    orthant, where every solution shares one objective and one off-support
    gradient).  A feasible exact solution either certifies optimality or
    names the worst violating off-support atom, which is activated with the
    sign its gradient demands.  An infeasible one is approached only to the
    first zero crossing, dropping that coordinate; when no stationary point
    exists at all, an exact line search along the sign-fixed steepest
    descent is used instead.  Every move is guarded by objective decrease
    and the result is returned only when it improves on the input, keeping
    the surrounding solver monotone and deterministic.
    """
    dim_k = code_col.size

    def _q(vec: np.ndarray) -> float:
        return float(0.5 * vec @ (gram @ vec) - corr_col @ vec + lam * np.abs(vec).sum())

    dense = code_col.copy()
    q_orig = q_cur = _q(dense)
    sup = np.nonzero(dense)[0]
    sigma = np.sign(dense[sup])
    activated: set[int] = set()
    for _ in range(32):
        if sup.size == 0:
            break
        sub_gram = gram[np.ix_(sup, sup)]
        rhs = corr_col[sup] - lam * sigma
        rhs_scale = max(1.0, float(np.max(np.abs(rhs))))
        null_basis = None
        refit = None
        try:
            candidate = np.linalg.solve(sub_gram, rhs)
            if np.all(np.isfinite(candidate)) and (
                np.max(np.abs(sub_gram @ candidate - rhs)) <= 1e-9 * rhs_scale
            ):
                refit = candidate
        except np.linalg.LinAlgError:
            pass
        if refit is None:
            # Singular support: fall back to the eigendecomposition to get
            # the minimum-norm stationary point and the null space.
            evals, evecs = np.linalg.eigh(sub_gram)
            rank = int((evals > evals[-1] * 1e-12).sum()) if evals[-1] > 0.0 else 0
            if rank == 0:
                break
            span = evecs[:, sup.size - rank:]
            refit = span @ ((span.T @ rhs) / evals[sup.size - rank:])
            null_basis = evecs[:, : sup.size - rank].T
        consistent = np.max(np.abs(sub_gram @ refit - rhs)) <= 1e-9 * rhs_scale
        if (
            consistent
            and null_basis is not None
            and null_basis.shape[0] == 1
            and np.any(np.sign(refit) != sigma)
        ):
            null = null_basis[0]
            slope = sigma * null
            offset = sigma * refit
            lo = np.max(-offset[slope > 0.0] / slope[slope > 0.0], initial=-np.inf)
            hi = np.min(-offset[slope < 0.0] / slope[slope < 0.0], initial=np.inf)
            if np.all(offset[slope == 0.0] >= 0.0) and lo <= hi:
                if np.isfinite(lo) and np.isfinite(hi):
                    tau = 0.5 * (lo + hi)
                elif np.isfinite(lo):
                    tau = lo + 1.0
                elif np.isfinite(hi):
                    tau = hi - 1.0
                else:
                    tau = 0.0
                refit = refit + tau * null
                refit[sigma * refit <= 0.0] = 0.0
        if consistent and np.all((np.sign(refit) == sigma) | (refit == 0.0)):
            cand = np.zeros(dim_k)
            cand[sup] = refit
            q_cand = _q(cand)
            if q_cand > q_cur + 1e-14 * max(1.0, abs(q_cur)):
                break
            dense, q_cur = cand, min(q_cur, q_cand)
            sup = np.nonzero(dense)[0]
            sigma = np.sign(dense[sup])
            grad = gram @ dense - corr_col
            spare = np.abs(grad) - lam
            spare[dense != 0.0] = -np.inf
            worst = int(np.argmax(spare))
            if spare[worst] <= 0.25 * tol or worst in activated:
                break
            activated.add(worst)
            sup = np.append(sup, worst)
            sigma = np.append(sigma, -np.sign(grad[worst]))
            continue
        current = dense[sup]
        pull = None
        if not consistent and null_basis is not None:
            pull = null_basis.T @ (null_basis @ rhs)
            if not float(pull @ pull) > 1e-24 * max(1.0, float(rhs @ rhs)):
                pull = None
        if consistent:
            direction = refit - current
            t_free = 1.0
        elif pull is not None:
            # The sign-fixed objective is exactly linear along the null
            # space; ride its descent component until a coordinate crosses
            # zero (one always does: the problem is bounded below).
            direction = pull
            t_free = np.inf
        else:
            direction = rhs - sub_gram @ current
            curvature = float(direction @ (sub_gram @ direction))
            t_free = float(direction @ direction) / curvature if curvature > 0.0 else np.inf
        # A just-activated coordinate sits exactly at zero; if the step
        # pushes it out of its orthant, deactivate it instead of stepping.
        leaving = (current == 0.0) & (sigma * direction < 0.0)
        if leaving.any():
            sup, sigma = sup[~leaving], sigma[~leaving]
            continue
        moving_out = sigma * direction < 0.0
        t_cross = np.full(sup.size, np.inf)
        t_cross[moving_out] = -current[moving_out] / direction[moving_out]
        t = min(t_free, float(t_cross.min()))
        if not np.isfinite(t) or t <= 0.0:
            break
        stepped = current + t * direction
        stepped[t_cross <= t * (1.0 + 1e-12)] = 0.0
        cand = np.zeros(dim_k)
        cand[sup] = stepped
        q_cand = _q(cand)
        if not q_cand < q_cur:
            break
        dense, q_cur = cand, q_cand
        sup = np.nonzero(dense)[0]
        sigma = np.sign(dense[sup])
    return dense if q_cur < q_orig else None


def _lasso_cd_batch(
    atoms: np.ndarray,
    ys: np.ndarray,
    lam: float,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate descent over a batch of problems sharing one dictionary.

    Every problem follows the exact cyclic update sequence of the single
    solver, handing unconverged problems to the feature-sign refinement on a
    per-problem schedule (first after _POLISH_EVERY sweeps, then doubling the
    interval after each attempt that leaves the problem unconverged, and once
    more on the final sweep).  Converged problems are frozen at the sweep
    boundary where their KKT residual first drops to tol.  All decisions for
    one problem depend only on that problem's column, so batch composition
    never changes results.  Returns (dense codes (K, B), final KKT residual
    per problem).
    """
    n, k = atoms.shape
    ys = np.asarray(ys, dtype=np.float64).reshape(n, -1)
    b = ys.shape[1]
    gram = atoms.T @ atoms
    diag = np.diag(gram).copy()
    live = diag > 0.0  # zero-norm atoms never activate
    corr = atoms.T @ ys  # (K, B)

    codes = np.zeros((k, b), dtype=np.float64)
    kkt_out = np.full(b, np.inf)
    active = np.arange(b)
    polish_due = np.full(b, _POLISH_EVERY, dtype=np.int64)
    polish_gap = np.full(b, _POLISH_EVERY, dtype=np.int64)
    for sweep in range(max_iter):
        sub = codes[:, active]
        csub = corr[:, active]
        for i in range(k):
            if not live[i]:
                continue
            rho = csub[i] - gram[i] @ sub + diag[i] * sub[i]
            sub[i] = _soft(rho, lam) / diag[i]
        grad = gram @ sub - csub
        kkt = _kkt_from_gradient(grad, sub, lam).max(axis=0)
        due = (polish_due[active] <= sweep + 1) | (sweep == max_iter - 1)
        for j in np.nonzero((kkt > tol) & due)[0]:
            polished = _polish_one(gram, csub[:, j], sub[:, j], lam, tol)
            if polished is not None:
                sub[:, j] = polished
                grad_j = gram @ polished - csub[:, j]
                kkt[j] = float(_kkt_from_gradient(grad_j, polished, lam).max())
            if kkt[j] > tol:
                problem = active[j]
                polish_gap[problem] = min(2 * polish_gap[problem], 256)
                polish_due[problem] = sweep + 1 + polish_gap[problem]
        codes[:, active] = sub
        kkt_out[active] = kkt
        active = active[kkt > tol]
        if active.size == 0:
            break
    return codes, kkt_out


def kkt_residual(dictionary: Dictionary, y: np.ndarray, lam: float, alpha: SparseCode) -> float:
    """Maximum KKT violation of `alpha` for the penalized L1 problem."""
    y = _check_problem(dictionary, y, lam)
    dense = alpha.to_dense() if isinstance(alpha, SparseCode) else np.asarray(alpha, np.float64)
    if dense.size != dictionary.n_atoms:
        raise ParameterError(f"code covers {dense.size} atoms, dictionary has {dictionary.n_atoms}")
    grad = dictionary.atoms.T @ (dictionary.atoms @ dense - y)
    return float(_kkt_from_gradient(grad, dense, lam).max())


def omp(dictionary: Dictionary, y: np.ndarray, sparsity_t: int) -> SparseCode:
    """Greedy pursuit: pick the max-|correlation| atom, refit, repeat.

    Selects at most sparsity_t atoms with a least-squares refit on the
    support after every pick, so the residual is orthogonal to all selected
    atoms on exit.  An atom whose addition makes the support rank-deficient
    is dropped and excluded from further picks.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    atoms = dictionary.atoms
    if y.size != atoms.shape[0]:
        raise ParameterError(f"y has length {y.size}, dictionary rows {atoms.shape[0]}")
    if not 1 <= sparsity_t <= min(atoms.shape):
        raise ParameterError(f"sparsity_t must lie in [1, min(n, K)], got {sparsity_t}")

    support: list[int] = []
    blocked: list[int] = []
    coef = np.zeros(0)
    residual = y.copy()
    while len(support) < sparsity_t:
        corr = atoms.T @ residual
        corr[support] = 0.0
        corr[blocked] = 0.0
        pick = int(np.argmax(np.abs(corr)))
        if abs(corr[pick]) <= 1e-12 * max(1.0, float(np.linalg.norm(y))):
            break
        trial = support + [pick]
        sol, _, rank, _ = np.linalg.lstsq(atoms[:, trial], y, rcond=None)
        if rank < len(trial):
            blocked.append(pick)
            continue
        support, coef = trial, sol
        residual = y - atoms[:, support] @ coef
    order = np.argsort(support)
    idx = np.asarray(support, dtype=np.int64)[order]
    vals = np.asarray(coef, dtype=np.float64)[order]
    keep = vals != 0.0
    return SparseCode(idx[keep], vals[keep], dictionary.n_atoms)


def _omp_batch(atoms: np.ndarray, ys: np.ndarray, sparsity_t: int) -> np.ndarray:
    """OMP over many columns sharing one dictionary; returns dense codes (K, B)."""
    n, k = atoms.shape
    ys = np.asarray(ys, dtype=np.float64).reshape(n, -1)
    b = ys.shape[1]
    codes = np.zeros((k, b), dtype=np.float64)
    supports: list[list[int]] = [[] for _ in range(b)]
    residual = ys.copy()
    norms = np.maximum(np.linalg.norm(ys, axis=0), 1.0)
    taken = np.zeros((k, b), dtype=bool)
    for _ in range(sparsity_t):
        corr = atoms.T @ residual
        corr[taken] = 0.0
        picks = np.argmax(np.abs(corr), axis=0)
        gains = np.abs(corr[picks, np.arange(b)])
        for s in np.nonzero(gains > 1e-12 * norms)[0]:
            trial = supports[s] + [int(picks[s])]
            sol, _, rank, _ = np.linalg.lstsq(atoms[:, trial], ys[:, s], rcond=None)
            taken[picks[s], s] = True
            if rank < len(trial):
                continue
            supports[s] = trial
            residual[:, s] = ys[:, s] - atoms[:, trial] @ sol
            codes[:, s] = 0.0
            codes[trial, s] = sol
    return codes
