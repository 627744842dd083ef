"""Low-rank tensor regression TR(R) and the LSQR baseline.

TR(R) minimizes
    l(W1, W2) = ||<L, W1 W2^T>_2 - s||^2 + sum_d sum_r P(w_d^(r), rho)
with the elastic-net penalty
    P(w, rho) = rho * ((lam - 1) / 2 * ||w||_2^2 + (2 - lam) * ||w||_1),
by alternating least squares: each half-step fixes one factor and solves an
elastic-net least-squares problem in the other. The data-fit term carries no
1/2 factor, so tuned rho values follow that scale.

Usage:
    cfg = TRConfig(rank=5, elastic_net=ElasticNetConfig(rho=1e-5, lam=1.5))
    result = tr_reconstruct(system, sinogram, cfg, ground_truth=truth)
    result.image, result.records, result.converged

    baseline = lsqr_solve(unfold_mode1(system), sinogram.values, max_iters=200)
"""

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import aslinearoperator

from tomography.lib.cp_tensor import (
    CPFactorPair,
    assemble_design,
    cp_compose,
    truncated_svd_factors,
    vec_factor,
)
from tomography.lib.errors import (
    ConfigError,
    DimensionMismatchError,
    NumericalAbortError,
)
from tomography.lib.phantom_io import rmse
from tomography.lib.radon_geometry import (
    Image,
    Sinogram,
    SinogramLike,
    SparseSystemTensor,
    back_project,
)

logger = logging.getLogger(__name__)

INIT_METHODS = ("backprojection", "provided", "random")

# Relative objective increase between full sweeps that flags a run.
DIVERGENCE_SLACK = 1e-6


# -------- Configuration --------
@dataclass(frozen=True)
class ElasticNetConfig:
    """Penalty weight rho >= 0 and L1/L2 mix lam in [1, 2] (1 = lasso, 2 = ridge)."""

    rho: float = 0.0
    lam: float = 2.0

    def __post_init__(self):
        if not (math.isfinite(self.rho) and self.rho >= 0):
            raise ConfigError(f"rho must be a finite non-negative number, got {self.rho}")
        if not (1.0 <= self.lam <= 2.0):
            raise ConfigError(f"lambda must lie in [1, 2], got {self.lam}")

    @property
    def ridge_weight(self) -> float:
        """Coefficient of ||w||_2^2 in the penalty."""
        return self.rho * (self.lam - 1.0) / 2.0

    @property
    def lasso_weight(self) -> float:
        """Coefficient of ||w||_1 in the penalty."""
        return self.rho * (2.0 - self.lam)


@dataclass(frozen=True)
class TRConfig:
    """Settings of one TR(R) run.

    init is one of "backprojection" (truncated SVD of L_(1)^T s),
    "provided" (init_factors) or "random" (seeded standard normal / sqrt(K)).
    """

    rank: int
    elastic_net: ElasticNetConfig = field(default_factory=ElasticNetConfig)
    max_iters: int = 100
    tol: float = 1e-4
    init: str = "backprojection"
    seed: int = 0
    init_factors: Optional[CPFactorPair] = None

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be at least 1, got {self.rank}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be at least 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if self.init not in INIT_METHODS:
            raise ConfigError(f"init must be one of {INIT_METHODS}, got {self.init!r}")
        if self.init == "provided" and self.init_factors is None:
            raise ConfigError("init='provided' needs init_factors")


@dataclass(frozen=True)
class LSQRConfig:
    max_iters: int = 200
    atol: float = 1e-8

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError(f"LSQR max_iters must be at least 1, got {self.max_iters}")
        if not self.atol >= 0:
            raise ConfigError(f"LSQR atol must be non-negative, got {self.atol}")


# -------- Results --------
@dataclass(frozen=True)
class ReconRecord:
    """One logged iterate. objective == datafit + penalty."""

    iteration: int
    objective: float
    datafit: float
    penalty: float
    rmse: Optional[float]
    seconds: float


class ObjectiveValue(NamedTuple):
    total: float
    datafit: float
    penalty: float


class TRResult(NamedTuple):
    factors: CPFactorPair
    image: Image
    records: List[ReconRecord]
    converged: bool
    diverged: bool


class LSQRResult(NamedTuple):
    x: np.ndarray
    records: List[ReconRecord]
    converged: bool


# -------- Objective --------
def elastic_net_penalty(w: np.ndarray, cfg: ElasticNetConfig) -> float:
    """P(w, rho) = rho * ((lam - 1) / 2 * ||w||_2^2 + (2 - lam) * ||w||_1)."""
    w = np.asarray(w, dtype=float).reshape(-1)
    if not np.all(np.isfinite(w)):
        raise NumericalAbortError("penalty argument contains non-finite values")
    if cfg.rho == 0.0:
        return 0.0
    return float(cfg.ridge_weight * np.dot(w, w) + cfg.lasso_weight * np.abs(w).sum())


def _values(s: SinogramLike) -> np.ndarray:
    return s.values if isinstance(s, Sinogram) else np.asarray(s, dtype=float).reshape(-1)


def objective(
    L: SparseSystemTensor, s: SinogramLike, f: CPFactorPair, cfg: ElasticNetConfig
) -> ObjectiveValue:
    """Regularized loss l(W1, W2) split into data fit and penalty."""
    values = _values(s)
    if f.grid_size != L.geometry.grid_size:
        raise DimensionMismatchError(
            f"factors have K={f.grid_size}, system tensor has K={L.geometry.grid_size}"
        )
    if values.size != L.geometry.num_rays:
        raise DimensionMismatchError(
            f"sinogram length {values.size} does not match {L.geometry.num_rays} rays"
        )
    image = cp_compose(f)
    predicted = L.unfolded @ image.ravel(order="F")
    if not (np.all(np.isfinite(image)) and np.all(np.isfinite(predicted))):
        raise NumericalAbortError("forward projection of the current factors overflowed")
    residual = predicted - values
    datafit = float(np.dot(residual, residual))
    penalty = sum(
        elastic_net_penalty(W[:, r], cfg) for W in (f.W1, f.W2) for r in range(f.rank)
    )
    if not math.isfinite(datafit + penalty):
        raise NumericalAbortError(f"objective is not finite (datafit={datafit}, penalty={penalty})")
    return ObjectiveValue(datafit + penalty, datafit, penalty)


# -------- Elastic-net subproblem --------
#
# Everything below works on the Gram form G = A^T A, c = A^T s and the halved
# gradient g(w) = c - G w - ridge * w. At the optimum g_j = threshold * sign(w_j)
# for w_j != 0 and |g_j| <= threshold for w_j == 0.


def _soft_threshold(z: float, threshold: float) -> float:
    # |z| == threshold maps to exactly zero
    if z > threshold:
        return z - threshold
    if z < -threshold:
        return z + threshold
    return 0.0


def _satisfies_kkt(gram, corr, ridge, threshold, w, kkt_tol) -> bool:
    gradient = corr - gram @ w - ridge * w
    active = w != 0.0
    if np.any(np.abs(gradient[active] - threshold * np.sign(w[active])) > kkt_tol):
        return False
    return not np.any(np.abs(gradient[~active]) > threshold + kkt_tol)


def _solve_spd(system: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve, falling back to least squares for singular systems."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(system), rhs)
    except np.linalg.LinAlgError:
        return scipy.linalg.lstsq(system, rhs)[0]


def _ridge_solve(A, s, gram, corr, ridge, kkt_tol) -> np.ndarray:
    """Minimizer when the penalty has no L1 part: (G + ridge I) w = c."""
    w = _solve_spd(gram + ridge * np.eye(gram.shape[0]), corr)
    if np.all(np.isfinite(w)) and _satisfies_kkt(gram, corr, ridge, 0.0, w, kkt_tol):
        return w
    # Ill-conditioned normal equations: solve the stacked least-squares system.
    n = A.shape[1]
    stacked = np.vstack([A, math.sqrt(ridge) * np.eye(n)]) if ridge > 0 else A
    rhs = np.concatenate([s, np.zeros(n)]) if ridge > 0 else s
    return scipy.linalg.lstsq(stacked, rhs)[0]


def _active_set_refinement(gram, corr, ridge, threshold, w, kkt_tol) -> Optional[np.ndarray]:
    """Solve the subproblem exactly on the current sign pattern.

    Returns the refined point only if it keeps the sign pattern and meets the
    KKT conditions; otherwise None and coordinate descent carries on.
    """
    active = np.flatnonzero(w)
    candidate = np.zeros_like(w)
    if active.size:
        signs = np.sign(w[active])
        system = gram[np.ix_(active, active)] + ridge * np.eye(active.size)
        solution = _solve_spd(system, corr[active] - threshold * signs)
        if not np.all(np.isfinite(solution)) or np.any(np.sign(solution) != signs):
            return None
        candidate[active] = solution
    if not _satisfies_kkt(gram, corr, ridge, threshold, candidate, kkt_tol):
        return None
    return candidate


def solve_elastic_net_ls(
    A: np.ndarray,
    s: np.ndarray,
    cfg: ElasticNetConfig,
    w_init: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    max_sweeps: int = 10_000,
) -> np.ndarray:
    """Minimize ||A w - s||^2 + P(w, rho) by cyclic coordinate descent.

    Each coordinate takes the soft-thresholded exact minimizer. After every
    sweep the sign pattern of the iterate is tried in an exact reduced solve,
    accepted only when it satisfies the KKT conditions. Without an L1 part
    (rho == 0 or lam == 2) the problem is a ridge/least-squares solve and is
    answered directly.

    Args:
        A: Design matrix (n_rays x n_unknowns)
        s: Right-hand side
        cfg: Elastic-net weights
        w_init: Starting point (zeros if omitted)
        tol: Stop when the largest coordinate change in a sweep is below this
        max_sweeps: Sweep cap

    Returns:
        The minimizer w
    """
    A = np.asarray(A, dtype=float)
    s = np.asarray(s, dtype=float).reshape(-1)
    if A.ndim != 2 or A.shape[0] != s.size:
        raise DimensionMismatchError(f"design matrix {A.shape} does not match rhs of length {s.size}")
    w = np.zeros(A.shape[1]) if w_init is None else np.array(w_init, dtype=float).reshape(-1)
    if w.size != A.shape[1]:
        raise DimensionMismatchError(
            f"w_init has {w.size} entries, design matrix has {A.shape[1]} columns"
        )
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(s)) and np.all(np.isfinite(w))):
        raise NumericalAbortError("elastic-net subproblem received non-finite input")

    gram = A.T @ A
    corr = A.T @ s
    ridge = cfg.ridge_weight
    # Coordinate j solves (G_jj + ridge) w_j = soft(z_j, threshold).
    threshold = cfg.lasso_weight / 2.0
    kkt_tol = 1e-9 * max(1.0, float(np.abs(corr).max(initial=0.0)))

    if threshold == 0.0:
        w = _ridge_solve(A, s, gram, corr, ridge, kkt_tol)
        if not np.all(np.isfinite(w)):
            raise NumericalAbortError("least-squares subproblem produced non-finite coefficients")
        return w

    diag = np.diag(gram) + ridge
    residual = corr - gram @ w
    for _ in range(max_sweeps):
        refined = _active_set_refinement(gram, corr, ridge, threshold, w, kkt_tol)
        if refined is not None:
            return refined

        max_change = 0.0
        for j in range(w.size):
            w_old = w[j]
            if diag[j] <= 0.0:
                w_new = 0.0
            else:
                z = residual[j] + gram[j, j] * w_old
                w_new = _soft_threshold(z, threshold) / diag[j]
            delta = w_new - w_old
            if delta != 0.0:
                residual -= delta * gram[:, j]
                w[j] = w_new
                max_change = max(max_change, abs(delta))
        if not np.all(np.isfinite(w)):
            raise NumericalAbortError("coordinate descent produced non-finite coefficients")
        if max_change < tol:
            return w

    logger.warning("Elastic-net coordinate descent hit %d sweeps without converging", max_sweeps)
    return w


# -------- TR(R) --------
def _initial_factors(L: SparseSystemTensor, values: np.ndarray, cfg: TRConfig) -> CPFactorPair:
    K = L.geometry.grid_size
    if cfg.init == "provided":
        f = cfg.init_factors
        if f.grid_size != K or f.rank != cfg.rank:
            raise DimensionMismatchError(
                f"provided factors are {f.W1.shape}, expected ({K}, {cfg.rank})"
            )
        return f
    if cfg.init == "random":
        rng = np.random.default_rng(cfg.seed)
        scale = 1.0 / math.sqrt(K)
        return CPFactorPair(
            rng.standard_normal((K, cfg.rank)) * scale,
            rng.standard_normal((K, cfg.rank)) * scale,
        )
    return truncated_svd_factors(back_project(L, values), cfg.rank)


def tr_reconstruct(
    L: SparseSystemTensor,
    s: SinogramLike,
    cfg: TRConfig,
    ground_truth: Optional[Image] = None,
) -> TRResult:
    """Alternating least squares for the rank-R elastic-net tensor regression.

    Stops when |l_k - l_{k-1}| < cfg.tol or after cfg.max_iters sweeps. Hitting
    the cap is reported through converged=False; a NaN objective aborts.

    Returns:
        TRResult(factors, image, records, converged, diverged); records[0] is
        the initial point (iteration 0)
    """
    values = _values(s)
    if values.size != L.geometry.num_rays:
        raise DimensionMismatchError(
            f"sinogram length {values.size} does not match {L.geometry.num_rays} rays"
        )
    if not np.all(np.isfinite(values)):
        raise NumericalAbortError("sinogram contains non-finite values")
    K = L.geometry.grid_size
    if ground_truth is not None and np.shape(ground_truth) != (K, K):
        raise DimensionMismatchError(f"ground truth shape {np.shape(ground_truth)} is not {K}x{K}")

    start = time.perf_counter()
    en = cfg.elastic_net
    factors = _initial_factors(L, values, cfg)

    def log(iteration: int, value: ObjectiveValue) -> ReconRecord:
        error = rmse(cp_compose(factors), ground_truth) if ground_truth is not None else None
        return ReconRecord(
            iteration=iteration,
            objective=value.total,
            datafit=value.datafit,
            penalty=value.penalty,
            rmse=error,
            seconds=time.perf_counter() - start,
        )

    previous = objective(L, values, factors, en)
    records = [log(0, previous)]
    converged = False
    diverged = False

    for k in range(1, cfg.max_iters + 1):
        for mode in (1, 2):
            design = assemble_design(L, factors.factor(3 - mode), mode)
            solved = solve_elastic_net_ls(design, values, en, vec_factor(factors.factor(mode)))
            factors = factors.replace(mode, solved)

        current = objective(L, values, factors, en)
        records.append(log(k, current))

        if current.total > previous.total + DIVERGENCE_SLACK * abs(previous.total):
            diverged = True
            logger.warning(
                "Objective increased at iteration %d: %.12g -> %.12g",
                k,
                previous.total,
                current.total,
            )
        if abs(current.total - previous.total) < cfg.tol:
            converged = True
            break
        previous = current

    if not converged:
        logger.warning("TR(%d) reached max_iters=%d without meeting tol=%g", cfg.rank, cfg.max_iters, cfg.tol)

    return TRResult(factors, cp_compose(factors), records, converged, diverged)


# -------- LSQR baseline --------
def lsqr_solve(
    A,
    s: np.ndarray,
    max_iters: int = 200,
    atol: float = 1e-8,
    btol: Optional[float] = None,
    x0: Optional[np.ndarray] = None,
    ground_truth: Optional[Image] = None,
) -> LSQRResult:
    """Paige-Saunders LSQR for min ||A x - s||_2.

    A warm start x0 is honoured by solving A d = s - A x0 from zero and
    returning x0 + d. Each record's datafit is the recurrence estimate of
    ||A x - s||^2, which is non-increasing.

    Args:
        A: ndarray, sparse matrix or LinearOperator with matvec and rmatvec
        s: Right-hand side
        max_iters: Iteration cap
        atol, btol: Stopping tolerances (btol defaults to atol)
        x0: Optional starting point
        ground_truth: K x K image; when given, records carry RMSE of the
            column-major reshaped iterate

    Returns:
        LSQRResult(x, records, converged)
    """
    op = aslinearoperator(A)
    m, n = op.shape
    b = np.asarray(s, dtype=float).reshape(-1)
    if b.size != m:
        raise DimensionMismatchError(f"operator has {m} rows, rhs has {b.size} entries")
    if max_iters < 1:
        raise ConfigError(f"max_iters must be at least 1, got {max_iters}")
    btol = atol if btol is None else btol
    offset = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    if offset.size != n:
        raise DimensionMismatchError(f"x0 has {offset.size} entries, operator has {n} columns")
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(offset))):
        raise NumericalAbortError("LSQR received non-finite input")

    shape = None
    if ground_truth is not None:
        ground_truth = np.asarray(ground_truth, dtype=float)
        if ground_truth.size != n:
            raise DimensionMismatchError(
                f"ground truth has {ground_truth.size} pixels, operator has {n} columns"
            )
        shape = ground_truth.shape

    start = time.perf_counter()
    records: List[ReconRecord] = []

    def log(iteration: int, rnorm: float, x: np.ndarray) -> None:
        error = None
        if shape is not None:
            error = rmse(x.reshape(shape, order="F"), ground_truth)
        fit = rnorm * rnorm
        records.append(ReconRecord(iteration, fit, fit, 0.0, error, time.perf_counter() - start))

    x = np.zeros(n)
    u = b - op.matvec(offset) if x0 is not None else b.copy()
    beta = float(np.linalg.norm(u))
    v = np.zeros(n)
    alfa = 0.0
    if beta > 0:
        u = u / beta
        v = op.rmatvec(u)
        alfa = float(np.linalg.norm(v))
    if alfa > 0:
        v = v / alfa
    log(0, beta, offset)
    if beta == 0.0 or alfa == 0.0:
        # Already a least-squares solution.
        return LSQRResult(offset.copy(), records, True)

    w = v.copy()
    rhobar, phibar = alfa, beta
    bnorm = beta
    anorm = 0.0
    converged = False

    for itn in range(1, max_iters + 1):
        # Golub-Kahan bidiagonalization step
        u = op.matvec(v) - alfa * u
        beta = float(np.linalg.norm(u))
        if beta > 0:
            u = u / beta
            anorm = math.sqrt(anorm**2 + alfa**2 + beta**2)
            v = op.rmatvec(u) - beta * v
            alfa = float(np.linalg.norm(v))
            if alfa > 0:
                v = v / alfa

        # Plane rotation eliminating the subdiagonal beta
        rho = math.hypot(rhobar, beta)
        cs, sn = rhobar / rho, beta / rho
        theta = sn * alfa
        rhobar = -cs * alfa
        phi = cs * phibar
        phibar = sn * phibar

        x = x + (phi / rho) * w
        w = v - (theta / rho) * w

        rnorm = abs(phibar)
        if not (math.isfinite(rnorm) and np.all(np.isfinite(x))):
            raise NumericalAbortError(f"LSQR broke down at iteration {itn}")
        log(itn, rnorm, offset + x)

        arnorm = alfa * abs(sn * phi)
        xnorm = float(np.linalg.norm(x))
        test1 = rnorm / bnorm
        test2 = arnorm / (anorm * rnorm) if anorm * rnorm > 0 else 0.0
        rtol = btol + atol * anorm * xnorm / bnorm
        if beta == 0.0 or alfa == 0.0 or test1 <= rtol or test2 <= atol:
            converged = True
            break

    if not converged:
        logger.info("LSQR stopped at the iteration cap (%d)", max_iters)
    return LSQRResult(offset + x, records, converged)
