"""Point estimators, sandwich covariance, and confidence intervals.

The engine solves the debiased score equation

    S(theta) = (1/n_l) sum_L [grad_l(x, y) - M grad_l(x, yhat)]
             + (1/n_u) sum_U  M grad_l(x, yhat)  =  0,

where M ranges over a weighting family: M = 0 recovers the classical
(labeled-only) estimator, M = I the prediction-powered estimator, a tuned
scalar lambda * I the power-tuned variant, and a tuned diagonal the
per-coordinate adaptive variant. Under uniform labeling this score is,
up to a known constant on the augmentation term, an augmented
inverse-probability-weighted estimating equation with a constant
propensity; see ``aipw_score``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
from scipy.stats import norm

from .data_model import Dataset
from .errors import (
    DegenerateVarianceWarning,
    InsufficientDataError,
    RankError,
    UnavailableError,
    ValidationError,
)
from .targets import (
    ScoreGroup,
    SolverControls,
    TargetSpec,
    design_matrix,
    hessian_sum,
    scores_batch,
    solve_score_groups,
)

METHODS = ("naive", "classical", "oracle", "ppi", "ppi_plus_plus", "pspa", "unified")

WEIGHTING_FAMILIES = ("zero", "identity", "scaled_identity", "diagonal", "fixed")

# Relative eigenvalue floor for inverting the mean labeled Hessian.
HESSIAN_FLOOR = 1e-12


@dataclass(frozen=True)
class WeightingSpec:
    """Weighting-matrix family for the debiased score.

    ``zero`` and ``identity`` are fixed; ``scaled_identity`` and
    ``diagonal`` request tuning (power-tuned scalar / per-coordinate
    weights); ``fixed`` carries an explicit dim x dim matrix. ``clamp``
    restricts tuned entries to [0, 1].
    """

    family: str = "identity"
    clamp: bool = True
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in WEIGHTING_FAMILIES:
            raise ValidationError(f"unknown weighting family {self.family!r}")
        if self.family == "fixed":
            if self.matrix is None:
                raise ValidationError("fixed weighting requires a matrix")
            m = np.asarray(self.matrix, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValidationError("fixed weighting matrix must be square")
            object.__setattr__(self, "matrix", m)

    @classmethod
    def zero(cls) -> "WeightingSpec":
        return cls(family="zero")

    @classmethod
    def identity(cls) -> "WeightingSpec":
        return cls(family="identity")

    @classmethod
    def fixed(cls, matrix: np.ndarray) -> "WeightingSpec":
        return cls(family="fixed", matrix=np.asarray(matrix, dtype=float))


@dataclass(frozen=True)
class EstimatorConfig:
    method: str = "ppi"
    weighting: WeightingSpec = WeightingSpec()
    ci_level: float = 0.95
    solver: SolverControls = SolverControls()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.ci_level < 1.0:
            raise ValidationError("ci_level must be in (0, 1)")


@dataclass(frozen=True)
class EstimateResult:
    """Point estimate with sandwich covariance and normal-quantile CIs."""

    theta_hat: np.ndarray
    covariance: np.ndarray
    std_errors: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    ci_level: float
    estimator_name: str
    tuning: float | np.ndarray | None = None
    converged: bool = True
    iterations: int = 0
    degenerate_ci: bool = False
    notice: str | None = None

    def to_json_dict(self) -> dict:
        tuning = self.tuning
        if isinstance(tuning, np.ndarray):
            tuning = tuning.tolist()
        return {
            "estimator_name": self.estimator_name,
            "theta_hat": self.theta_hat.tolist(),
            "covariance": self.covariance.tolist(),
            "std_errors": self.std_errors.tolist(),
            "ci_lower": self.ci_lower.tolist(),
            "ci_upper": self.ci_upper.tolist(),
            "ci_level": self.ci_level,
            "tuning": tuning,
            "converged": self.converged,
            "iterations": self.iterations,
            "degenerate_ci": self.degenerate_ci,
            "notice": self.notice,
        }


def _check_psd(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals.min() < -1e-8 * max(1.0, abs(eigvals).max()):
        raise RankError("covariance is not positive semidefinite")
    return cov


def _result(name, theta, cov, level, tuning=None, iterations=0, notice=None) -> EstimateResult:
    cov = _check_psd(cov)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    z = norm.ppf(0.5 + level / 2.0)
    return EstimateResult(
        theta_hat=theta,
        covariance=cov,
        std_errors=se,
        ci_lower=theta - z * se,
        ci_upper=theta + z * se,
        ci_level=level,
        estimator_name=name,
        tuning=tuning,
        converged=True,
        iterations=iterations,
        degenerate_ci=bool(np.any(se == 0.0)),
        notice=notice,
    )


def confidence_interval(r: EstimateResult, level: float) -> EstimateResult:
    """Recompute normal-quantile CIs at a new level."""
    if not 0.0 < level < 1.0:
        raise ValidationError("level must be in (0, 1)")
    z = norm.ppf(0.5 + level / 2.0)
    return replace(
        r,
        ci_lower=r.theta_hat - z * r.std_errors,
        ci_upper=r.theta_hat + z * r.std_errors,
        ci_level=level,
        degenerate_ci=bool(np.any(r.std_errors == 0.0)),
    )


def _labeled_design(d: Dataset, t: TargetSpec) -> np.ndarray:
    return design_matrix(t, d.x_labeled)


def _unlabeled_design(d: Dataset, t: TargetSpec) -> np.ndarray:
    if t.kind == "mean":
        return np.ones((d.n_u, 1))
    return design_matrix(t, d.x_unlabeled)


def _psd_inverse(h: np.ndarray) -> np.ndarray:
    """Invert a symmetric PSD matrix via eigendecomposition with a relative floor."""
    h = 0.5 * (h + h.T)
    vals, vecs = np.linalg.eigh(h)
    floor = HESSIAN_FLOOR * np.trace(h) / h.shape[0]
    if np.any(vals <= floor):
        raise RankError(
            f"Hessian has eigenvalue {vals.min():.3e} below floor {floor:.3e}; design is rank-deficient"
        )
    return (vecs / vals) @ vecs.T


def _cov(rows: np.ndarray) -> np.ndarray:
    """Empirical covariance (ddof=1) of row vectors, shape (dim, dim)."""
    n = rows.shape[0]
    if n < 2:
        raise InsufficientDataError("need at least 2 rows for a covariance estimate")
    centered = rows - rows.mean(axis=0)
    return centered.T @ centered / (n - 1)


def _cross_cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    if n < 2:
        raise InsufficientDataError("need at least 2 rows for a covariance estimate")
    return (a - a.mean(axis=0)).T @ (b - b.mean(axis=0)) / (n - 1)


def _apply_m(m, rows: np.ndarray) -> np.ndarray:
    """Row-wise M @ score for scalar, diagonal, or full M."""
    if m is None:
        return rows
    if np.isscalar(m):
        return m * rows
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        return rows * m[None, :]
    return rows @ m.T

def _m_matrix(m, dim: int) -> np.ndarray:
    if m is None:
        return np.eye(dim)
    if np.isscalar(m):
        return float(m) * np.eye(dim)
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        return np.diag(m)
    return m


def _m_is_zero(m) -> bool:
    if m is None:
        return False
    return not np.any(np.asarray(m, dtype=float))


def _resolve_m(weighting: WeightingSpec, dim: int):
    if weighting.family == "zero":
        return 0.0
    if weighting.family == "identity":
        return 1.0
    if weighting.family == "fixed":
        if weighting.matrix.shape != (dim, dim):
            raise ValidationError(f"fixed weighting matrix must be {dim}x{dim}")
        return weighting.matrix
    raise ValidationError(
        f"weighting family {weighting.family!r} requires tuning; call estimate_ppi_pp or estimate_pspa"
    )


def sandwich_covariance(d: Dataset, t: TargetSpec, theta_hat: np.ndarray, m) -> np.ndarray:
    """Covariance of the debiased estimator at theta_hat with fixed M.

    H^-1 [ V_L / n_l + M V_fU M^T / n_u ] H^-1 where V_L is the labeled
    covariance of (score on y - M score on yhat), V_fU the unlabeled
    covariance of scores on yhat, and H the mean labeled Hessian at the
    true outcomes. Symmetrized before return.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    xl = _labeled_design(d, t)
    a = scores_batch(t, theta_hat, xl, d.y_labeled)
    h = hessian_sum(t, theta_hat, xl) / d.n_l
    h_inv = _psd_inverse(h)
    if _m_is_zero(m) or d.n_u == 0:
        v_l = _cov(a)
        meat = v_l / d.n_l
    else:
        b = scores_batch(t, theta_hat, xl, d.yhat_labeled)
        v_l = _cov(a - _apply_m(m, b))
        xu = _unlabeled_design(d, t)
        u = scores_batch(t, theta_hat, xu, d.yhat_unlabeled)
        m_mat = _m_matrix(m, t.dim)
        meat = v_l / d.n_l + m_mat @ _cov(u) @ m_mat.T / d.n_u
    cov = h_inv @ meat @ h_inv
    return 0.5 * (cov + cov.T)


def _solve_unified(d: Dataset, t: TargetSpec, m, controls: SolverControls):
    xl = _labeled_design(d, t)
    groups = [ScoreGroup(xl, d.y_labeled, np.full(d.n_l, 1.0 / d.n_l))]
    if not _m_is_zero(m) and d.n_u > 0:
        xu = _unlabeled_design(d, t)
        groups.append(ScoreGroup(xl, d.yhat_labeled, np.full(d.n_l, -1.0 / d.n_l), m))
        groups.append(ScoreGroup(xu, d.yhat_unlabeled, np.full(d.n_u, 1.0 / d.n_u), m))
    return solve_score_groups(t, groups, controls)


def _check_fit_preconditions(d: Dataset, t: TargetSpec, n_rows: int):
    if t.kind != "mean" and t.p_x != d.p_x:
        raise ValidationError(f"target expects {t.p_x} covariates, dataset has {d.p_x}")
    if n_rows < t.dim:
        raise InsufficientDataError(f"{n_rows} rows < target dim {t.dim}")
    if n_rows < 2:
        raise InsufficientDataError("need at least 2 rows for variance estimation")


def estimate_classical(d: Dataset, t: TargetSpec, cfg: EstimatorConfig | None = None) -> EstimateResult:
    """Labeled-rows-only fit; valid under uniform labeling but ignores predictions."""
    cfg = cfg or EstimatorConfig(method="classical", weighting=WeightingSpec.zero())
    _check_fit_preconditions(d, t, d.n_l)
    theta, iters = _solve_unified(d, t, 0.0, cfg.solver)
    cov = sandwich_covariance(d, t, theta, 0.0)
    return _result("classical", theta, cov, cfg.ci_level, iterations=iters)


def estimate_unified(d: Dataset, t: TargetSpec, cfg: EstimatorConfig) -> EstimateResult:
    """Debiased estimator with the fixed weighting M from cfg.weighting."""
    _check_fit_preconditions(d, t, d.n_l)
    m = _resolve_m(cfg.weighting, t.dim)
    if d.n_u == 0 and not _m_is_zero(m):
        raise ValidationError("with no unlabeled rows only the zero weighting is admissible")
    theta, iters = _solve_unified(d, t, m, cfg.solver)
    cov = sandwich_covariance(d, t, theta, m)
    name = "classical" if _m_is_zero(m) else "unified"
    return _result(name, theta, cov, cfg.ci_level, iterations=iters)


def estimate_ppi(d: Dataset, t: TargetSpec, cfg: EstimatorConfig | None = None) -> EstimateResult:
    """Debiased estimator with M = I (full weight on the imputed score)."""
    cfg = cfg or EstimatorConfig(method="ppi")
    _check_fit_preconditions(d, t, d.n_l)
    if d.n_u == 0:
        return replace(
            estimate_classical(d, t, cfg),
            estimator_name="ppi",
            notice="no unlabeled rows; returned the classical estimate",
        )
    theta, iters = _solve_unified(d, t, 1.0, cfg.solver)
    cov = sandwich_covariance(d, t, theta, 1.0)
    return _result("ppi", theta, cov, cfg.ci_level, iterations=iters)


def _tuning_pieces(d: Dataset, t: TargetSpec, theta_pilot: np.ndarray):
    xl = _labeled_design(d, t)
    a = scores_batch(t, theta_pilot, xl, d.y_labeled)
    b = scores_batch(t, theta_pilot, xl, d.yhat_labeled)
    h_inv = _psd_inverse(hessian_sum(t, theta_pilot, xl) / d.n_l)
    c = _cross_cov(a, b)
    v_f = _cov(b)
    return h_inv, c, v_f


def tune_lambda(d: Dataset, t: TargetSpec, theta_pilot: np.ndarray, clamp: bool = True) -> float:
    """Variance-minimizing scalar weight for M = lambda * I.

    Minimizes the trace of the asymptotic covariance in lambda, using
    labeled-row estimates of the score cross-covariance and the imputed
    score covariance at the pilot estimate. Clamped to [0, 1] by default.
    """
    if d.n_l < 2 or d.n_u < 1:
        raise InsufficientDataError("tuning needs n_l >= 2 and n_u >= 1")
    theta_pilot = np.asarray(theta_pilot, dtype=float)
    h_inv, c, v_f = _tuning_pieces(d, t, theta_pilot)
    num = np.trace(h_inv @ (c + c.T) @ h_inv)
    den = 2.0 * (1.0 + d.n_l / d.n_u) * np.trace(h_inv @ v_f @ h_inv)
    if den == 0.0:
        warnings.warn("imputed-score variance is zero; lambda set to 0", DegenerateVarianceWarning)
        return 0.0
    lam = float(num / den)
    if clamp:
        lam = min(1.0, max(0.0, lam))
    return lam


def tune_omega(d: Dataset, t: TargetSpec, theta_pilot: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Per-coordinate weights for M = diag(omega), applied on the raw score.

    Coordinate-wise version of ``tune_lambda``; equals it exactly for
    scalar targets. Coordinates with a zero denominator fall back to 0
    with a warning.
    """
    if d.n_l < 2 or d.n_u < 1:
        raise InsufficientDataError("tuning needs n_l >= 2 and n_u >= 1")
    theta_pilot = np.asarray(theta_pilot, dtype=float)
    h_inv, c, v_f = _tuning_pieces(d, t, theta_pilot)
    num = np.diag(h_inv @ (c + c.T) @ h_inv)
    den = 2.0 * (1.0 + d.n_l / d.n_u) * np.diag(h_inv @ v_f @ h_inv)
    omega = np.zeros(t.dim)
    zero = den == 0.0
    if np.any(zero):
        warnings.warn(
            f"imputed-score variance is zero on coordinates {np.where(zero)[0].tolist()}; weights set to 0",
            DegenerateVarianceWarning,
        )
    omega[~zero] = num[~zero] / den[~zero]
    if clamp:
        omega = np.clip(omega, 0.0, 1.0)
    return omega


def estimate_ppi_pp(
    d: Dataset,
    t: TargetSpec,
    cfg: EstimatorConfig | None = None,
    fixed_lambda: float | None = None,
) -> EstimateResult:
    """Power-tuned estimator: classical pilot, tuned scalar weight, one refit.

    ``fixed_lambda`` bypasses tuning (used by the reduction identities).
    """
    cfg = cfg or EstimatorConfig(method="ppi_plus_plus", weighting=WeightingSpec(family="scaled_identity"))
    _check_fit_preconditions(d, t, d.n_l)
    if d.n_u == 0:
        return replace(
            estimate_classical(d, t, cfg),
            estimator_name="ppi_plus_plus",
            tuning=0.0,
            notice="no unlabeled rows; returned the classical estimate",
        )
    pilot = estimate_classical(d, t, cfg)
    lam = fixed_lambda if fixed_lambda is not None else tune_lambda(d, t, pilot.theta_hat, clamp=cfg.weighting.clamp)
    theta, iters = _solve_unified(d, t, float(lam), cfg.solver)
    cov = sandwich_covariance(d, t, theta, float(lam))
    return _result("ppi_plus_plus", theta, cov, cfg.ci_level, tuning=float(lam), iterations=iters)


def estimate_pspa(
    d: Dataset,
    t: TargetSpec,
    cfg: EstimatorConfig | None = None,
    fixed_omega: np.ndarray | None = None,
) -> EstimateResult:
    """Per-coordinate-tuned estimator: classical pilot, diagonal weight, one refit."""
    cfg = cfg or EstimatorConfig(method="pspa", weighting=WeightingSpec(family="diagonal"))
    _check_fit_preconditions(d, t, d.n_l)
    if d.n_u == 0:
        return replace(
            estimate_classical(d, t, cfg),
            estimator_name="pspa",
            tuning=np.zeros(t.dim),
            notice="no unlabeled rows; returned the classical estimate",
        )
    pilot = estimate_classical(d, t, cfg)
    if fixed_omega is not None:
        omega = np.asarray(fixed_omega, dtype=float) * np.ones(t.dim)
    else:
        omega = tune_omega(d, t, pilot.theta_hat, clamp=cfg.weighting.clamp)
    theta, iters = _solve_unified(d, t, omega, cfg.solver)
    cov = sandwich_covariance(d, t, theta, omega)
    return _result("pspa", theta, cov, cfg.ci_level, tuning=omega, iterations=iters)


def _plain_sandwich(design: np.ndarray, y: np.ndarray, t: TargetSpec, theta: np.ndarray) -> np.ndarray:
    n = design.shape[0]
    h_inv = _psd_inverse(hessian_sum(t, theta, design) / n)
    v = _cov(scores_batch(t, theta, design, y))
    cov = h_inv @ v @ h_inv / n
    return 0.5 * (cov + cov.T)


def estimate_naive(d: Dataset, t: TargetSpec, cfg: EstimatorConfig | None = None) -> EstimateResult:
    """Treats predictions as observed outcomes on all rows.

    Targets the prediction-law functional, not the true estimand; kept for
    comparison and bias decomposition, not for inference.
    """
    cfg = cfg or EstimatorConfig(method="naive")
    _check_fit_preconditions(d, t, d.n)
    xl = _labeled_design(d, t)
    if d.n_u > 0:
        xu = _unlabeled_design(d, t)
        design = np.vstack([xl, xu])
        y = np.concatenate([d.yhat_labeled, d.yhat_unlabeled])
    else:
        design, y = xl, d.yhat_labeled
    theta, iters = solve_score_groups(
        t, [ScoreGroup(design, y, np.full(d.n, 1.0 / d.n))], cfg.solver
    )
    cov = _plain_sandwich(design, y, t, theta)
    return _result("naive", theta, cov, cfg.ci_level, iterations=iters)


def estimate_oracle(d: Dataset, t: TargetSpec, cfg: EstimatorConfig | None = None) -> EstimateResult:
    """Hypothetical fit on true outcomes for all rows (simulation benchmark)."""
    cfg = cfg or EstimatorConfig(method="oracle")
    if d.n_u > 0 and d.y_unlabeled_true is None:
        raise UnavailableError("oracle estimator requires true outcomes on unlabeled rows")
    _check_fit_preconditions(d, t, d.n)
    xl = _labeled_design(d, t)
    if d.n_u > 0:
        xu = _unlabeled_design(d, t)
        design = np.vstack([xl, xu])
        y = np.concatenate([d.y_labeled, d.y_unlabeled_true])
    else:
        design, y = xl, d.y_labeled
    theta, iters = solve_score_groups(
        t, [ScoreGroup(design, y, np.full(d.n, 1.0 / d.n))], cfg.solver
    )
    cov = _plain_sandwich(design, y, t, theta)
    return _result("oracle", theta, cov, cfg.ci_level, iterations=iters)


_DISPATCH = {
    "naive": estimate_naive,
    "classical": estimate_classical,
    "oracle": estimate_oracle,
    "ppi": estimate_ppi,
    "ppi_plus_plus": estimate_ppi_pp,
    "pspa": estimate_pspa,
    "unified": estimate_unified,
}


def estimate(d: Dataset, t: TargetSpec, cfg: EstimatorConfig) -> EstimateResult:
    """Dispatch on cfg.method."""
    return _DISPATCH[cfg.method](d, t, cfg)


def unified_score(d: Dataset, t: TargetSpec, theta: np.ndarray, m) -> np.ndarray:
    """Evaluate the debiased score S(theta) with fixed M (diagnostic helper)."""
    theta = np.asarray(theta, dtype=float)
    xl = _labeled_design(d, t)
    s = scores_batch(t, theta, xl, d.y_labeled).mean(axis=0)
    if not _m_is_zero(m) and d.n_u > 0:
        xu = _unlabeled_design(d, t)
        s = s - _apply_m(m, scores_batch(t, theta, xl, d.yhat_labeled)).mean(axis=0)
        s = s + _apply_m(m, scores_batch(t, theta, xu, d.yhat_unlabeled)).mean(axis=0)
    return s


def aipw_score(d: Dataset, t: TargetSpec, theta: np.ndarray, psi_scale: float = 1.0) -> np.ndarray:
    """(1/n) x the augmented IPW estimating equation with constant propensity.

    Evaluates (1/n) sum_i [ (D_i / pi) U(x_i, y_i)
                            - ((D_i - pi) / pi) * psi_scale * U(x_i, yhat_i) ]
    with pi = n_l / n and D the label indicator. Algebraically this equals
    ``unified_score`` with M = (n_u / n) * psi_scale * I; the identity is
    exercised in the test suite.
    """
    theta = np.asarray(theta, dtype=float)
    pi = d.n_l / d.n
    xl = _labeled_design(d, t)
    u_l = scores_batch(t, theta, xl, d.y_labeled)
    psi_l = scores_batch(t, theta, xl, d.yhat_labeled)
    total = u_l.sum(axis=0) / pi - ((1.0 - pi) / pi) * psi_scale * psi_l.sum(axis=0)
    if d.n_u > 0:
        xu = _unlabeled_design(d, t)
        psi_u = scores_batch(t, theta, xu, d.yhat_unlabeled)
        total = total + psi_scale * psi_u.sum(axis=0)
    return total / d.n
