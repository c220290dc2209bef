"""Pre-analysis checks comparing true outcomes against predictions.

Calibration summaries and side-by-side refits on the labeled subset,
rank-based classification metrics for categorical surrogates, a feature
leakage probe, and the two-part bias decomposition used by the Monte
Carlo harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import CategoricalDataset, Dataset
from .errors import DegenerateError, InsufficientDataError, UnavailableError, ValidationError
from .estimators import EstimatorConfig, estimate_classical
from .targets import SolverControls, TargetSpec

MIN_SUBGROUP_ROWS = 10


@dataclass(frozen=True)
class CalibrationStats:
    group: str | None
    n_l: int
    mean_error: float
    mse: float
    correlation: float | None
    calib_intercept: float | None
    calib_slope: float | None
    estimated: bool = True


@dataclass(frozen=True)
class CalibrationReport:
    overall: CalibrationStats
    subgroup_rows: tuple[CalibrationStats, ...] | None = None

    # convenience pass-throughs for the common fields
    @property
    def mean_error(self) -> float:
        return self.overall.mean_error

    @property
    def mse(self) -> float:
        return self.overall.mse

    @property
    def correlation(self) -> float | None:
        return self.overall.correlation

    @property
    def calib_intercept(self) -> float | None:
        return self.overall.calib_intercept

    @property
    def calib_slope(self) -> float | None:
        return self.overall.calib_slope

    def to_json_dict(self) -> dict:
        def row(s: CalibrationStats) -> dict:
            return {
                "group": s.group, "n_l": s.n_l, "mean_error": s.mean_error, "mse": s.mse,
                "correlation": s.correlation, "calib_intercept": s.calib_intercept,
                "calib_slope": s.calib_slope, "estimated": s.estimated,
            }
        return {
            "overall": row(self.overall),
            "subgroups": None if self.subgroup_rows is None else [row(s) for s in self.subgroup_rows],
        }


def _calibration_stats(y: np.ndarray, yhat: np.ndarray, group=None, estimated=True) -> CalibrationStats:
    err = yhat - y
    mean_error = float(err.mean())
    mse = float((err**2).mean())
    var_yhat = float(((yhat - yhat.mean()) ** 2).mean())
    var_y = float(((y - y.mean()) ** 2).mean())
    if var_yhat == 0.0:
        slope = intercept = correlation = None
    else:
        cov = float(((y - y.mean()) * (yhat - yhat.mean())).mean())
        slope = cov / var_yhat
        intercept = float(y.mean() - slope * yhat.mean())
        correlation = None if var_y == 0.0 else cov / np.sqrt(var_y * var_yhat)
    return CalibrationStats(
        group=group, n_l=y.shape[0], mean_error=mean_error, mse=mse,
        correlation=correlation, calib_intercept=intercept, calib_slope=slope,
        estimated=estimated,
    )


def calibration_summary(d: Dataset, groups=None) -> CalibrationReport:
    """Compare true outcomes against predictions on the labeled rows.

    The calibration regression is of y on yhat, i.e. "what does one unit
    of prediction mean in outcome units". Perfect predictions give
    mean_error 0, mse 0, slope 1, intercept 0. ``groups`` is an optional
    per-labeled-row categorical array; subgroups with fewer than
    MIN_SUBGROUP_ROWS labeled rows are flagged, not estimated.
    """
    if d.n_l < 2:
        raise InsufficientDataError("calibration needs at least 2 labeled rows")
    overall = _calibration_stats(d.y_labeled, d.yhat_labeled)
    sub = None
    if groups is not None:
        groups = np.asarray(groups)
        if groups.shape[0] != d.n_l:
            raise ValidationError("groups must align with the labeled rows")
        rows = []
        for g in sorted(set(groups.tolist())):
            mask = groups == g
            k = int(mask.sum())
            if k < MIN_SUBGROUP_ROWS:
                rows.append(CalibrationStats(
                    group=str(g), n_l=k, mean_error=float("nan"), mse=float("nan"),
                    correlation=None, calib_intercept=None, calib_slope=None, estimated=False,
                ))
            else:
                rows.append(_calibration_stats(d.y_labeled[mask], d.yhat_labeled[mask], group=str(g)))
        sub = tuple(rows)
    return CalibrationReport(overall=overall, subgroup_rows=sub)


@dataclass(frozen=True)
class SideBySideReport:
    """Coefficients from fitting the target on (x, y) and on (x, yhat)."""

    theta_true_outcome: np.ndarray
    theta_predicted_outcome: np.ndarray
    deltas: np.ndarray
    se_true_outcome: np.ndarray
    se_predicted_outcome: np.ndarray
    sign_flips: np.ndarray
    distortion_flag: bool

    def to_json_dict(self) -> dict:
        return {
            "theta_true_outcome": self.theta_true_outcome.tolist(),
            "theta_predicted_outcome": self.theta_predicted_outcome.tolist(),
            "deltas": self.deltas.tolist(),
            "se_true_outcome": self.se_true_outcome.tolist(),
            "se_predicted_outcome": self.se_predicted_outcome.tolist(),
            "sign_flips": self.sign_flips.tolist(),
            "distortion_flag": self.distortion_flag,
        }


def _sign_category(theta: np.ndarray, se: np.ndarray) -> np.ndarray:
    # coefficients within 2 SE of zero count as sign 0
    cat = np.zeros(theta.shape[0], dtype=int)
    cat[theta > 2.0 * se] = 1
    cat[theta < -2.0 * se] = -1
    return cat


def side_by_side(d: Dataset, t: TargetSpec, controls: SolverControls | None = None) -> SideBySideReport:
    """Fit the target twice on labeled rows, once with y and once with yhat.

    A coefficient whose sign category (at 2 SE) changes between the two
    fits marks structural distortion: the prediction rule reshaped the
    outcome-covariate relationship, not just its noise level.
    """
    cfg = EstimatorConfig(method="classical", solver=controls or SolverControls())
    fit_true = estimate_classical(d, t, cfg)
    fit_pred = estimate_classical(d.with_labeled_outcome(d.yhat_labeled), t, cfg)
    cat_true = _sign_category(fit_true.theta_hat, fit_true.std_errors)
    cat_pred = _sign_category(fit_pred.theta_hat, fit_pred.std_errors)
    flips = (cat_true != cat_pred) & ((cat_true != 0) | (cat_pred != 0))
    return SideBySideReport(
        theta_true_outcome=fit_true.theta_hat,
        theta_predicted_outcome=fit_pred.theta_hat,
        deltas=fit_pred.theta_hat - fit_true.theta_hat,
        se_true_outcome=fit_true.std_errors,
        se_predicted_outcome=fit_pred.std_errors,
        sign_flips=flips,
        distortion_flag=bool(flips.any()),
    )


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Mann-Whitney AUC with mid-rank tie handling; None if one class absent."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0])
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    auc: float | None


def classification_metrics(cd: CategoricalDataset) -> dict:
    """One-vs-rest accuracy and rank AUC per class, on labeled rows only."""
    mask = cd.labeled_mask
    if mask.sum() < 2:
        raise InsufficientDataError("classification metrics need at least 2 labeled rows")
    truth = np.array([g for g in cd.group if g is not None])
    pred = np.array([gh for g, gh in zip(cd.group, cd.group_hat) if g is not None])
    out = {}
    for cls in cd.categories:
        t_bin = truth == cls
        p_bin = (pred == cls).astype(float)
        accuracy = float((t_bin == (p_bin > 0.5)).mean())
        out[cls] = ClassMetrics(accuracy=accuracy, auc=rank_auc(p_bin, t_bin))
    return out


def estimate_leakage(d: Dataset, feature_index: int) -> float:
    """Covariance between a probe feature and the non-probe part of the rule.

    Removes the in-sample linear effect of feature j from the predictions,
    projects the remainder onto the other features, and reports its
    covariance with feature j. Exactly zero when the predictions are an
    exact affine function of feature j; grows when the rule carries
    feature-j signal through the remaining features. ``feature_index`` is
    a 0-based column of z.
    """
    if d.p_z == 0:
        raise ValidationError("dataset carries no prediction features")
    if not 0 <= feature_index < d.p_z:
        raise ValidationError(f"feature_index {feature_index} out of range for p_z={d.p_z}")
    zj = d.z_labeled[:, feature_index]
    yhat = d.yhat_labeled
    n = d.n_l
    if n < 3:
        raise InsufficientDataError("leakage probe needs at least 3 labeled rows")
    var_zj = float(((zj - zj.mean()) ** 2).sum() / (n - 1))
    if var_zj == 0.0:
        raise DegenerateError(f"feature {feature_index} is constant on the labeled rows")

    zc = zj - zj.mean()
    a1 = float((zc * (yhat - yhat.mean())).sum() / (zc**2).sum())
    resid = yhat - yhat.mean() - a1 * zc

    others = np.delete(d.z_labeled, feature_index, axis=1)
    if others.shape[1] == 0:
        return 0.0
    design = np.hstack([np.ones((n, 1)), others])
    coef, *_ = np.linalg.lstsq(design, resid, rcond=None)
    g_hat = design @ coef

    ell = float(((zc) * (g_hat - g_hat.mean())).sum() / (n - 1))
    var_g = float(((g_hat - g_hat.mean()) ** 2).sum() / (n - 1))
    bound = np.sqrt(var_zj * var_g)
    assert abs(ell) <= bound + 1e-12, "Cauchy-Schwarz bound violated"
    return ell


@dataclass(frozen=True)
class BiasDecomposition:
    total: np.ndarray
    estimation_bias: np.ndarray
    estimator_bias: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "total": self.total.tolist(),
            "estimation_bias": self.estimation_bias.tolist(),
            "estimator_bias": self.estimator_bias.tolist(),
        }


def bias_decomposition_report(mc_mean_naive, eta, theta_true) -> BiasDecomposition:
    """Split E[eta_hat - theta] into estimation and estimand components.

    ``eta`` is the naive population target (analytic for attenuated linear
    rules, Monte Carlo approximated otherwise); the identity
    total = estimation_bias + estimator_bias holds exactly by construction.
    """
    if eta is None:
        raise UnavailableError("naive population target eta is not available for this rule")
    mc_mean_naive = np.atleast_1d(np.asarray(mc_mean_naive, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    theta_true = np.atleast_1d(np.asarray(theta_true, dtype=float))
    total = mc_mean_naive - theta_true
    estimator_bias = eta - theta_true
    return BiasDecomposition(
        total=total,
        estimation_bias=total - estimator_bias,
        estimator_bias=estimator_bias,
    )
