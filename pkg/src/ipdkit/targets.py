"""Estimand definitions as M-estimation problems.

Each target supplies a per-row loss, its gradient (score), and Hessian,
plus a generic damped-Newton solver for weighted score equations. Weights
may be negative: the debiased estimators subtract prediction-based score
terms from labeled-set terms, so the engine only assumes the weighted
score sum has a root, not that it is a proper minimization problem.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DimensionError,
    NonConvergenceError,
    RankError,
    ValidationError,
)

TARGET_KINDS = ("mean", "linear_regression", "logistic_regression")

# Logistic coefficient norms beyond this are treated as divergence
# (complete separation); squared-loss targets solve in one step and
# never trip it.
LOGISTIC_THETA_LIMIT = 1e3


@dataclass(frozen=True)
class TargetSpec:
    """An estimand: mean, OLS coefficients, or logistic coefficients.

    ``dim`` is 1 for the mean and ``p_x + intercept`` for regressions.
    Logistic outcomes may be any real in [0, 1]; predictions enter the
    loss as soft labels without thresholding.
    """

    kind: str
    dim: int
    intercept: bool = True

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValidationError(f"unknown target kind {self.kind!r}; expected one of {TARGET_KINDS}")
        if self.dim < 1:
            raise ValidationError("target dim must be >= 1")
        if self.kind == "mean" and self.dim != 1:
            raise ValidationError("mean target has dim 1")

    @classmethod
    def mean(cls) -> "TargetSpec":
        return cls(kind="mean", dim=1, intercept=False)

    @classmethod
    def linear(cls, p_x: int, intercept: bool = True) -> "TargetSpec":
        return cls(kind="linear_regression", dim=p_x + int(intercept), intercept=intercept)

    @classmethod
    def logistic(cls, p_x: int, intercept: bool = True) -> "TargetSpec":
        return cls(kind="logistic_regression", dim=p_x + int(intercept), intercept=intercept)

    @property
    def p_x(self) -> int:
        """Number of raw covariate columns the target consumes."""
        if self.kind == "mean":
            return 0
        return self.dim - int(self.intercept)


@dataclass(frozen=True)
class SolverControls:
    max_iter: int = 100
    grad_tol: float = 1e-8
    step_halving_max: int = 30

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if self.grad_tol <= 0:
            raise ValidationError("grad_tol must be > 0")


def sigmoid(t: np.ndarray | float) -> np.ndarray | float:
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def _softplus(t: np.ndarray) -> np.ndarray:
    # log(1 + exp(t)) without overflow at |t| > 700
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def design_matrix(target: TargetSpec, x: np.ndarray) -> np.ndarray:
    """Map raw covariates to the target's design matrix.

    Mean targets use a constant column; regressions prepend an intercept
    column when the target carries one.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if target.kind == "mean":
        return np.ones((n, 1))
    if x.shape[1] != target.p_x:
        raise DimensionError(f"expected {target.p_x} covariate columns, got {x.shape[1]}")
    if target.intercept:
        return np.hstack([np.ones((n, 1)), x])
    return x


def _check_theta(target: TargetSpec, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != target.dim:
        raise DimensionError(f"theta has length {theta.shape[0]}, target dim is {target.dim}")
    return theta


def _row_design(target: TargetSpec, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if target.kind == "mean":
        return np.ones(1)
    if x.shape[0] != target.p_x:
        raise DimensionError(f"expected covariate length {target.p_x}, got {x.shape[0]}")
    if target.intercept:
        return np.concatenate([[1.0], x])
    return x


def loss(target: TargetSpec, theta, x, y: float) -> float:
    """Per-row loss l_theta(x, y)."""
    theta = _check_theta(target, theta)
    d = _row_design(target, x)
    t = float(d @ theta)
    if target.kind == "logistic_regression":
        return float(-y * t + _softplus(np.asarray(t)))
    return 0.5 * (y - t) ** 2


def score(target: TargetSpec, theta, x, y: float) -> np.ndarray:
    """Gradient of the per-row loss with respect to theta."""
    theta = _check_theta(target, theta)
    d = _row_design(target, x)
    t = float(d @ theta)
    if target.kind == "logistic_regression":
        return (sigmoid(t) - y) * d
    return (t - y) * d


def hessian(target: TargetSpec, theta, x, y: float) -> np.ndarray:
    """Per-row Hessian; symmetric PSD for every target kind."""
    theta = _check_theta(target, theta)
    d = _row_design(target, x)
    if target.kind == "logistic_regression":
        s = sigmoid(float(d @ theta))
        return s * (1.0 - s) * np.outer(d, d)
    return np.outer(d, d)


def scores_batch(target: TargetSpec, theta: np.ndarray, design: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise scores, shape (n, dim). ``design`` from design_matrix()."""
    theta = _check_theta(target, theta)
    t = design @ theta
    if target.kind == "logistic_regression":
        r = sigmoid(t) - y
    else:
        r = t - y
    return r[:, None] * design


def hessian_sum(target: TargetSpec, theta: np.ndarray, design: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted sum of per-row Hessians (unit weights when omitted)."""
    theta = _check_theta(target, theta)
    if target.kind == "logistic_regression":
        s = sigmoid(design @ theta)
        w = s * (1.0 - s)
    else:
        w = np.ones(design.shape[0])
    if weights is not None:
        w = w * weights
    return (design * w[:, None]).T @ design


@dataclass(frozen=True)
class ScoreGroup:
    """One additive block of a score equation: sum_i w_i * M @ grad_l(x_i, y_i).

    ``m`` is None (identity), a scalar, a length-dim diagonal, or a full
    dim x dim matrix applied to each row's score.
    """

    design: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    m: float | np.ndarray | None = None

    def apply_m(self, v: np.ndarray) -> np.ndarray:
        """Apply M to a dim-vector (score sum) or dim x dim matrix (Hessian sum)."""
        if self.m is None:
            return v
        m = self.m
        if np.isscalar(m):
            return m * v
        m = np.asarray(m, dtype=float)
        if m.ndim == 1:
            return m[:, None] * v if v.ndim == 2 else m * v
        return m @ v


def _group_is_null(g: ScoreGroup) -> bool:
    if g.design.shape[0] == 0:
        return True
    m = g.m
    if m is None:
        return False
    if np.isscalar(m):
        return m == 0.0
    return not np.any(np.asarray(m))


def solve_score_groups(
    target: TargetSpec,
    groups: Sequence[ScoreGroup],
    controls: SolverControls | None = None,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Damped Newton root-finder for S(theta) = sum over groups = 0.

    Returns (theta, iterations). Convergence when
    ||S(theta)|| / (1 + ||theta||) <= grad_tol. Raises RankError on a
    singular Jacobian and NonConvergenceError on budget exhaustion,
    failed step halving, or logistic iterate divergence.
    """
    controls = controls or SolverControls()
    groups = [g for g in groups if not _group_is_null(g)]
    if not groups:
        raise ValidationError("score equation has no active terms")
    dim = target.dim
    theta = np.zeros(dim) if init is None else np.asarray(init, dtype=float).copy()
    if theta.shape != (dim,):
        raise DimensionError(f"init has shape {theta.shape}, expected ({dim},)")

    def score_sum(th: np.ndarray) -> np.ndarray:
        s = np.zeros(dim)
        for g in groups:
            raw = scores_batch(target, th, g.design, g.y).T @ g.weights
            s += g.apply_m(raw)
        return s

    s = score_sum(theta)
    iterations = 0
    for _ in range(controls.max_iter):
        if target.kind == "logistic_regression" and np.linalg.norm(theta) > LOGISTIC_THETA_LIMIT:
            raise NonConvergenceError(
                "logistic iterate diverged (data may be completely separated)",
                last_iterate=theta,
                iterations=iterations,
            )
        snorm = np.linalg.norm(s)
        if snorm / (1.0 + np.linalg.norm(theta)) <= controls.grad_tol:
            return theta, iterations
        jac = np.zeros((dim, dim))
        for g in groups:
            jac += g.apply_m(hessian_sum(target, theta, g.design, g.weights))
        try:
            delta = np.linalg.solve(jac, -s)
        except np.linalg.LinAlgError as exc:
            raise RankError("singular weighted Hessian in Newton step") from exc
        if not np.all(np.isfinite(delta)):
            raise RankError("non-finite Newton step; weighted Hessian is ill-conditioned")

        step = 1.0
        for _ in range(controls.step_halving_max + 1):
            cand = theta + step * delta
            s_cand = score_sum(cand)
            if np.linalg.norm(s_cand) <= snorm or not np.isfinite(snorm):
                theta, s = cand, s_cand
                break
            step *= 0.5
        else:
            raise NonConvergenceError(
                "step halving failed to reduce the score norm",
                last_iterate=theta,
                iterations=iterations,
            )
        iterations += 1

    if np.linalg.norm(s) / (1.0 + np.linalg.norm(theta)) <= controls.grad_tol:
        return theta, iterations
    raise NonConvergenceError(
        f"no convergence in {controls.max_iter} iterations", last_iterate=theta, iterations=iterations
    )


def solve_weighted(
    target: TargetSpec,
    rows: Sequence[tuple],
    controls: SolverControls | None = None,
    init: np.ndarray | None = None,
) -> np.ndarray:
    """Solve sum_i w_i * grad_l_theta(x_i, y_i) = 0 over (x, y, weight) rows.

    Weights may be negative. Requires sum |w_i| > 0 and, for regressions,
    at least dim rows.
    """
    if len(rows) == 0:
        raise ValidationError("no rows supplied")
    xs = np.vstack([np.atleast_1d(np.asarray(r[0], dtype=float)) for r in rows])
    ys = np.asarray([r[1] for r in rows], dtype=float)
    ws = np.asarray([r[2] for r in rows], dtype=float)
    if np.sum(np.abs(ws)) == 0.0:
        raise ValidationError("all weights are zero")
    if target.kind != "mean" and len(rows) < target.dim:
        raise ValidationError(f"{len(rows)} rows < target dim {target.dim}")
    design = design_matrix(target, xs)
    theta, _ = solve_score_groups(target, [ScoreGroup(design, ys, ws)], controls, init)
    return theta
