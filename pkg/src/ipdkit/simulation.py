"""Synthetic data generation and Monte Carlo coverage studies.

The linear generator draws independent standard normal features with
outcome y = z @ beta + noise. Prediction rules are frozen maps from
features to predictions: an attenuated linear rule (whose naive-regression
bias and residual variance have exact closed forms) or a bagged-tree
ensemble trained on an independent sample. The harness replays
(generate, predict, label, estimate) over seeded replications and
aggregates bias, SE, coverage, and CI width with Monte Carlo standard
errors. Replication r draws every random quantity from
SeedSequence(master_seed, spawn_key=(0, r)), so results are identical
for any thread count or execution order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data_model import CategoricalDataset, Dataset
from .errors import HarnessError, IpdError, UnavailableError, ValidationError
from .estimators import EstimateResult, EstimatorConfig, METHODS, estimate
from .targets import TargetSpec, design_matrix
from .trees import BaggedTrees, fit_bagged_trees

RULE_KINDS = ("attenuated_linear", "bagged_trees")


@dataclass(frozen=True)
class LinearDgpConfig:
    n: int
    p: int = 10
    noise_sd: float = 1.0
    true_beta: tuple | None = None  # defaults to all ones
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValidationError("n and p must be >= 1")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")
        if self.true_beta is not None and len(self.true_beta) != self.p:
            raise ValidationError("true_beta length must equal p")

    @property
    def beta(self) -> np.ndarray:
        if self.true_beta is None:
            return np.ones(self.p)
        return np.asarray(self.true_beta, dtype=float)


@dataclass(frozen=True)
class LinearSample:
    z: np.ndarray
    y: np.ndarray


def generate_linear_dgp(cfg: LinearDgpConfig) -> LinearSample:
    """Draw z ~ N(0, I_p) rows and y = z @ beta + noise; deterministic given seed."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    z = rng.standard_normal((cfg.n, cfg.p))
    eps = rng.standard_normal(cfg.n)
    return LinearSample(z=z, y=z @ cfg.beta + cfg.noise_sd * eps)


@dataclass(frozen=True)
class RuleSpec:
    """Unfitted description of a prediction rule.

    ``subset`` holds 1-based feature indices (matching the z1..zp naming).
    ``c_s`` is the attenuation factor for the linear kind; tree settings
    apply to the bagged kind only.
    """

    kind: str
    subset: tuple[int, ...]
    c_s: float = 1.0
    n_trees: int = 100
    max_depth: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValidationError(f"unknown rule kind {self.kind!r}")
        if len(self.subset) == 0:
            raise ValidationError("rule subset must be nonempty")
        if any(j < 1 for j in self.subset):
            raise ValidationError("subset indices are 1-based and must be >= 1")
        if self.kind == "attenuated_linear" and not 0.0 < self.c_s <= 1.0:
            raise ValidationError("attenuation c_s must lie in (0, 1]")
        object.__setattr__(self, "subset", tuple(sorted(set(self.subset))))

    @property
    def columns(self) -> np.ndarray:
        return np.asarray(self.subset, dtype=int) - 1


@dataclass(frozen=True)
class PredictionRule:
    """Frozen map z -> yhat; training state (if any) lives in ``ensemble``."""

    spec: RuleSpec
    ensemble: BaggedTrees | None = None

    def predict(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim != 2 or z.shape[1] < max(self.spec.subset):
            raise ValidationError(f"rule needs feature columns up to {max(self.spec.subset)}")
        sub = z[:, self.spec.columns]
        if self.spec.kind == "attenuated_linear":
            return self.spec.c_s * sub.sum(axis=1)
        return self.ensemble.predict(sub)


def fit_rule(train: LinearSample | None, spec: RuleSpec) -> PredictionRule:
    """Freeze a rule; the attenuated kind ignores training data entirely.

    Training data must be independent of the analysis sample (the harness
    enforces distinct seed streams).
    """
    if spec.kind == "attenuated_linear":
        return PredictionRule(spec=spec)
    if train is None or train.z.shape[0] == 0:
        raise ValidationError("bagged_trees requires a nonempty training sample")
    ensemble = fit_bagged_trees(
        train.z[:, spec.columns], train.y,
        n_trees=spec.n_trees, max_depth=spec.max_depth, seed=spec.seed,
    )
    return PredictionRule(spec=spec, ensemble=ensemble)


@dataclass(frozen=True)
class AnalyticNaiveSlope:
    eta1: float
    bias: float
    resid_var: float
    oracle_resid_var: float


def analytic_naive_slope(rule: RuleSpec, p: int) -> AnalyticNaiveSlope:
    """Closed-form naive slope, bias, and residual variance for attenuated rules.

    With yhat = c_S * sum_{j in S} z_j and unit true coefficients, the
    population naive slope on z1 is c_S when 1 is in S and 0 otherwise;
    the naive residual variance is c_S^2 |S \\ {1}|, against an oracle
    residual variance of p.
    """
    if rule.kind != "attenuated_linear":
        raise UnavailableError("analytic naive slope requires the attenuated_linear rule")
    eta1 = rule.c_s if 1 in rule.subset else 0.0
    others = len([j for j in rule.subset if j != 1])
    return AnalyticNaiveSlope(
        eta1=eta1,
        bias=eta1 - 1.0,
        resid_var=rule.c_s**2 * others,
        oracle_resid_var=float(p),
    )


def make_dataset(z: np.ndarray, y: np.ndarray, yhat: np.ndarray, labeled_idx: np.ndarray,
                 x_columns: Sequence[int] = (0,)) -> Dataset:
    """Assemble a Dataset from a full simulated sample and a labeled index set.

    ``x_columns`` selects which z columns serve as inference covariates
    (default: the first feature, the illustrative slope setting). True
    outcomes for unlabeled rows are retained for the oracle estimator.
    """
    n = z.shape[0]
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(labeled_idx, dtype=int)] = True
    x = z[:, list(x_columns)]
    return Dataset(
        y_labeled=y[mask],
        yhat_labeled=yhat[mask],
        x_labeled=x[mask],
        z_labeled=z[mask],
        yhat_unlabeled=yhat[~mask],
        x_unlabeled=x[~mask],
        z_unlabeled=z[~mask],
        y_unlabeled_true=y[~mask],
    )


@dataclass(frozen=True)
class McConfig:
    replications: int
    rho: float
    estimators: tuple[str, ...]
    target: TargetSpec
    dgp: LinearDgpConfig
    rule: RuleSpec
    master_seed: int
    train_n: int = 1000
    threads: int = 1
    ci_level: float = 0.95
    theta_true: tuple | None = None  # override; computed for mean/linear targets

    def __post_init__(self):
        if self.replications < 1:
            raise ValidationError("replications must be >= 1")
        if not 0.0 < self.rho < 1.0:
            raise ValidationError("rho must lie in (0, 1)")
        unknown = set(self.estimators) - set(METHODS)
        if unknown:
            raise ValidationError(f"unknown estimators {sorted(unknown)}")
        object.__setattr__(self, "estimators", tuple(self.estimators))


def true_theta(cfg: McConfig) -> np.ndarray:
    """Population value of the target under the linear DGP."""
    if cfg.theta_true is not None:
        return np.asarray(cfg.theta_true, dtype=float)
    beta = cfg.dgp.beta
    if cfg.target.kind == "mean":
        return np.zeros(1)
    if cfg.target.kind == "linear_regression":
        # independent mean-zero features: marginal slope on z1 is beta_1
        slope = beta[0]
        if cfg.target.intercept:
            return np.array([0.0, slope])
        return np.array([slope])
    raise UnavailableError("no analytic truth for this target; set theta_true explicitly")


@dataclass(frozen=True)
class McEstimatorSummary:
    estimator: str
    replications_ok: int
    failures: int
    mean_bias: np.ndarray
    bias_mc_se: np.ndarray
    empirical_se: np.ndarray
    mean_est_se: np.ndarray
    est_se_mc_se: np.ndarray
    coverage: np.ndarray
    coverage_mc_se: np.ndarray
    mean_ci_width: np.ndarray
    width_mc_se: np.ndarray
    mean_resid_var: float | None = None


@dataclass(frozen=True)
class McReport:
    theta_true: np.ndarray
    summaries: tuple[McEstimatorSummary, ...]
    replications: int
    config: Mapping = field(default_factory=dict)

    def summary(self, estimator: str) -> McEstimatorSummary:
        for s in self.summaries:
            if s.estimator == estimator:
                return s
        raise KeyError(estimator)

    def to_csv_rows(self) -> list[list]:
        header = [
            "estimator", "coord", "truth", "mean_bias", "bias_mc_se",
            "empirical_se", "mean_est_se", "est_se_mc_se", "coverage",
            "coverage_mc_se", "mean_ci_width", "width_mc_se",
            "failures", "mean_resid_var",
        ]
        rows = [header]
        for s in self.summaries:
            for k in range(self.theta_true.shape[0]):
                rows.append([
                    s.estimator, k, repr(float(self.theta_true[k])),
                    repr(float(s.mean_bias[k])), repr(float(s.bias_mc_se[k])),
                    repr(float(s.empirical_se[k])), repr(float(s.mean_est_se[k])),
                    repr(float(s.est_se_mc_se[k])), repr(float(s.coverage[k])),
                    repr(float(s.coverage_mc_se[k])), repr(float(s.mean_ci_width[k])),
                    repr(float(s.width_mc_se[k])), s.failures,
                    "" if s.mean_resid_var is None else repr(float(s.mean_resid_var)),
                ])
        return rows

    def to_json_dict(self) -> dict:
        return {
            "theta_true": self.theta_true.tolist(),
            "replications": self.replications,
            "config": dict(self.config),
            "estimators": [
                {
                    "estimator": s.estimator,
                    "replications_ok": s.replications_ok,
                    "failures": s.failures,
                    "mean_bias": s.mean_bias.tolist(),
                    "bias_mc_se": s.bias_mc_se.tolist(),
                    "empirical_se": s.empirical_se.tolist(),
                    "mean_est_se": s.mean_est_se.tolist(),
                    "est_se_mc_se": s.est_se_mc_se.tolist(),
                    "coverage": s.coverage.tolist(),
                    "coverage_mc_se": s.coverage_mc_se.tolist(),
                    "mean_ci_width": s.mean_ci_width.tolist(),
                    "width_mc_se": s.width_mc_se.tolist(),
                    "mean_resid_var": s.mean_resid_var,
                }
                for s in self.summaries
            ],
        }


def _residual_variance(method: str, d: Dataset, t: TargetSpec, theta: np.ndarray) -> float | None:
    """Mean squared residual of the fit on its own rows (regression targets).

    Defined for estimators with a single working sample: naive (predictions
    on all rows), oracle (true outcomes on all rows), classical (labeled
    outcomes). Uses an n - dim denominator.
    """
    if t.kind != "linear_regression" or method not in ("naive", "oracle", "classical"):
        return None
    if method == "classical":
        design = design_matrix(t, d.x_labeled)
        y = d.y_labeled
    else:
        design = design_matrix(t, np.vstack([d.x_labeled, d.x_unlabeled]))
        if method == "naive":
            y = np.concatenate([d.yhat_labeled, d.yhat_unlabeled])
        else:
            if d.y_unlabeled_true is None:
                return None
            y = np.concatenate([d.y_labeled, d.y_unlabeled_true])
    resid = y - design @ theta
    dof = max(y.shape[0] - t.dim, 1)
    return float(resid @ resid / dof)


def _run_replication(cfg: McConfig, rule: PredictionRule, r: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.master_seed, spawn_key=(0, r)))
    n, p = cfg.dgp.n, cfg.dgp.p
    z = rng.standard_normal((n, p))
    eps = rng.standard_normal(n)
    y = z @ cfg.dgp.beta + cfg.dgp.noise_sd * eps
    yhat = rule.predict(z)
    n_l = int(round(cfg.rho * n))
    n_l = min(max(n_l, 1), n - 1)
    labeled_idx = rng.permutation(n)[:n_l]
    d = make_dataset(z, y, yhat, labeled_idx)
    out = {}
    for method in cfg.estimators:
        ecfg = EstimatorConfig(method=method, ci_level=cfg.ci_level)
        try:
            res: EstimateResult = estimate(d, cfg.target, ecfg)
        except IpdError as exc:
            out[method] = exc
            continue
        out[method] = (
            res.theta_hat, res.std_errors, res.ci_lower, res.ci_upper,
            _residual_variance(method, d, cfg.target, res.theta_hat),
        )
    return out


def run_monte_carlo(cfg: McConfig) -> McReport:
    """Run seeded replications (optionally threaded) and aggregate.

    Estimator failures inside a replication are counted per estimator and
    excluded from that estimator's aggregates; more than 5% failures for
    any estimator raises HarnessError.
    """
    truth = true_theta(cfg)
    if cfg.rule.kind == "bagged_trees":
        train_seed = np.random.SeedSequence(cfg.master_seed, spawn_key=(1, 0))
        train_rng = np.random.default_rng(train_seed)
        z_t = train_rng.standard_normal((cfg.train_n, cfg.dgp.p))
        y_t = z_t @ cfg.dgp.beta + cfg.dgp.noise_sd * train_rng.standard_normal(cfg.train_n)
        rule = fit_rule(LinearSample(z=z_t, y=y_t), cfg.rule)
    else:
        rule = fit_rule(None, cfg.rule)

    results: list = [None] * cfg.replications
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futures = {pool.submit(_run_replication, cfg, rule, r): r for r in range(cfg.replications)}
            for fut, r in futures.items():
                results[r] = fut.result()
    else:
        for r in range(cfg.replications):
            results[r] = _run_replication(cfg, rule, r)

    summaries = []
    for method in cfg.estimators:
        thetas, ses, los, his, rvars = [], [], [], [], []
        failures = 0
        for rep in results:
            val = rep[method]
            if isinstance(val, Exception):
                failures += 1
                continue
            theta, se, lo, hi, rv = val
            thetas.append(theta)
            ses.append(se)
            los.append(lo)
            his.append(hi)
            if rv is not None:
                rvars.append(rv)
        if failures > 0.05 * cfg.replications:
            raise HarnessError(
                f"estimator {method!r} failed in {failures}/{cfg.replications} replications"
            )
        thetas = np.asarray(thetas)
        ses = np.asarray(ses)
        los = np.asarray(los)
        his = np.asarray(his)
        r_ok = thetas.shape[0]
        covered = (los <= truth[None, :]) & (truth[None, :] <= his)
        coverage = covered.mean(axis=0)
        widths = his - los
        sd = thetas.std(axis=0, ddof=1) if r_ok > 1 else np.zeros_like(truth)
        summaries.append(McEstimatorSummary(
            estimator=method,
            replications_ok=r_ok,
            failures=failures,
            mean_bias=thetas.mean(axis=0) - truth,
            bias_mc_se=sd / np.sqrt(r_ok),
            empirical_se=sd,
            mean_est_se=ses.mean(axis=0),
            est_se_mc_se=(ses.std(axis=0, ddof=1) if r_ok > 1 else np.zeros_like(truth)) / np.sqrt(r_ok),
            coverage=coverage,
            coverage_mc_se=np.sqrt(coverage * (1.0 - coverage) / r_ok),
            mean_ci_width=widths.mean(axis=0),
            width_mc_se=(widths.std(axis=0, ddof=1) if r_ok > 1 else np.zeros_like(truth)) / np.sqrt(r_ok),
            mean_resid_var=float(np.mean(rvars)) if rvars else None,
        ))
    return McReport(
        theta_true=truth,
        summaries=tuple(summaries),
        replications=cfg.replications,
        config={
            "rho": cfg.rho, "n": cfg.dgp.n, "p": cfg.dgp.p, "master_seed": cfg.master_seed,
            "rule": f"{cfg.rule.kind}:{','.join(map(str, cfg.rule.subset))}",
            "target": cfg.target.kind,
        },
    )


def parse_subset(token: str) -> tuple[int, ...]:
    """Parse '2-10' or '1-3,7' into 1-based feature indices."""
    out: set[int] = set()
    for piece in token.split(","):
        piece = piece.strip()
        if "-" in piece:
            lo, hi = piece.split("-", 1)
            lo_i, hi_i = int(lo), int(hi)
            if lo_i > hi_i:
                raise ValidationError(f"bad subset range {piece!r}")
            out.update(range(lo_i, hi_i + 1))
        elif piece:
            out.add(int(piece))
    if not out:
        raise ValidationError(f"empty feature subset {token!r}")
    return tuple(sorted(out))


def parse_rule_spec(text: str, seed: int = 0) -> RuleSpec:
    """Parse the rule mini-grammar.

    ``attenuated:<c>:<subset>`` or ``trees:<n_trees>:<max_depth>:<subset>``
    where subset is ``<lo>-<hi>`` with optional comma-separated extras.
    """
    parts = text.split(":")
    try:
        if parts[0] == "attenuated" and len(parts) == 3:
            return RuleSpec(kind="attenuated_linear", c_s=float(parts[1]),
                            subset=parse_subset(parts[2]), seed=seed)
        if parts[0] == "trees" and len(parts) == 4:
            return RuleSpec(kind="bagged_trees", n_trees=int(parts[1]),
                            max_depth=int(parts[2]), subset=parse_subset(parts[3]), seed=seed)
    except (ValueError, ValidationError) as exc:
        raise ValidationError(f"bad rule spec {text!r}: {exc}") from exc
    raise ValidationError(
        f"bad rule spec {text!r}; expected attenuated:<c>:<subset> or trees:<n>:<depth>:<subset>"
    )


def generate_categorical_dgp(
    priors: Mapping[str, float],
    rates: Mapping[str, float],
    confusion: Mapping[str, Mapping[str, float]],
    n: int,
    seed: int = 0,
) -> CategoricalDataset:
    """Draw group ~ priors, outcome ~ Bernoulli(rate[group]), predicted
    group ~ confusion[group]; all rows come out labeled."""
    cats = tuple(priors.keys())
    pvec = np.array([priors[c] for c in cats], dtype=float)
    if abs(pvec.sum() - 1.0) > 1e-9 or np.any(pvec < 0):
        raise ValidationError("priors must be a probability simplex")
    rvec = np.array([rates[c] for c in cats], dtype=float)
    if np.any((rvec < 0) | (rvec > 1)):
        raise ValidationError("rates must lie in [0, 1]")
    cmat = np.array([[confusion[c][d_] for d_ in cats] for c in cats], dtype=float)
    if np.any(cmat < 0) or np.any(np.abs(cmat.sum(axis=1) - 1.0) > 1e-9):
        raise ValidationError("confusion rows must each sum to 1")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    g_idx = rng.choice(len(cats), size=n, p=pvec)
    outcome = (rng.random(n) < rvec[g_idx]).astype(float)
    u = rng.random(n)
    cum = np.cumsum(cmat, axis=1)[g_idx]
    gh_idx = (u[:, None] > cum).sum(axis=1)
    return CategoricalDataset(
        group=tuple(cats[i] for i in g_idx),
        group_hat=tuple(cats[i] for i in gh_idx),
        outcome=outcome,
        categories=cats,
    )


def mask_group_labels(cd: CategoricalDataset, rho: float, seed: int = 0) -> CategoricalDataset:
    """Keep a uniformly random rho-fraction of group labels; hide the rest."""
    if not 0.0 < rho <= 1.0:
        raise ValidationError("rho must lie in (0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_l = max(1, int(round(rho * cd.n)))
    keep = set(rng.permutation(cd.n)[:n_l].tolist())
    group = tuple(g if i in keep else None for i, g in enumerate(cd.group))
    return CategoricalDataset(group=group, group_hat=cd.group_hat,
                              outcome=cd.outcome, categories=cd.categories)


def naive_rate_mixture(
    priors: Mapping[str, float],
    rates: Mapping[str, float],
    confusion: Mapping[str, Mapping[str, float]],
) -> dict:
    """Exact population value of the naive per-group outcome rate.

    P(outcome=1 | predicted group = g) marginalizes the confusion
    structure; used as the closed-form oracle in tests.
    """
    cats = tuple(priors.keys())
    out = {}
    for g in cats:
        num = sum(rates[h] * priors[h] * confusion[h][g] for h in cats)
        den = sum(priors[h] * confusion[h][g] for h in cats)
        out[g] = num / den if den > 0 else None
    return out
