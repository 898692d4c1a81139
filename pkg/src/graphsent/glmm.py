"""Binomial logistic mixed model with a per-school Gaussian random intercept.

The marginal likelihood integrates each school's random intercept against
N(0, sigma^2) by adaptive Gauss-Hermite quadrature centered and scaled at
the per-school conditional mode; one quadrature node is exactly the Laplace
approximation.  Fitting maximizes the marginal log-likelihood over
(beta, log sigma) by quasi-Newton iteration; standard errors come from the
inverse observed information (numerical Hessian) at the optimum.

The model is for Pr(non-Negative), so the negative-sentiment odds ratio of
covariate j is exp(-beta_j).  Binomial coefficients are omitted from the
log-likelihood (an additive constant), which makes the sigma=0 value equal
the pooled Bernoulli logistic log-likelihood exactly.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.stats import chi2, norm

from .corpus import School, SentimentLabel
from .errors import ComputationError, InputError, SeparationError

COVARIATE_NAMES = ("intercept", "type_private", "location_small", "year", "in_person")

MODE_TOL = 1e-10
MODE_MAX_ITER = 100
GRAD_TOL = 1e-6
MAX_ITER = 500
BETA_BOUND = 12.0
SIGMA_BOUNDARY = 1e-4


@dataclass(frozen=True)
class GlmmRow:
    """One school-year cell: k non-negative messages out of n total."""

    school: str
    year: int
    type_private: int
    location_small: int
    in_person: int
    k: int
    n: int

    def __post_init__(self):
        if not 0 <= self.k <= self.n:
            raise InputError(f"row {self.school}/{self.year}: need 0 <= k <= n")
        for name in ("year", "type_private", "location_small", "in_person"):
            if getattr(self, name) not in (0, 1):
                raise InputError(f"row {self.school}/{self.year}: {name} must be 0/1")

    def covariate(self, name):
        if name == "intercept":
            return 1.0
        if name not in COVARIATE_NAMES:
            raise InputError(f"unknown covariate {name!r}")
        return float(getattr(self, name))


def design_matrix(rows, covariates):
    X = np.array([[row.covariate(c) for c in covariates] for row in rows])
    k = np.array([row.k for row in rows], dtype=np.float64)
    n = np.array([row.n for row in rows], dtype=np.float64)
    return X, k, n


def _group_indices(rows):
    groups = {}
    for idx, row in enumerate(rows):
        groups.setdefault(row.school, []).append(idx)
    return {school: np.array(ids) for school, ids in groups.items()}


def _sigmoid(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _group_mode(eta0, k, n, sigma):
    """Newton search for the conditional mode of one group's intercept."""
    gamma = 0.0
    inv_var = 1.0 / (sigma * sigma)
    for _ in range(MODE_MAX_ITER):
        p = _sigmoid(eta0 + gamma)
        g1 = np.sum(k - n * p) - gamma * inv_var
        g2 = -np.sum(n * p * (1.0 - p)) - inv_var
        gamma -= g1 / g2
        if abs(g1) < MODE_TOL:
            return gamma, -g2
    raise ComputationError("random-intercept mode search did not converge")


def _group_loglik(eta0, k, n, sigma, nodes, weights):
    """log integral of the group likelihood against N(0, sigma^2)."""
    if sigma <= 0.0:
        return float(np.sum(k * eta0 - n * np.logaddexp(0.0, eta0)))
    gamma_hat, curvature = _group_mode(eta0, k, n, sigma)
    scale = np.sqrt(2.0 / curvature)
    gammas = gamma_hat + scale * nodes
    eta = eta0[None, :] + gammas[:, None]
    cond = np.sum(k[None, :] * eta - n[None, :] * np.logaddexp(0.0, eta), axis=1)
    log_vals = cond - gammas * gammas / (2.0 * sigma * sigma) + nodes * nodes
    top = log_vals.max()
    integral = scale * np.sum(weights * np.exp(log_vals - top))
    return float(top + np.log(integral) - 0.5 * np.log(2.0 * np.pi * sigma * sigma))


def marginal_loglik(beta, sigma, rows, covariates, quad_nodes=1):
    """Marginal log-likelihood of the mixed model (binomial constants omitted)."""
    if sigma < 0:
        raise InputError("sigma must be >= 0")
    if quad_nodes < 1:
        raise InputError("quad_nodes must be >= 1")
    X, k, n = design_matrix(rows, covariates)
    beta = np.asarray(beta, dtype=np.float64)
    eta_fixed = X @ beta
    nodes, weights = np.polynomial.hermite.hermgauss(quad_nodes)
    total = 0.0
    for idx in _group_indices(rows).values():
        total += _group_loglik(eta_fixed[idx], k[idx], n[idx], sigma, nodes, weights)
    return float(total)


@dataclass(frozen=True)
class GlmmFit:
    covariates: tuple
    beta: np.ndarray
    sigma: float
    se: np.ndarray
    se_log_sigma: float | None
    loglik: float
    method: str
    converged: bool
    boundary: bool
    n_groups: int

    def wald_p(self, j):
        if self.se[j] <= 0 or not np.isfinite(self.se[j]):
            return float("nan")
        return float(2.0 * norm.sf(abs(self.beta[j]) / self.se[j]))


def _numerical_hessian(fun, theta, step=1e-4):
    k = theta.size
    h = step * np.maximum(1.0, np.abs(theta))
    hess = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k); ei[i] = h[i]
            ej = np.zeros(k); ej[j] = h[j]
            val = (fun(theta + ei + ej) - fun(theta + ei - ej)
                   - fun(theta - ei + ej) + fun(theta - ei - ej)) / (4.0 * h[i] * h[j])
            hess[i, j] = hess[j, i] = val
    return hess


def fit_glmm(rows, covariates=("intercept", "type_private", "location_small", "year"),
             quad_nodes=1, fix_sigma=None, compute_se=True):
    """Maximize the marginal likelihood; returns a GlmmFit.

    ``fix_sigma`` pins the random-intercept scale (0 gives plain pooled
    logistic regression fitted by the same quasi-Newton path).  The outer
    objective is the mean negative log-likelihood per observation, so the
    gradient tolerance is scale-free.  ``compute_se=False`` skips the
    numerical Hessian when only point estimates are needed.
    """
    rows = list(rows)
    if not rows:
        raise InputError("fit_glmm needs at least one row")
    covariates = tuple(covariates)
    X, k, n = design_matrix(rows, covariates)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise InputError("design matrix is rank deficient for covariates "
                         f"{covariates}")
    groups = _group_indices(rows)
    if fix_sigma is None and len(groups) < 2:
        raise InputError("random-intercept fit needs at least 2 groups")
    total_n = float(n.sum())
    if total_n <= 0:
        raise InputError("all rows are empty (n == 0)")

    free_sigma = fix_sigma is None

    def unpack(theta):
        if free_sigma:
            return theta[:-1], float(np.exp(theta[-1]))
        return theta, float(fix_sigma)

    def objective(theta):
        beta, sigma = unpack(theta)
        return -marginal_loglik(beta, sigma, rows, covariates, quad_nodes) / total_n

    if free_sigma:
        # plain-logistic start for beta, sigma0 = 0.1
        from .calibrate import logistic_irls

        beta_start, _, _, _, _ = logistic_irls(X, k, n)
        theta0 = np.append(beta_start, np.log(0.1))
    else:
        theta0 = np.zeros(X.shape[1])

    result = minimize(objective, theta0, method="BFGS",
                      options={"gtol": GRAD_TOL, "maxiter": MAX_ITER})
    grad_norm = float(np.max(np.abs(result.jac)))
    converged = bool(result.success) or grad_norm < 1e-5
    if not np.all(np.isfinite(result.x)):
        raise ComputationError("GLMM optimizer produced non-finite parameters")
    beta, sigma = unpack(result.x)
    if np.max(np.abs(beta)) > BETA_BOUND:
        raise SeparationError(
            "marginal likelihood has no finite maximizer "
            f"(|beta| exceeded {BETA_BOUND})"
        )
    if not converged:
        raise ComputationError(
            f"GLMM did not converge after {MAX_ITER} iterations "
            f"(gradient max-norm {grad_norm:.2e})"
        )

    boundary = free_sigma and sigma < SIGMA_BOUNDARY
    se = np.full(result.x.size, np.nan)
    if compute_se:
        hess = _numerical_hessian(objective, result.x) * total_n
        try:
            cov = np.linalg.inv(hess)
            diag = np.diag(cov)
            if np.all(diag > 0):
                se = np.sqrt(diag)
        except np.linalg.LinAlgError:
            pass
    if free_sigma:
        beta_se = se[:-1]
        se_log_sigma = None if boundary else float(se[-1])
    else:
        beta_se, se_log_sigma = se, None

    loglik = marginal_loglik(beta, sigma, rows, covariates, quad_nodes)
    return GlmmFit(
        covariates=covariates,
        beta=np.asarray(beta, dtype=np.float64),
        sigma=sigma,
        se=np.asarray(beta_se, dtype=np.float64),
        se_log_sigma=se_log_sigma,
        loglik=loglik,
        method="laplace" if quad_nodes == 1 else f"agq({quad_nodes})",
        converged=converged,
        boundary=boundary,
        n_groups=len(groups),
    )


@dataclass(frozen=True)
class FactorEffect:
    factor: str
    estimate: float
    se: float
    odds_ratio: float
    p_value: float


def odds_ratios(fit, direction="negative"):
    """Per-factor odds ratios with two-sided Wald p-values.

    ``direction="negative"`` reports exp(-beta_j), the multiplicative change
    in negative-sentiment odds; ``"non_negative"`` reports exp(beta_j).
    The intercept is not a factor and is skipped.
    """
    if direction not in ("negative", "non_negative"):
        raise InputError("direction must be 'negative' or 'non_negative'")
    sign = -1.0 if direction == "negative" else 1.0
    effects = []
    for j, name in enumerate(fit.covariates):
        if name == "intercept":
            continue
        effects.append(FactorEffect(
            factor=name,
            estimate=float(fit.beta[j]),
            se=float(fit.se[j]),
            odds_ratio=float(np.exp(sign * fit.beta[j])),
            p_value=fit.wald_p(j),
        ))
    return effects


def likelihood_ratio_test(full, reduced):
    """LRT diagnostic between two nested fits (chi-square, Wald is the default)."""
    stat = 2.0 * (full.loglik - reduced.loglik)
    df = len(full.covariates) - len(reduced.covariates)
    if df <= 0:
        raise InputError("full model must have more covariates than reduced")
    return float(stat), float(chi2.sf(max(stat, 0.0), df))


def sufficient_stats(messages, labels):
    """Aggregate per-message labels into per-(school, year) binomial rows.

    ``labels`` maps node_id -> SentimentLabel (or a dense sequence indexed by
    node_id with entries SentimentLabel / 0 / 1).  Exact for the mixed model
    because every covariate is constant within a school-year cell.
    """
    cells = {}
    for msg in messages:
        if isinstance(labels, dict):
            label = labels.get(msg.node_id)
        else:
            label = labels[msg.node_id]
        if label is None:
            raise InputError(f"node {msg.node_id} has no label")
        if isinstance(label, SentimentLabel):
            value = label.to_binary()
        elif label in (0, 1):
            value = int(label)
        else:
            raise InputError(f"node {msg.node_id}: bad label {label!r}")
        key = (msg.school, msg.year)
        cell = cells.setdefault(key, [0, 0])
        cell[0] += value
        cell[1] += 1
    rows = []
    for school in School:
        for year in (2019, 2020):
            if (school, year) not in cells:
                continue
            k, n = cells[(school, year)]
            rows.append(GlmmRow(
                school=school.token,
                year=1 if year == 2020 else 0,
                type_private=school.type_private,
                location_small=school.location_small,
                in_person=school.in_person_2020,
                k=k, n=n,
            ))
    return rows


def load_rows(path):
    """Read GlmmRow records from CSV with the canonical header."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"GLMM rows file not found: {path}")
    rows = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"school", "year", "type_private", "location_small", "in_person", "k", "n"}
        if reader.fieldnames is None or not expected <= set(reader.fieldnames):
            raise InputError(f"{path}: expected columns {sorted(expected)}")
        for line_no, rec in enumerate(reader, start=2):
            try:
                rows.append(GlmmRow(
                    school=rec["school"],
                    year=int(rec["year"]),
                    type_private=int(rec["type_private"]),
                    location_small=int(rec["location_small"]),
                    in_person=int(rec["in_person"]),
                    k=int(rec["k"]),
                    n=int(rec["n"]),
                ))
            except ValueError:
                raise InputError(f"{path} line {line_no}: non-integer field") from None
    return rows


def write_rows(path, rows):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["school", "year", "type_private", "location_small",
                         "in_person", "k", "n"])
        for row in rows:
            writer.writerow([row.school, row.year, row.type_private,
                             row.location_small, row.in_person, row.k, row.n])
