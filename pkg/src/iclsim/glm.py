"""Quasi-binomial GLM for success/failure tables, plus rank correlation.

Accuracy tallies from the experiment cells arrive as (successes, failures)
counts per condition. A logit-link binomial GLM fit by iteratively reweighted
least squares, with a Pearson dispersion estimate, gives analysis-of-deviance
tests for rotation, curriculum and their interaction, and simple main effects
within one factor level. The chi-square tail probability comes from an
in-house regularized incomplete gamma (series plus continued fraction), so
the module needs nothing beyond numpy and math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOGIT_CAP = 15.0  # |logit| bound; keeps separated cells finite

ROTATION = "rotation"
CURRICULUM = "curriculum"
INTERACTION = "rotation:curriculum"


# ---------------------------------------------------------------- chi-square tail

def _lower_gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by power series, for x < a + 1."""
    term = 1.0 / a
    total = term
    n = a
    for _ in range(500):
        n += 1.0
        term *= x / n
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _upper_gamma_cf(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by Lentz's continued fraction."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b if b != 0.0 else 1.0 / tiny
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))

def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x)."""
    if a <= 0.0 or x < 0.0:
        raise ValueError("need a > 0 and x >= 0")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _lower_gamma_series(a, x)
    return _upper_gamma_cf(a, x)

def chi2_sf(x: float, df: float) -> float:
    """P(X > x) for a chi-square with df degrees of freedom."""
    if x < 0.0:
        return 1.0
    return gamma_q(df / 2.0, x / 2.0)


# ---------------------------------------------------------------- GLM core

@dataclass(frozen=True)
class ConditionCount:
    """One cell's accuracy tally with its factor levels."""

    rotation: str
    curriculum: str
    successes: int
    failures: int

    @property
    def trials(self) -> int:
        return self.successes + self.failures

    @property
    def accuracy(self) -> float:
        return self.successes / self.trials if self.trials else 0.0


@dataclass
class GlmFit:
    """Fitted logit-link binomial GLM on aggregated counts."""

    beta: np.ndarray
    deviance: float
    pearson_x2: float
    n_obs: int
    n_params: int

    @property
    def dispersion(self) -> float:
        """Pearson dispersion; 1.0 when the model is saturated (no residual df)."""
        df = self.n_obs - self.n_params
        return self.pearson_x2 / df if df > 0 else 1.0


def _dev_terms(y: np.ndarray, m: np.ndarray, mu: np.ndarray) -> float:
    # 0 * log(0) = 0 by continuity
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(y > 0, y * np.log(y / (m * mu)), 0.0)
        t2 = np.where(m - y > 0, (m - y) * np.log((m - y) / (m - m * mu)), 0.0)
    return float(2.0 * np.sum(t1 + t2))


def fit_binomial_glm(X: np.ndarray, successes: np.ndarray, trials: np.ndarray,
                     max_iter: int = 200, tol: float = 1e-12) -> GlmFit:
    """IRLS fit of successes/trials on design X with a logit link.

    Fitted logits are clipped to +-LOGIT_CAP, which keeps perfectly separated
    cells (0% or 100% accuracy) finite while leaving their deviance
    contribution negligible.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(successes, dtype=np.float64)
    m = np.asarray(trials, dtype=np.float64)
    if np.any(m <= 0):
        raise ValueError("every cell needs at least one trial")
    if np.any(y < 0) or np.any(y > m):
        raise ValueError("successes must lie in [0, trials]")
    n, p = X.shape
    beta = np.zeros(p)
    dev = np.inf
    for _ in range(max_iter):
        eta = np.clip(X @ beta, -LOGIT_CAP, LOGIT_CAP)
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = m * mu * (1.0 - mu)
        z = eta + (y - m * mu) / w
        WX = X * w[:, None]
        beta_new, *_ = np.linalg.lstsq(X.T @ WX, X.T @ (w * z), rcond=None)
        eta = np.clip(X @ beta_new, -LOGIT_CAP, LOGIT_CAP)
        mu = 1.0 / (1.0 + np.exp(-eta))
        dev_new = _dev_terms(y, m, mu)
        beta = beta_new
        if abs(dev - dev_new) < tol * (abs(dev_new) + tol):
            dev = dev_new
            break
        dev = dev_new
    eta = np.clip(X @ beta, -LOGIT_CAP, LOGIT_CAP)
    mu = 1.0 / (1.0 + np.exp(-eta))
    pearson = float(np.sum((y - m * mu) ** 2 / (m * mu * (1.0 - mu))))
    return GlmFit(beta=beta, deviance=dev, pearson_x2=pearson, n_obs=n, n_params=p)


# ---------------------------------------------------------------- factorial tests

@dataclass(frozen=True)
class EffectTest:
    """One analysis-of-deviance test: scaled deviance drop against chi-square."""

    name: str
    chi2: float
    df: int
    p: float


def _design(counts: list[ConditionCount], terms: tuple[str, ...]) -> np.ndarray:
    rot_levels = sorted({c.rotation for c in counts})
    cur_levels = sorted({c.curriculum for c in counts})
    cols = [np.ones(len(counts))]
    r = np.array([float(rot_levels.index(c.rotation)) for c in counts])
    u = np.array([float(cur_levels.index(c.curriculum)) for c in counts])
    if ROTATION in terms:
        cols.append(r)
    if CURRICULUM in terms:
        cols.append(u)
    if INTERACTION in terms:
        cols.append(r * u)
    return np.column_stack(cols)


def _fit_terms(counts: list[ConditionCount], terms: tuple[str, ...]) -> GlmFit:
    y = np.array([c.successes for c in counts], dtype=np.float64)
    m = np.array([c.trials for c in counts], dtype=np.float64)
    return fit_binomial_glm(_design(counts, terms), y, m)


def curriculum_rotation_analysis(counts: list[ConditionCount]) -> dict[str, EffectTest]:
    """Type II analysis of deviance over rotation, curriculum, interaction.

    Each main effect is tested against the two-main-effects model; the
    interaction against the full model. Deviance drops are scaled by the full
    model's Pearson dispersion (1.0 when saturated) and referred to
    chi-square.
    """
    if len({(c.rotation, c.curriculum) for c in counts}) != 4:
        raise ValueError("need cells covering a full 2x2 of rotation x curriculum")
    full = _fit_terms(counts, (ROTATION, CURRICULUM, INTERACTION))
    mains = _fit_terms(counts, (ROTATION, CURRICULUM))
    no_rot = _fit_terms(counts, (CURRICULUM,))
    no_cur = _fit_terms(counts, (ROTATION,))
    phi = full.dispersion
    out = {}
    for name, reduced, base in (
        (ROTATION, no_rot, mains),
        (CURRICULUM, no_cur, mains),
        (INTERACTION, mains, full),
    ):
        chi2 = max(0.0, (reduced.deviance - base.deviance) / phi)
        df = base.n_params - reduced.n_params
        out[name] = EffectTest(name=name, chi2=chi2, df=df, p=chi2_sf(chi2, df))
    return out


def simple_effect(a: ConditionCount, b: ConditionCount, name: str = "simple") -> EffectTest:
    """Two-cell comparison: does accuracy differ between a and b?

    The deviance drop from intercept-only to a one-factor model, dispersion
    from the (saturated) two-cell fit, so phi = 1.
    """
    y = np.array([a.successes, b.successes], dtype=np.float64)
    m = np.array([a.trials, b.trials], dtype=np.float64)
    null = fit_binomial_glm(np.ones((2, 1)), y, m)
    alt = fit_binomial_glm(np.column_stack([np.ones(2), [0.0, 1.0]]), y, m)
    chi2 = max(0.0, (null.deviance - alt.deviance) / alt.dispersion)
    return EffectTest(name=name, chi2=chi2, df=1, p=chi2_sf(chi2, 1))


# ---------------------------------------------------------------- rank correlation

def _ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks, ties shared."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length 1-d arrays of at least two points")
    rx = _ranks(x)
    ry = _ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        return 0.0
    return float(rx @ ry) / denom
