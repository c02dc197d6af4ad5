"""Doubly-robust effect estimation, variances, intervals, and trimming.

Point estimates combine regression imputation with inverse probability
weighting, so they stay consistent when either nuisance is misspecified.
Variances use the within/between decomposition

    V[t, t'] = 1{t = t'} * mean[d_t (y - mu_t(x))^2 / p_t(x)^2]
             + mean[(mu_t(x) - mu_t)(mu_t'(x) - mu_t')]

with the analogous, slightly messier forms for effects on the treated.  An
outer-product-of-influence-functions estimator is available as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri

from .data import Dataset, DesignMatrix


class EffectsError(ValueError):
    pass


@dataclass(frozen=True)
class NuisanceEstimates:
    """Fitted propensities and outcome regressions for every unit and level.

    phat rows sum to one and all entries sit at or above the floor; the floor
    is enforced by shrinking a row toward the uniform vector, which preserves
    the unit row sum exactly.
    """

    phat: np.ndarray           # n x (T+1)
    muhat: np.ndarray          # n x (T+1)
    phat_marginal: np.ndarray  # length T+1, group shares
    floor: float
    floor_applied: bool

    def __post_init__(self):
        phat = np.asarray(self.phat, dtype=float)
        muhat = np.asarray(self.muhat, dtype=float)
        if phat.shape != muhat.shape:
            raise EffectsError("phat and muhat must have identical shape")
        row_sums = phat.sum(axis=1)
        if np.abs(row_sums - 1.0).max() > 1e-10:
            raise EffectsError("phat rows must sum to 1 within 1e-10")
        if self.floor > 0 and phat.min() < self.floor - 1e-15:
            raise EffectsError("phat entries must respect the floor")
        marginal = np.asarray(self.phat_marginal, dtype=float)
        if marginal.shape[0] != phat.shape[1]:
            raise EffectsError("phat_marginal length must match phat width")
        object.__setattr__(self, "phat", phat)
        object.__setattr__(self, "muhat", muhat)
        object.__setattr__(self, "phat_marginal", marginal)

    @property
    def n(self) -> int:
        return self.phat.shape[0]

    @property
    def t_bar(self) -> int:
        return self.phat.shape[1]

    def subset(self, idx: np.ndarray, d: np.ndarray) -> "NuisanceEstimates":
        """Restrict to rows idx, recomputing marginal shares from labels d."""
        return NuisanceEstimates(
            phat=self.phat[idx],
            muhat=self.muhat[idx],
            phat_marginal=_marginal_shares(d[idx], self.t_bar),
            floor=self.floor,
            floor_applied=self.floor_applied,
        )


def _marginal_shares(d: np.ndarray, t_bar: int) -> np.ndarray:
    counts = np.bincount(d, minlength=t_bar).astype(float)
    shares = counts / counts.sum()
    shares[-1] = 1.0 - shares[:-1].sum()
    return shares


def apply_floor(probs: np.ndarray, floor: float):
    """Shrink each row toward uniform just enough to reach the floor.

    Returns (floored rows, whether any row moved).  Row sums are preserved
    exactly and every entry ends at or above the floor.
    """
    probs = np.asarray(probs, dtype=float)
    t_bar = probs.shape[1]
    if floor <= 0:
        return probs.copy(), False
    if floor >= 1.0 / t_bar:
        raise EffectsError(f"floor {floor} must be below 1/(T+1) = {1.0 / t_bar}")
    out = probs.copy()
    mins = out.min(axis=1)
    needs = mins < floor
    if needs.any():
        delta = (floor - mins[needs]) / (1.0 / t_bar - mins[needs])
        out[needs] = (1.0 - delta[:, None]) * out[needs] + delta[:, None] / t_bar
    return out, bool(needs.any())


def nuisances_from_refits(
    ds: Dataset, dm: DesignMatrix, logit_fit, linear_fit, floor: float = 1e-3
) -> NuisanceEstimates:
    """Evaluate the refit models at every design row."""
    from .solver import mlogit_probs

    raw = mlogit_probs(dm.x_star @ logit_fit.gamma)
    phat, applied = apply_floor(raw, floor)
    muhat = dm.x_star @ linear_fit.beta
    return NuisanceEstimates(
        phat=phat,
        muhat=muhat,
        phat_marginal=_marginal_shares(ds.d, ds.n_treatments + 1),
        floor=floor,
        floor_applied=applied,
    )


@dataclass(frozen=True)
class EffectEstimate:
    """Dose-response vector with its (T+1)-square covariance, once filled."""

    mu_hat: np.ndarray
    v: np.ndarray | None
    n: int

    @property
    def point_vector(self) -> np.ndarray:
        return self.mu_hat

    @property
    def covariance(self) -> np.ndarray | None:
        return self.v


@dataclass(frozen=True)
class TotEstimate:
    """Per-level effects on the treated relative to baseline 0."""

    tau_hat: np.ndarray
    v_tau: np.ndarray | None
    n: int

    @property
    def point_vector(self) -> np.ndarray:
        return self.tau_hat

    @property
    def covariance(self) -> np.ndarray | None:
        return self.v_tau


def _indicators(d: np.ndarray, t_bar: int) -> np.ndarray:
    out = np.zeros((d.shape[0], t_bar))
    out[np.arange(d.shape[0]), d] = 1.0
    return out


def estimate_mu(ds: Dataset, nuis: NuisanceEstimates) -> EffectEstimate:
    """Doubly-robust mean potential outcomes, one per treatment level."""
    t_bar = nuis.t_bar
    d_ind = _indicators(ds.d, t_bar)
    terms = d_ind * (ds.y[:, None] - nuis.muhat) / nuis.phat + nuis.muhat
    return EffectEstimate(mu_hat=terms.mean(axis=0), v=None, n=ds.n)


def estimate_mu_cond(ds: Dataset, nuis: NuisanceEstimates, t: int, t_prime: int) -> float:
    """Mean potential outcome at level t for the level-t' subpopulation.

    The t == t' case is the plain group average, computed directly from the
    outcomes without touching any nuisance estimate.
    """
    t_bar = nuis.t_bar
    if not (0 <= t < t_bar and 0 <= t_prime < t_bar):
        raise EffectsError(f"treatment levels must be in 0..{t_bar - 1}")
    mask_tp = ds.d == t_prime
    if not mask_tp.any():
        raise EffectsError(f"treatment group {t_prime} is empty")
    if t == t_prime:
        return float(ds.y[mask_tp].mean())
    share_tp = nuis.phat_marginal[t_prime]
    d_t = (ds.d == t).astype(float)
    term = (
        mask_tp * nuis.muhat[:, t] / share_tp
        + nuis.phat[:, t_prime] / share_tp * d_t * (ds.y - nuis.muhat[:, t]) / nuis.phat[:, t]
    )
    return float(term.mean())


def estimate_tau(ds: Dataset, nuis: NuisanceEstimates) -> TotEstimate:
    """Vector of treatment-on-the-treated effects mu_{t,t} - mu_{0,t}, t >= 1."""
    t_bar = nuis.t_bar
    tau = np.array(
        [
            estimate_mu_cond(ds, nuis, t, t) - estimate_mu_cond(ds, nuis, 0, t)
            for t in range(1, t_bar)
        ]
    )
    return TotEstimate(tau_hat=tau, v_tau=None, n=ds.n)


def variance_mu(
    ds: Dataset, nuis: NuisanceEstimates, est: EffectEstimate, method: str = "decomposition"
) -> EffectEstimate:
    """Fill the covariance of the dose-response estimate.

    method='decomposition' uses the within/between plug-in forms;
    method='influence' uses the sample covariance of influence values.
    """
    t_bar = nuis.t_bar
    if method == "influence":
        psi = np.column_stack(
            [influence_values(ds, nuis, "mu", t, point=est.mu_hat[t]) for t in range(t_bar)]
        )
        v = psi.T @ psi / ds.n
        return replace(est, v=v)
    if method != "decomposition":
        raise EffectsError("method must be 'decomposition' or 'influence'")
    d_ind = _indicators(ds.d, t_bar)
    w = (d_ind * (ds.y[:, None] - nuis.muhat) ** 2 / nuis.phat ** 2).mean(axis=0)
    centered = nuis.muhat - est.mu_hat[None, :]
    v_b = centered.T @ centered / ds.n
    v = v_b + np.diag(w)
    return replace(est, v=v)


def variance_tau(ds: Dataset, nuis: NuisanceEstimates, tot: TotEstimate) -> TotEstimate:
    """Fill the covariance of the treated-effects estimate.

    Only the baseline regression mu_0 enters; the within part recenters by
    the two conditional means and the between part reweights the baseline
    residuals by propensity ratios.
    """
    t_bar = nuis.t_bar
    t_count = t_bar - 1
    shares = nuis.phat_marginal
    mu0 = nuis.muhat[:, 0]
    d0 = (ds.d == 0).astype(float)
    base_sq = d0 * (ds.y - mu0) ** 2 / nuis.phat[:, 0] ** 2

    v_w = np.zeros(t_count)
    for t in range(1, t_bar):
        d_t = (ds.d == t).astype(float)
        mu_tt = estimate_mu_cond(ds, nuis, t, t)
        mu_0t = estimate_mu_cond(ds, nuis, 0, t)
        dev = ds.y - mu0 - mu_tt + mu_0t
        v_w[t - 1] = float((d_t * dev ** 2).mean()) / shares[t] ** 2

    v_b = np.zeros((t_count, t_count))
    for t in range(1, t_bar):
        for tp in range(t, t_bar):
            val = float(
                (nuis.phat[:, t] * nuis.phat[:, tp] / (shares[t] * shares[tp]) * base_sq).mean()
            )
            v_b[t - 1, tp - 1] = val
            v_b[tp - 1, t - 1] = val
    return replace(tot, v_tau=v_b + np.diag(v_w))


def influence_values(
    ds: Dataset,
    nuis: NuisanceEstimates,
    kind: str,
    t: int,
    t_prime: int | None = None,
    point: float | None = None,
) -> np.ndarray:
    """Per-observation influence evaluations for mu_t or mu_{t,t'}.

    By construction the sample mean is zero when `point` is the matching
    doubly-robust estimate.
    """
    d_t = (ds.d == t).astype(float)
    if kind == "mu":
        if point is None:
            point = estimate_mu(ds, nuis).mu_hat[t]
        return d_t * (ds.y - nuis.muhat[:, t]) / nuis.phat[:, t] + nuis.muhat[:, t] - point
    if kind == "mu_cond":
        if t_prime is None:
            raise EffectsError("mu_cond influence needs t_prime")
        if point is None:
            point = estimate_mu_cond(ds, nuis, t, t_prime)
        share_tp = nuis.phat_marginal[t_prime]
        d_tp = (ds.d == t_prime).astype(float)
        return (
            d_tp * nuis.muhat[:, t] / share_tp
            + nuis.phat[:, t_prime] / share_tp * d_t * (ds.y - nuis.muhat[:, t]) / nuis.phat[:, t]
            - point
        )
    raise EffectsError("kind must be 'mu' or 'mu_cond'")


@dataclass(frozen=True)
class LinearContrast:
    """G(v) = weights . v with constant gradient."""

    weights: tuple

    def value(self, v: np.ndarray) -> float:
        return float(np.dot(self.weights, v))

    def gradient(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)


@dataclass(frozen=True)
class ConfidenceInterval:
    point: float
    lower: float
    upper: float
    se: float
    alpha: float
    degenerate: bool = False

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def normal_quantile(prob: float) -> float:
    """Standard normal inverse CDF (rational approximation, error << 1e-9)."""
    return float(ndtri(prob))


def ci_functional(est, contrast, alpha: float = 0.05) -> ConfidenceInterval:
    """Delta-method confidence interval for a smooth functional of the estimate."""
    if not 0.0 < alpha < 1.0:
        raise EffectsError("alpha must be in (0, 1)")
    if est.covariance is None:
        raise EffectsError("estimate has no covariance; run the variance step first")
    vec = est.point_vector
    point = contrast.value(vec)
    grad = np.asarray(contrast.gradient(vec), dtype=float)
    quad = float(grad @ est.covariance @ grad)
    quad = max(quad, 0.0)
    se = float(np.sqrt(quad / est.n))
    c = normal_quantile(1.0 - alpha / 2.0)
    return ConfidenceInterval(
        point=point,
        lower=point - c * se,
        upper=point + c * se,
        se=se,
        alpha=alpha,
        degenerate=quad == 0.0,
    )


def parse_contrast(expr: str, t_bar: int) -> LinearContrast:
    """Parse a contrast like 'mu1-mu0' (+/- mu_t terms only)."""
    tokens = expr.replace(" ", "")
    if not tokens:
        raise EffectsError("empty contrast")
    weights = np.zeros(t_bar)
    sign = +1.0
    i = 0
    if tokens[0] in "+-":
        sign = -1.0 if tokens[0] == "-" else 1.0
        i = 1
    while i < len(tokens):
        if not tokens.startswith("mu", i):
            raise EffectsError(f"bad contrast term at {tokens[i:]!r}; expected mu<t>")
        i += 2
        j = i
        while j < len(tokens) and tokens[j].isdigit():
            j += 1
        if j == i:
            raise EffectsError(f"missing treatment index in contrast {expr!r}")
        t = int(tokens[i:j])
        if t >= t_bar:
            raise EffectsError(f"contrast references mu{t} but levels are 0..{t_bar - 1}")
        weights[t] += sign
        i = j
        if i < len(tokens):
            if tokens[i] not in "+-":
                raise EffectsError(f"expected + or - at {tokens[i:]!r}")
            sign = -1.0 if tokens[i] == "-" else 1.0
            i += 1
    return LinearContrast(weights=tuple(weights))


@dataclass(frozen=True)
class TrimResult:
    dataset: Dataset
    nuisances: NuisanceEstimates
    kept_index: np.ndarray
    n_dropped: int
    bounds: tuple


def trim_overlap(
    ds: Dataset, nuis: NuisanceEstimates, treated_label: int, floor: float | None = None
) -> TrimResult:
    """Drop comparison units whose treated-level propensity falls outside the
    range observed among treated units.  Treated units are never dropped."""
    t_bar = nuis.t_bar
    if not (0 <= treated_label < t_bar):
        raise EffectsError(f"treated_label must be in 0..{t_bar - 1}")
    treated = ds.d == treated_label
    if not treated.any():
        raise EffectsError(f"no units with treatment {treated_label}")
    p_treated = nuis.phat[:, treated_label]
    lo, hi = float(p_treated[treated].min()), float(p_treated[treated].max())
    keep = treated | ((p_treated >= lo) & (p_treated <= hi))
    if not (keep & ~treated).any():
        raise EffectsError("all comparison units trimmed; propensity ranges do not overlap")
    idx = np.flatnonzero(keep)
    trimmed = Dataset(
        y=ds.y[idx],
        d=ds.d[idx],
        x_raw=ds.x_raw[idx],
        column_names=ds.column_names,
        treatment_map=ds.treatment_map,
    )
    floor = nuis.floor if floor is None else floor
    phat, applied = apply_floor(nuis.phat[idx], floor)
    new_nuis = NuisanceEstimates(
        phat=phat,
        muhat=nuis.muhat[idx],
        phat_marginal=_marginal_shares(trimmed.d, t_bar),
        floor=floor,
        floor_applied=applied or nuis.floor_applied,
    )
    return TrimResult(
        dataset=trimmed,
        nuisances=new_nuis,
        kept_index=idx,
        n_dropped=int(ds.n - idx.shape[0]),
        bounds=(lo, hi),
    )
