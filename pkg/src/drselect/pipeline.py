"""End-to-end nuisance fitting: penalty choice, group lasso, refit, evaluate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, DesignMatrix
from .effects import NuisanceEstimates, _marginal_shares, apply_floor, nuisances_from_refits
from .penalty import (
    PenaltyConfig,
    concentration_probability,
    cv_lambda,
    iterate_noise_scale,
    lambda_d,
    lambda_y,
    stratified_folds,
)
from .refit import (
    RefitError,
    RefitPlan,
    linear_lstsq,
    logistic_mle,
    refit_linear,
    refit_logistic,
)
from .solver import (
    KktReport,
    LinearProblem,
    LogisticProblem,
    SolverConfig,
    _fista,
    _selected,
    fit_grouplasso_linear,
    fit_grouplasso_logistic,
    kkt_residuals,
    mlogit_probs,
)

CROSS_FIT_SOLVER = SolverConfig(tol=1e-7, max_iter=4000, certify=False)


@dataclass(frozen=True)
class PipelineSettings:
    penalty: PenaltyConfig = PenaltyConfig()
    solver: SolverConfig = SolverConfig()
    floor: float = 1e-3
    forced: tuple = ()            # design column indices forced into both refits
    use_union: bool = False
    variance_method: str = "decomposition"   # or "influence" (outer-product cross-check)
    cross_fit: int = 0            # >= 2: evaluate outcome regressions out-of-fold
                                  # (select and refit on the complement, predict on the fold)
    cross_fit_propensity: bool = False  # also evaluate propensities out-of-fold; off by
                                        # default since refit MLE probabilities are only
                                        # calibrated in sample and can degenerate out of fold


@dataclass(frozen=True)
class PipelineFit:
    lambda_d: float
    lambda_y: float
    logit_fit: object
    linear_fit: object
    logit_refit: object
    linear_refit: object
    nuisances: NuisanceEstimates
    kkt_logit: KktReport
    kkt_linear: KktReport
    noise_scale: object = None    # populated in iterative mode
    propensity_source: str = "refit"   # "penalized_fallback" when the MLE separates
    diagnostics: dict = field(default_factory=dict)


def _group_norms(coef: np.ndarray) -> np.ndarray:
    return np.linalg.norm(coef, axis=1)


def _cap_support(selected, norms: np.ndarray, forced: set, cap: int) -> set:
    """Keep forced columns plus the largest-norm selections up to `cap` total."""
    chosen = set(forced)
    ordered = sorted(selected, key=lambda j: -norms[j])
    for j in ordered:
        if len(chosen) >= cap:
            break
        chosen.add(int(j))
    return chosen


def _drop_and_retry(refit_call, support: set, forced: set, name_to_idx: dict, attempts: int = 4):
    """Run a refit, shedding collinear columns (never forced ones) on failure."""
    current = set(support)
    for _ in range(attempts):
        try:
            return refit_call(frozenset(current)), current
        except RefitError as exc:
            if not exc.columns:
                raise
            drop = {name_to_idx[nm] for nm in exc.columns if nm in name_to_idx} - forced
            if not drop or not (drop & current):
                raise
            current -= drop
    return refit_call(frozenset(current)), current


def fit_nuisances(ds: Dataset, dm: DesignMatrix, settings: PipelineSettings) -> PipelineFit:
    """Run both first stages and produce per-unit nuisance estimates."""
    pen = settings.penalty
    x_max = dm.x_max
    n_min = int(ds.group_counts.min())
    t = ds.n_treatments
    noise = None

    if pen.mode == "formula":
        lam_d = lambda_d(ds.n, dm.p, t, x_max, pen.delta_d)
        if pen.u_max is None:
            raise ValueError(
                "formula mode needs u_max (the outcome noise scale); "
                "supply PenaltyConfig(u_max=...) or use mode='iterative'"
            )
        lam_y = lambda_y(n_min, dm.p, t + 1, x_max, pen.u_max, pen.delta_y)
    elif pen.mode == "iterative":
        lam_d = lambda_d(ds.n, dm.p, t, x_max, pen.delta_d)
        noise = iterate_noise_scale(ds, dm, pen, settings.solver)
        lam_y = noise.lambda_y
    else:  # cross_validation
        lam_d = cv_lambda(ds, dm, "logistic", pen)
        lam_y = cv_lambda(ds, dm, "linear", pen)

    logit_fit = fit_grouplasso_logistic(ds, dm, lam_d, settings.solver)
    linear_fit = fit_grouplasso_linear(ds, dm, lam_y, settings.solver)

    forced = set(int(j) for j in settings.forced)
    name_to_idx = {nm: j for j, nm in enumerate(dm.provenance)}
    cap = max(n_min - 2, 1)
    sel_d = set(logit_fit.selected)
    sel_y = set(linear_fit.selected)
    if settings.use_union:
        sel_d = sel_y = sel_d | sel_y
    support_d = _cap_support(sel_d, _group_norms(logit_fit.gamma), forced, cap)
    support_y = _cap_support(sel_y, _group_norms(linear_fit.beta), forced, cap)

    propensity_source = "refit"
    try:
        logit_refit, _ = _drop_and_retry(
            lambda s: refit_logistic(ds, dm, RefitPlan(base_selected=s)),
            support_d, forced, name_to_idx,
        )
    except RefitError as exc:
        if "separation" not in str(exc):
            raise
        # unpenalized MLE does not exist here; keep the penalized probabilities
        logit_refit = logit_fit
        propensity_source = "penalized_fallback"
    linear_refit, _ = _drop_and_retry(
        lambda s: refit_linear(ds, dm, RefitPlan(base_selected=s)),
        support_y, forced, name_to_idx,
    )
    if settings.cross_fit >= 2:
        nuis = _cross_fit_nuisances(ds, dm, lam_d, lam_y, settings, logit_refit)
    else:
        nuis = nuisances_from_refits(ds, dm, logit_refit, linear_refit, settings.floor)

    diag = {
        "concentration_probability_d": _safe_prob(dm.p, ds.n, pen.delta_d),
        "concentration_probability_y": _safe_prob(dm.p, n_min, pen.delta_y),
        "x_max": x_max,
        "n_min": n_min,
    }
    return PipelineFit(
        lambda_d=lam_d,
        lambda_y=lam_y,
        logit_fit=logit_fit,
        linear_fit=linear_fit,
        logit_refit=logit_refit,
        linear_refit=linear_refit,
        nuisances=nuis,
        kkt_logit=kkt_residuals(logit_fit, ds, dm),
        kkt_linear=kkt_residuals(linear_fit, ds, dm),
        noise_scale=noise,
        propensity_source=propensity_source,
        diagnostics=diag,
    )


def _cross_fit_nuisances(
    ds: Dataset,
    dm: DesignMatrix,
    lam_d: float,
    lam_y: float,
    settings: PipelineSettings,
    logit_refit,
) -> NuisanceEstimates:
    """Out-of-fold nuisance evaluation at the already-chosen penalty levels.

    Each fold's values come from selection plus refit on the complement, with
    columns rescaled to unit second moment on that complement, so no unit's
    own outcome enters its own regression value.  Propensities stay in sample
    unless cross_fit_propensity is set.
    """
    k = settings.cross_fit
    folds = stratified_folds(ds.d, k, settings.penalty.seed + 7919)
    t_count = ds.n_treatments
    t_bar = t_count + 1
    penalized = dm.penalized_columns()
    intercept = {dm.intercept_col} if dm.intercept_col is not None else set()
    forced = set(int(j) for j in settings.forced)
    phat_raw = np.empty((ds.n, t_bar))
    muhat = np.empty((ds.n, t_bar))

    for f in range(k):
        te = folds == f
        tr = ~te
        scales = np.sqrt((dm.x_star[tr] ** 2).mean(axis=0))
        x_tr = dm.x_star[tr] / scales
        x_te = dm.x_star[te] / scales
        cap = max(int(np.bincount(ds.d[tr], minlength=t_bar).min()) - 2, 1)

        bfit, *_ = _fista(
            LinearProblem(x_tr, ds.y[tr], ds.d[tr], t_count), penalized, lam_y, CROSS_FIT_SOLVER
        )
        sel_y = set(_selected(bfit, penalized))
        sel_d = None
        gfit = None
        if settings.cross_fit_propensity or settings.use_union:
            gfit, *_ = _fista(
                LogisticProblem(x_tr, ds.d[tr], t_count), penalized, lam_d, CROSS_FIT_SOLVER
            )
            sel_d = set(_selected(gfit, penalized))
        if settings.use_union:
            sel_y = sel_y | sel_d
            sel_d = sel_y
        support_y = _cap_support(sel_y, _group_norms(bfit), forced, cap)
        beta = _fold_linear(x_tr, ds.y[tr], ds.d[tr], t_bar,
                            intercept | support_y, forced, dm.p)
        muhat[te] = x_te @ beta
        if settings.cross_fit_propensity:
            support_d = _cap_support(sel_d, _group_norms(gfit), forced, cap)
            gamma = _fold_logistic(x_tr, ds.d[tr], t_count,
                                   intercept | support_d, forced, dm.p, gfit)
            phat_raw[te] = mlogit_probs(x_te @ gamma)

    if not settings.cross_fit_propensity:
        phat_raw = mlogit_probs(dm.x_star @ logit_refit.gamma)
    phat, applied = apply_floor(phat_raw, settings.floor)
    return NuisanceEstimates(
        phat=phat,
        muhat=muhat,
        phat_marginal=_marginal_shares(ds.d, t_bar),
        floor=settings.floor,
        floor_applied=applied,
    )


def _fold_linear(x, y, d, t_bar, cols: set, forced: set, p_total: int) -> np.ndarray:
    current = set(cols)
    names = None
    for _ in range(4):
        ordered = sorted(current)
        names = [str(j) for j in ordered]
        try:
            beta, _ = linear_lstsq(x, y, d, t_bar, ordered, p_total, names)
            return beta
        except RefitError as exc:
            drop = {int(nm) for nm in exc.columns} - forced
            if not drop or not (drop & current):
                raise
            current -= drop
    beta, _ = linear_lstsq(x, y, d, t_bar, sorted(current), p_total, names)
    return beta


def _fold_logistic(x, d, t_count, cols: set, forced: set, p_total: int, penalized_coef):
    current = set(cols)
    for _ in range(4):
        ordered = sorted(current)
        names = [str(j) for j in ordered]
        try:
            gamma, *_ = logistic_mle(x, d, t_count, ordered, p_total, names)
            return gamma
        except RefitError as exc:
            if "separation" in str(exc):
                return penalized_coef
            drop = {int(nm) for nm in exc.columns} - forced
            if not drop or not (drop & current):
                raise
            current -= drop
    return penalized_coef


def _safe_prob(p: int, n: int, delta: float) -> dict:
    value = concentration_probability(p, n, delta)
    return {"value": value, "vacuous": value >= 1.0}


def forced_indices(dm: DesignMatrix, names) -> tuple:
    """Map forced column names to design indices."""
    lookup = {nm: j for j, nm in enumerate(dm.provenance)}
    out = []
    for nm in names:
        if nm not in lookup:
            raise ValueError(f"forced column {nm!r} not in the design; "
                             f"available: {sorted(lookup)[:10]}...")
        out.append(lookup[nm])
    return tuple(out)
