"""Penalty levels for the group-lasso stages.

Three ways to pick the penalties:

* ``formula``: closed-form levels that make the penalty dominate the score
  noise with high probability.  Very conservative at moderate n, since the
  controlling factor is a power of log(p or n); typically selects nothing
  unless n is extremely large.  The companion concentration probability is
  reported as a diagnostic.
* ``iterative``: same formulas, with the unknown design bound estimated by
  the max absolute entry and the noise scale estimated by iterating
  fit -> refit -> fourth-moment of residuals, seeded by a ridge pilot.
* ``cross_validation``: out-of-fold multinomial deviance (logistic) or
  per-treatment squared error (linear) over a decreasing grid, stratified
  folds, ties broken toward the larger penalty.  Recommended at the sample
  sizes where the closed-form levels are vacuous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, DesignMatrix
from .refit import RefitPlan, refit_linear
from .solver import (
    LinearProblem,
    LogisticProblem,
    SolverConfig,
    _fista,
    fit_grouplasso_linear,
)

CV_SOLVER = SolverConfig(tol=1e-5, max_iter=1500, certify=False)
CV_PATIENCE = 3  # grid points past the minimum before the path stops


@dataclass(frozen=True)
class PenaltyConfig:
    mode: str = "formula"            # formula | iterative | cross_validation
    delta_d: float = 4.5
    delta_y: float = 5.0
    u_max: float | None = None       # required by formula mode
    cv_folds: int = 5
    cv_grid: tuple | None = None     # strictly decreasing when supplied
    cv_grid_size: int = 15
    cv_grid_ratio: float = 1e-3      # smallest grid value / largest
    iter_max: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("formula", "iterative", "cross_validation"):
            raise ValueError(f"unknown penalty mode {self.mode!r}")
        if self.delta_d <= 0 or self.delta_y <= 0:
            raise ValueError("delta_d and delta_y must be positive")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if self.iter_max < 1:
            raise ValueError("iter_max must be >= 1")
        if self.cv_grid is not None:
            grid = tuple(float(g) for g in self.cv_grid)
            if len(grid) == 0:
                raise ValueError("cv_grid must be nonempty")
            if any(g <= 0 for g in grid):
                raise ValueError("cv_grid values must be positive")
            if any(a <= b for a, b in zip(grid, grid[1:])):
                raise ValueError("cv_grid must be strictly decreasing")
            object.__setattr__(self, "cv_grid", grid)


def lambda_d(n: int, p: int, n_treatments: int, x_max: float, delta_d: float) -> float:
    """Propensity-stage penalty level.

    2 * x_max * sqrt(T) / sqrt(n) * (1 + log(p v n)^(3/2 + delta) / sqrt(T))^(1/2)
    """
    if min(n, n_treatments) < 1 or p < 2 or x_max <= 0 or delta_d <= 0:
        raise ValueError("lambda_d requires positive arguments and p >= 2")
    t = float(n_treatments)
    log_term = math.log(max(p, n)) ** (1.5 + delta_d)
    return 2.0 * x_max * math.sqrt(t) / math.sqrt(n) * math.sqrt(1.0 + log_term / math.sqrt(t))


def lambda_y(
    n_min: int, p: int, t_bar: int, x_max: float, u_max: float, delta_y: float
) -> float:
    """Outcome-stage penalty level.

    4 * x_max * u_max * sqrt(T+1) / sqrt(n_min)
      * (1 + log(p v n_min)^(3/2 + delta) / sqrt(T+1))^(1/2)
    where n_min is the smallest treatment-group size and u_max the noise scale.
    """
    if min(n_min, t_bar) < 1 or p < 2 or x_max <= 0 or delta_y <= 0:
        raise ValueError("lambda_y requires positive arguments and p >= 2")
    if u_max <= 0:
        raise ValueError("u_max must be positive")
    tb = float(t_bar)
    log_term = math.log(max(p, n_min)) ** (1.5 + delta_y)
    return (
        4.0 * x_max * u_max * math.sqrt(tb) / math.sqrt(n_min)
        * math.sqrt(1.0 + log_term / math.sqrt(tb))
    )


def concentration_probability(p: int, n: int, delta: float) -> float:
    """Failure probability of the score-domination event (diagnostic only).

    4 * sqrt(log(2p) * (1 + 64 * log(12p)^2)) / log(p v n)^(3/2 + delta).
    Values >= 1 mean the bound is vacuous at this size.
    """
    if p < 1 or n < 2 or delta <= 0:
        raise ValueError("need p >= 1, n >= 2, delta > 0")
    num = 4.0 * math.sqrt(math.log(2 * p) * (1.0 + 64.0 * math.log(12 * p) ** 2))
    return num / math.log(max(p, n)) ** (1.5 + delta)


@dataclass(frozen=True)
class NoiseScaleResult:
    x_max: float
    u_max: float
    lambda_y: float
    converged: bool
    degenerate: bool
    history: tuple


def iterate_noise_scale(
    ds: Dataset, dm: DesignMatrix, cfg: PenaltyConfig, solver_cfg: SolverConfig = SolverConfig()
) -> NoiseScaleResult:
    """Estimate the outcome noise scale by alternating penalty and refit.

    Starts from a ridge pilot (penalty chosen by cross-validation), then
    repeats: noise scale = fourth root of the mean fourth power of own-group
    residuals -> outcome penalty -> penalized fit -> unpenalized refit.
    """
    x_max = dm.x_max
    n_min = int(ds.group_counts.min())
    t_bar = ds.n_treatments + 1
    mu = _ridge_pilot(ds, dm, cfg)
    u_prev = None
    lam = 0.0
    history = []
    converged = False
    degenerate = False
    for _ in range(cfg.iter_max):
        resid = ds.y - mu[np.arange(ds.n), ds.d]
        u_hat = float(np.mean(resid ** 4) ** 0.25)
        history.append(u_hat)
        if u_hat == 0.0:
            lam = 0.0
            degenerate = True
            converged = True
            break
        lam = lambda_y(n_min, dm.p, t_bar, x_max, u_hat, cfg.delta_y)
        if u_prev is not None and abs(u_hat - u_prev) <= 1e-6 * max(1.0, u_hat):
            converged = True
            break
        u_prev = u_hat
        fit = fit_grouplasso_linear(ds, dm, lam, solver_cfg)
        refit = refit_linear(ds, dm, RefitPlan(base_selected=frozenset(fit.selected)))
        mu = dm.x_star @ refit.beta
    return NoiseScaleResult(
        x_max=x_max,
        u_max=history[-1],
        lambda_y=lam,
        converged=converged,
        degenerate=degenerate,
        history=tuple(history),
    )


def _ridge_pilot(ds: Dataset, dm: DesignMatrix, cfg: PenaltyConfig) -> np.ndarray:
    """Per-treatment ridge predictions, n x (T+1), ridge penalty by K-fold CV."""
    alphas = np.geomspace(1e-4, 1e3, 15)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    t_bar = ds.n_treatments + 1
    x = dm.x_star
    mu = np.zeros((ds.n, t_bar))
    pen_mask = np.ones(dm.p)
    if dm.intercept_col is not None:
        pen_mask[dm.intercept_col] = 0.0
    for t in range(t_bar):
        idx = np.flatnonzero(ds.d == t)
        perm = rng.permutation(idx)
        k = min(cfg.cv_folds, len(idx))
        folds = [perm[f::k] for f in range(k)]
        scores = np.zeros(len(alphas))
        for f in range(k):
            test = folds[f]
            train = np.concatenate([folds[g] for g in range(k) if g != f])
            xt, yt = x[train], ds.y[train]
            gram = xt.T @ xt / len(train)
            xty = xt.T @ yt / len(train)
            for a_i, alpha in enumerate(alphas):
                coef = np.linalg.solve(gram + alpha * np.diag(pen_mask), xty)
                resid = ds.y[test] - x[test] @ coef
                scores[a_i] += float(resid @ resid)
        best = alphas[int(np.argmin(scores))]
        xt, yt = x[idx], ds.y[idx]
        gram = xt.T @ xt / len(idx)
        xty = xt.T @ yt / len(idx)
        coef = np.linalg.solve(gram + best * np.diag(pen_mask), xty)
        mu[:, t] = x @ coef
    return mu


def stratified_folds(d: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    """Fold labels stratified by treatment; stratum sizes differ by <= 1."""
    d = np.asarray(d)
    counts = np.bincount(d)
    if counts.min() < n_folds:
        scarce = int(np.argmin(counts))
        raise ValueError(
            f"treatment level {scarce} has only {counts.min()} units; "
            f"use fewer than {n_folds} folds"
        )
    rng = np.random.Generator(np.random.Philox(seed))
    fold = np.empty(d.shape[0], dtype=np.int64)
    for t in range(counts.shape[0]):
        idx = np.flatnonzero(d == t)
        perm = rng.permutation(idx)
        for f in range(n_folds):
            fold[perm[f::n_folds]] = f
    return fold


def lambda_max_logistic(ds: Dataset, dm: DesignMatrix) -> float:
    """Smallest penalty that zeroes every group at the intercept-only optimum."""
    counts = ds.group_counts
    shares = counts / ds.n
    d1 = np.zeros((ds.n, ds.n_treatments))
    for t in range(1, ds.n_treatments + 1):
        d1[:, t - 1] = ds.d == t
    score = dm.x_star.T @ (d1 - shares[1:][None, :]) / ds.n
    norms = np.linalg.norm(score[dm.penalized_columns()], axis=1)
    return float(norms.max())


def lambda_max_linear(ds: Dataset, dm: DesignMatrix) -> float:
    """Smallest penalty that zeroes every group with per-group mean intercepts."""
    t_bar = ds.n_treatments + 1
    scores = np.zeros((dm.p, t_bar))
    for t in range(t_bar):
        mask = ds.d == t
        y_c = ds.y[mask] - ds.y[mask].mean()
        scores[:, t] = 2.0 * dm.x_star[mask].T @ y_c / mask.sum()
    norms = np.linalg.norm(scores[dm.penalized_columns()], axis=1)
    return float(norms.max())


def default_cv_grid(lam_max: float, size: int, ratio: float) -> np.ndarray:
    return lam_max * np.geomspace(1.0, ratio, size)


def cv_lambda(
    ds: Dataset,
    dm: DesignMatrix,
    model: str,
    cfg: PenaltyConfig,
    return_path: bool = False,
):
    """Pick the penalty by stratified K-fold cross-validation.

    Logistic loss is held-out multinomial deviance; linear loss is held-out
    squared error per treatment, summed over treatments.  Ties go to the
    larger penalty.
    """
    if model not in ("logistic", "linear"):
        raise ValueError("model must be 'logistic' or 'linear'")
    if cfg.cv_grid is not None:
        grid = np.asarray(cfg.cv_grid, dtype=float)
    else:
        lam_max = (
            lambda_max_logistic(ds, dm) if model == "logistic" else lambda_max_linear(ds, dm)
        )
        grid = default_cv_grid(lam_max, cfg.cv_grid_size, cfg.cv_grid_ratio)

    folds = stratified_folds(ds.d, cfg.cv_folds, cfg.seed)
    penalized = dm.penalized_columns()
    t_count = ds.n_treatments

    problems = []
    tests = []
    for f in range(cfg.cv_folds):
        test = folds == f
        train = ~test
        if model == "logistic":
            problems.append(LogisticProblem(dm.x_star[train], ds.d[train], t_count))
            tests.append((dm.x_star[test], ds.d[test], None))
        else:
            problems.append(LinearProblem(dm.x_star[train], ds.y[train], ds.d[train], t_count))
            tests.append((dm.x_star[test], ds.d[test], ds.y[test]))

    # walk the grid from most to least penalized with per-fold warm starts;
    # stop once the out-of-fold loss has risen CV_PATIENCE points past the minimum
    warm: list = [None] * cfg.cv_folds
    losses = np.full(grid.shape[0], np.inf)
    best = 0
    for g_i, lam in enumerate(grid):
        total = 0.0
        for f in range(cfg.cv_folds):
            coef, *_ = _fista(problems[f], penalized, float(lam), CV_SOLVER, warm[f])
            warm[f] = coef
            x_test, d_test, y_test = tests[f]
            if model == "logistic":
                probs = _mlogit_probs_for(x_test, coef)
                picked = np.clip(probs[np.arange(x_test.shape[0]), d_test], 1e-300, None)
                total += float(np.mean(-np.log(picked)))
            else:
                loss = 0.0
                for t in range(t_count + 1):
                    mask = d_test == t
                    if mask.any():
                        resid = y_test[mask] - x_test[mask] @ coef[:, t]
                        loss += float(resid @ resid) / mask.sum()
                total += loss
        losses[g_i] = total / cfg.cv_folds
        if losses[g_i] < losses[best]:
            best = g_i
        elif g_i - best >= CV_PATIENCE:
            break

    chosen = float(grid[best])
    if return_path:
        return chosen, {"grid": grid, "mean_loss": losses}
    return chosen


def _mlogit_probs_for(x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    from .solver import mlogit_probs

    return mlogit_probs(x @ gamma)


def with_seed(cfg: PenaltyConfig, seed: int) -> PenaltyConfig:
    return replace(cfg, seed=seed)
