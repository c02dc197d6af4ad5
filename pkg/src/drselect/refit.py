"""Unpenalized refitting on the selected support.

After group-lasso selection the retained columns (plus any user-forced
columns and always the intercept) are refit without a penalty, removing the
shrinkage bias.  The logistic refit is a damped-Newton multinomial MLE; the
linear refit is per-treatment least squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import Dataset, DesignMatrix
from .solver import LinearGroupLassoFit, LogisticGroupLassoFit, LogisticProblem

RANK_EIG_MIN = 1e-10
SEPARATION_BOUND = 30.0  # max |coefficient| on the standardized scale


class RefitError(RuntimeError):
    """columns, when set, names the offending (collinear) columns."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


@dataclass(frozen=True)
class RefitPlan:
    """Support specification for the unpenalized refit.

    base_selected : columns selected by the penalized fit being refit.
    forced : user-specified columns always included.
    use_union : also include `other_selected` (the other model's selection).
    """

    base_selected: frozenset
    forced: frozenset = frozenset()
    use_union: bool = False
    other_selected: frozenset = frozenset()

    def support(self) -> frozenset:
        s = frozenset(self.base_selected) | frozenset(self.forced)
        if self.use_union:
            s = s | frozenset(self.other_selected)
        return s


def _resolve_columns(ds: Dataset, dm: DesignMatrix, plan: RefitPlan) -> list[int]:
    support = plan.support()
    for j in support:
        if not (0 <= int(j) < dm.p):
            raise RefitError(f"column index {j} outside design width {dm.p}")
    if len(support) > ds.n - 1:
        raise RefitError(
            f"support size {len(support)} exceeds n - 1 = {ds.n - 1}; refit infeasible"
        )
    cols = set(int(j) for j in support)
    if dm.intercept_col is not None:
        cols.add(dm.intercept_col)
    return sorted(cols)


def _check_rank(x_sub: np.ndarray, names, what: str):
    n = x_sub.shape[0]
    gram = x_sub.T @ x_sub / n
    eigmin = float(np.linalg.eigvalsh(gram)[0])
    if eigmin <= RANK_EIG_MIN:
        _, r, piv = scipy.linalg.qr(x_sub, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        # pivot positions whose contribution is on the failing-eigenvalue scale
        bad = sorted(
            names[piv[k]]
            for k in range(len(piv))
            if k >= len(diag) or diag[k] * diag[k] / n <= 10.0 * RANK_EIG_MIN
        )
        if not bad:
            bad = [names[piv[-1]]]
        raise RefitError(
            f"{what}: collinear columns {bad} (min Gram eigenvalue {eigmin:.2e})",
            columns=bad,
        )


def logistic_mle(
    x: np.ndarray, d: np.ndarray, t_count: int, cols, p_total: int, names=None
):
    """Damped-Newton multinomial MLE on the given columns.

    Returns (full-width gamma, objective, iterations, converged, grad_max).
    """
    cols = list(cols)
    names = names if names is not None else [f"col{j}" for j in cols]
    x_sub = x[:, cols]
    _check_rank(x_sub, names, "logistic refit")
    problem = LogisticProblem(x_sub, d, t_count)
    k = len(cols)
    gamma = np.zeros((k, t_count))
    value, grad = problem.value_grad(gamma)
    converged = False
    iters = 0
    for iters in range(1, 101):
        hess = _mlogit_hessian(problem, gamma)
        step = scipy.linalg.solve(
            hess + 1e-12 * np.eye(k * t_count), grad.reshape(-1, order="F"),
            assume_a="pos",
        ).reshape((k, t_count), order="F")
        # halve until the likelihood improves
        scale = 1.0
        for _ in range(60):
            cand = gamma - scale * step
            cand_value = problem.value(cand)
            if cand_value <= value + 1e-14:
                break
            scale *= 0.5
        gamma = gamma - scale * step
        value, grad = problem.value_grad(gamma)
        if np.abs(gamma).max() > SEPARATION_BOUND:
            raise RefitError(
                "separation detected in logistic refit (coefficients diverging); "
                "use a penalized fit or drop perfect predictors"
            )
        if np.abs(grad).max() < 1e-11:
            converged = True
            break
    full = np.zeros((p_total, t_count))
    full[cols] = gamma
    return full, value, iters, converged, float(np.abs(grad).max())


def refit_logistic(ds: Dataset, dm: DesignMatrix, plan: RefitPlan) -> LogisticGroupLassoFit:
    """Unpenalized multinomial logistic MLE restricted to the planned support."""
    cols = _resolve_columns(ds, dm, plan)
    names = [dm.provenance[j] for j in cols]
    full, value, iters, converged, grad_max = logistic_mle(
        dm.x_star, ds.d, ds.n_treatments, cols, dm.p, names
    )
    nonzero = [
        j for j in cols
        if j != dm.intercept_col and np.linalg.norm(full[j]) > 0
    ]
    return LogisticGroupLassoFit(
        gamma=full,
        lambda_d=0.0,
        selected=tuple(nonzero),
        objective=value,
        iterations=iters,
        converged=converged,
        kkt_max_violation=grad_max,
    )


def _mlogit_hessian(problem: LogisticProblem, gamma: np.ndarray) -> np.ndarray:
    """Exact Hessian of the multinomial logistic loss, (k*T) x (k*T)."""
    probs = problem.probs(gamma)[:, 1:]  # n x T, nonbaseline levels
    k, t_count = gamma.shape
    hess = np.empty((k * t_count, k * t_count))
    x = problem.x
    n = problem.n
    for t in range(t_count):
        for u in range(t, t_count):
            w = probs[:, t] * ((t == u) - probs[:, u])
            block = x.T @ (w[:, None] * x) / n
            hess[t * k:(t + 1) * k, u * k:(u + 1) * k] = block
            if u != t:
                hess[u * k:(u + 1) * k, t * k:(t + 1) * k] = block
    return hess


def linear_lstsq(
    x: np.ndarray, y: np.ndarray, d: np.ndarray, t_bar: int, cols, p_total: int, names=None
):
    """Per-treatment least squares on the given columns.

    Returns (full-width beta, summed per-treatment mean squared error).
    """
    cols = list(cols)
    names = names if names is not None else [f"col{j}" for j in cols]
    full = np.zeros((p_total, t_bar))
    objective = 0.0
    for t in range(t_bar):
        mask = d == t
        if not mask.any():
            raise RefitError(f"treatment group {t} is empty")
        x_sub = x[mask][:, cols]
        _check_rank(x_sub, names, f"linear refit, treatment {t}")
        y_t = y[mask]
        coef, *_ = np.linalg.lstsq(x_sub, y_t, rcond=None)
        full[cols, t] = coef
        resid = y_t - x_sub @ coef
        objective += float(resid @ resid) / mask.sum()
    return full, objective


def refit_linear(ds: Dataset, dm: DesignMatrix, plan: RefitPlan) -> LinearGroupLassoFit:
    """Per-treatment least squares restricted to the planned support."""
    cols = _resolve_columns(ds, dm, plan)
    names = [dm.provenance[j] for j in cols]
    full, objective = linear_lstsq(
        dm.x_star, ds.y, ds.d, ds.n_treatments + 1, cols, dm.p, names
    )
    nonzero = [
        j for j in cols
        if j != dm.intercept_col and np.linalg.norm(full[j]) > 0
    ]
    return LinearGroupLassoFit(
        beta=full,
        lambda_y=0.0,
        selected=tuple(nonzero),
        objective=objective,
        iterations=1,
        converged=True,
        kkt_max_violation=0.0,
    )
