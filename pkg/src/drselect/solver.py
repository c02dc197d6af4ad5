"""Group-lasso solvers for multinomial logistic and grouped least squares.

Both programs share the structure  smooth loss + lambda * sum_j ||coef[j, :]||_2
with one group per design column spanning all treatment blocks; the intercept
column is never penalized.  They are solved by accelerated proximal gradient
(FISTA) with backtracking line search and a monotone restart, so the accepted
iterate sequence has nonincreasing penalized objective.  Optimality is
certified through the first-order conditions: for an active group the score
(negative gradient block) must equal lambda times the group direction, for a
zero group its norm must not exceed lambda, and unpenalized blocks must have
zero score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, DesignMatrix

PROB_FLOOR = 1e-300  # inside logs only


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8             # relative objective change
    kkt_tol: float = 1e-5         # relative to lambda, active groups + unpenalized
    kkt_abs_slack: float = 1e-6   # absolute excess allowed on zero groups
    max_iter: int = 10000
    ls_eta: float = 2.0           # backtracking multiplier
    certify: bool = True          # require the KKT gate, not just objective change
    check_every: int = 5

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class LogisticGroupLassoFit:
    gamma: np.ndarray            # p x T, baseline level 0 fixed at zero
    lambda_d: float
    selected: tuple              # non-intercept columns with nonzero group norm
    objective: float
    iterations: int
    converged: bool
    kkt_max_violation: float


@dataclass(frozen=True)
class LinearGroupLassoFit:
    beta: np.ndarray             # p x (T+1)
    lambda_y: float
    selected: tuple
    objective: float
    iterations: int
    converged: bool
    kkt_max_violation: float


@dataclass(frozen=True)
class KktReport:
    """Per-group first-order residuals of a fit.

    zero_slack maps a zero group to lambda - ||score||_2 (negative = violation),
    active_direction_error to ||score - lambda * u||_2 for the group direction u,
    active_norm_gap to | ||score||_2 - lambda |, and unpenalized_grad to the
    score norm of unpenalized (intercept) blocks.
    """

    zero_slack: dict = field(default_factory=dict)
    active_direction_error: dict = field(default_factory=dict)
    active_norm_gap: dict = field(default_factory=dict)
    unpenalized_grad: dict = field(default_factory=dict)

    @property
    def max_active_direction_error(self) -> float:
        return max(self.active_direction_error.values(), default=0.0)

    @property
    def max_zero_excess(self) -> float:
        return max((-s for s in self.zero_slack.values()), default=0.0)

    @property
    def max_unpenalized_grad(self) -> float:
        return max(self.unpenalized_grad.values(), default=0.0)


def mlogit_probs(m: np.ndarray) -> np.ndarray:
    """Multinomial logit probabilities from nonbaseline log-odds.

    For a length-T vector m, returns (p_0, ..., p_T) with
    p_t = exp(m_t) / (1 + sum_s exp(m_s)) and p_0 the remainder.  Accepts an
    n x T matrix and maps rows.  Uses max-subtraction, then renormalizes so
    each row sums to one.
    """
    m = np.asarray(m, dtype=float)
    squeeze = m.ndim == 1
    m2 = np.atleast_2d(m)
    shift = np.maximum(m2.max(axis=1, keepdims=True), 0.0)
    e = np.exp(m2 - shift)
    e0 = np.exp(-shift)
    denom = e0 + e.sum(axis=1, keepdims=True)
    probs = np.concatenate([e0, e], axis=1) / denom
    probs /= probs.sum(axis=1, keepdims=True)
    return probs[0] if squeeze else probs


def group_prox(v: np.ndarray, threshold: float) -> np.ndarray:
    """Proximal map of threshold * ||v||_2: shrink toward zero, or kill."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm <= threshold:
        return np.zeros_like(v)
    return (1.0 - threshold / norm) * v


class LogisticProblem:
    """Multinomial logistic loss M(gamma) = mean_i[-log p_{d_i}(x_i)]."""

    def __init__(self, x: np.ndarray, d: np.ndarray, n_treatments: int):
        self.x = np.ascontiguousarray(x, dtype=float)
        self.d = np.asarray(d, dtype=np.int64)
        self.t = int(n_treatments)
        self.n, self.p = self.x.shape
        self.shape = (self.p, self.t)
        # one-hot for t >= 1; the baseline column is implicit
        self.d1 = np.zeros((self.n, self.t))
        for t in range(1, self.t + 1):
            self.d1[:, t - 1] = self.d == t

    def probs(self, gamma: np.ndarray) -> np.ndarray:
        return mlogit_probs(self.x @ gamma)

    def value(self, gamma: np.ndarray) -> float:
        m = self.x @ gamma
        shift = np.maximum(m.max(axis=1), 0.0)
        lse = shift + np.log(
            np.exp(-shift) + np.exp(m - shift[:, None]).sum(axis=1)
        )
        picked = np.where(self.d > 0, m[np.arange(self.n), self.d - 1], 0.0)
        return float(np.mean(lse - picked))

    def value_grad(self, gamma: np.ndarray):
        m = self.x @ gamma
        shift = np.maximum(m.max(axis=1, keepdims=True), 0.0)
        e = np.exp(m - shift)
        e0 = np.exp(-shift)
        denom = e0 + e.sum(axis=1, keepdims=True)
        lse = shift[:, 0] + np.log(denom[:, 0])
        picked = np.where(self.d > 0, m[np.arange(self.n), self.d - 1], 0.0)
        value = float(np.mean(lse - picked))
        p1 = e / denom
        grad = self.x.T @ (p1 - self.d1) / self.n
        return value, grad

    def grad(self, gamma: np.ndarray) -> np.ndarray:
        return self.value_grad(gamma)[1]

    def lipschitz_bound(self) -> float:
        q_top = _top_eig(self.x.T @ self.x / self.n)
        return (0.25 if self.t == 1 else 0.5) * q_top


class LinearProblem:
    """Grouped least squares E(beta) = sum_t mean_{i: d_i=t}[(y_i - x_i'beta_t)^2].

    Works on per-treatment Gram matrices, so iteration cost is O(p^2) per
    block regardless of n.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, d: np.ndarray, n_treatments: int):
        self.t_bar = int(n_treatments) + 1
        self.p = x.shape[1]
        self.shape = (self.p, self.t_bar)
        self.gram = []
        self.xty = []
        self.y2 = []
        self.counts = []
        for t in range(self.t_bar):
            mask = d == t
            n_t = int(mask.sum())
            if n_t == 0:
                raise ValueError(f"treatment group {t} is empty")
            xt = x[mask]
            yt = y[mask]
            self.gram.append(xt.T @ xt / n_t)
            self.xty.append(xt.T @ yt / n_t)
            self.y2.append(float(yt @ yt / n_t))
            self.counts.append(n_t)

    def value(self, beta: np.ndarray) -> float:
        total = 0.0
        for t in range(self.t_bar):
            b = beta[:, t]
            total += b @ self.gram[t] @ b - 2.0 * self.xty[t] @ b + self.y2[t]
        return float(total)

    def value_grad(self, beta: np.ndarray):
        grad = np.empty_like(beta)
        total = 0.0
        for t in range(self.t_bar):
            b = beta[:, t]
            qb = self.gram[t] @ b
            total += b @ qb - 2.0 * self.xty[t] @ b + self.y2[t]
            grad[:, t] = 2.0 * (qb - self.xty[t])
        return float(total), grad

    def grad(self, beta: np.ndarray) -> np.ndarray:
        return self.value_grad(beta)[1]

    def lipschitz_bound(self) -> float:
        return 2.0 * max(_top_eig(q) for q in self.gram)


def _top_eig(q: np.ndarray, iters: int = 30) -> float:
    v = np.full(q.shape[0], 1.0 / np.sqrt(q.shape[0]))
    lam = 1.0
    for _ in range(iters):
        w = q @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 1.0
        v = w / lam
    return lam


def _prox_rows(z: np.ndarray, penalized: np.ndarray, threshold: float) -> np.ndarray:
    out = z.copy()
    block = z[penalized]
    norms = np.linalg.norm(block, axis=1)
    scale = np.zeros_like(norms)
    nz = norms > threshold
    scale[nz] = 1.0 - threshold / norms[nz]
    out[penalized] = block * scale[:, None]
    return out


def _penalty(coef: np.ndarray, penalized: np.ndarray, lam: float) -> float:
    if lam == 0.0:
        return 0.0
    return lam * float(np.linalg.norm(coef[penalized], axis=1).sum())


def _kkt_from_grad(coef, grad, penalized, lam):
    """Worst first-order violation given the gradient at coef."""
    score = -grad
    worst = 0.0
    unpen = np.ones(coef.shape[0], dtype=bool)
    unpen[penalized] = False
    if unpen.any():
        worst = float(np.linalg.norm(score[unpen], axis=1).max())
    block = coef[penalized]
    s = score[penalized]
    norms = np.linalg.norm(block, axis=1)
    active = norms > 0
    if active.any():
        direction = block[active] / norms[active][:, None]
        err = np.linalg.norm(s[active] - lam * direction, axis=1)
        worst = max(worst, float(err.max()))
    if (~active).any():
        excess = np.linalg.norm(s[~active], axis=1) - lam
        worst = max(worst, float(max(excess.max(), 0.0)))
    return worst


def _backtrack(problem, y, fy, gy, penalized, lam, step_l, eta):
    """Largest step passing the quadratic majorization test at y."""
    while True:
        z = _prox_rows(y - gy / step_l, penalized, lam / step_l)
        dz = z - y
        fz = problem.value(z)
        quad = fy + float((gy * dz).sum()) + 0.5 * step_l * float((dz * dz).sum())
        if fz <= quad + 1e-12 * max(1.0, abs(quad)):
            return z, fz, step_l
        step_l *= eta


def _fista(problem, penalized: np.ndarray, lam: float, cfg: SolverConfig, x0=None):
    """Monotone FISTA with backtracking.  Returns (coef, objective, iters, converged, kkt)."""
    x = np.zeros(problem.shape) if x0 is None else np.array(x0, dtype=float)
    obj = problem.value(x) + _penalty(x, penalized, lam)
    y = x
    fy, gy = problem.value_grad(y)
    step_l = max(problem.lipschitz_bound(), 1e-12)
    t_momentum = 1.0
    converged = False
    it = 0
    since_check = cfg.check_every

    for it in range(1, cfg.max_iter + 1):
        z, fz, step_l = _backtrack(problem, y, fy, gy, penalized, lam, step_l, cfg.ls_eta)
        obj_z = fz + _penalty(z, penalized, lam)

        if obj_z > obj + 1e-12 * max(1.0, abs(obj)) and y is not x:
            # momentum overshot: plain proximal step from the accepted iterate
            t_momentum = 1.0
            fy, gy = problem.value_grad(x)
            z, fz, step_l = _backtrack(problem, x, fy, gy, penalized, lam, step_l, cfg.ls_eta)
            obj_z = fz + _penalty(z, penalized, lam)
            y = x

        x_prev = x
        x = z
        rel_change = abs(obj - obj_z) / max(1.0, abs(obj))
        obj = obj_z

        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_momentum * t_momentum))
        y = x + ((t_momentum - 1.0) / t_next) * (x - x_prev)
        t_momentum = t_next
        fy, gy = problem.value_grad(y)

        if rel_change < cfg.tol:
            if not cfg.certify:
                converged = True
                break
            since_check += 1
            if since_check >= cfg.check_every:
                since_check = 0
                kkt_now = _kkt_from_grad(x, problem.grad(x), penalized, lam)
                gate = cfg.kkt_tol * lam if lam > 0 else cfg.tol * max(1.0, abs(obj))
                if kkt_now <= max(gate, cfg.kkt_abs_slack):
                    converged = True
                    break
        else:
            since_check = cfg.check_every

    kkt = _kkt_from_grad(x, problem.grad(x), penalized, lam)
    obj_final = problem.value(x) + _penalty(x, penalized, lam)
    return x, obj_final, it, converged, float(kkt)


def _selected(coef: np.ndarray, penalized: np.ndarray) -> tuple:
    norms = np.linalg.norm(coef[penalized], axis=1)
    return tuple(int(j) for j, nrm in zip(penalized, norms) if nrm > 0)


def fit_grouplasso_logistic(
    ds: Dataset,
    dm: DesignMatrix,
    lambda_d: float,
    cfg: SolverConfig = SolverConfig(),
    warm_start: np.ndarray | None = None,
) -> LogisticGroupLassoFit:
    """Penalized multinomial logistic fit; level 0 log-odds fixed at zero."""
    if lambda_d < 0:
        raise ValueError("lambda_d must be >= 0")
    problem = LogisticProblem(dm.x_star, ds.d, ds.n_treatments)
    penalized = dm.penalized_columns()
    gamma, obj, iters, converged, kkt = _fista(problem, penalized, lambda_d, cfg, warm_start)
    return LogisticGroupLassoFit(
        gamma=gamma,
        lambda_d=float(lambda_d),
        selected=_selected(gamma, penalized),
        objective=obj,
        iterations=iters,
        converged=converged,
        kkt_max_violation=kkt,
    )


def fit_grouplasso_linear(
    ds: Dataset,
    dm: DesignMatrix,
    lambda_y: float,
    cfg: SolverConfig = SolverConfig(),
    warm_start: np.ndarray | None = None,
) -> LinearGroupLassoFit:
    """Penalized grouped least squares across all treatment levels."""
    if lambda_y < 0:
        raise ValueError("lambda_y must be >= 0")
    problem = LinearProblem(dm.x_star, ds.y, ds.d, ds.n_treatments)
    penalized = dm.penalized_columns()
    beta, obj, iters, converged, kkt = _fista(problem, penalized, lambda_y, cfg, warm_start)
    return LinearGroupLassoFit(
        beta=beta,
        lambda_y=float(lambda_y),
        selected=_selected(beta, penalized),
        objective=obj,
        iterations=iters,
        converged=converged,
        kkt_max_violation=kkt,
    )


def logistic_objective(gamma: np.ndarray, dm: DesignMatrix, d: np.ndarray):
    """Loss and gradient of the multinomial logistic log-likelihood."""
    n_treatments = int(np.max(d))
    problem = LogisticProblem(dm.x_star, d, n_treatments)
    return problem.value_grad(np.asarray(gamma, dtype=float))


def linear_objective(beta: np.ndarray, dm: DesignMatrix, y: np.ndarray, d: np.ndarray):
    """Loss and gradient of the grouped least-squares criterion."""
    n_treatments = int(np.max(d))
    problem = LinearProblem(dm.x_star, y, d, n_treatments)
    return problem.value_grad(np.asarray(beta, dtype=float))


def kkt_residuals(fit, ds: Dataset, dm: DesignMatrix) -> KktReport:
    """First-order residual report for a logistic or linear group-lasso fit."""
    if isinstance(fit, LogisticGroupLassoFit):
        problem = LogisticProblem(dm.x_star, ds.d, ds.n_treatments)
        coef, lam = fit.gamma, fit.lambda_d
    elif isinstance(fit, LinearGroupLassoFit):
        problem = LinearProblem(dm.x_star, ds.y, ds.d, ds.n_treatments)
        coef, lam = fit.beta, fit.lambda_y
    else:
        raise TypeError("fit must be a group-lasso fit")
    score = -problem.grad(coef)
    penalized = dm.penalized_columns()
    pen_set = set(int(j) for j in penalized)
    report = KktReport()
    for j in range(coef.shape[0]):
        s = score[j]
        if j not in pen_set:
            report.unpenalized_grad[j] = float(np.linalg.norm(s))
            continue
        norm_j = float(np.linalg.norm(coef[j]))
        if norm_j > 0:
            u = coef[j] / norm_j
            report.active_direction_error[j] = float(np.linalg.norm(s - lam * u))
            report.active_norm_gap[j] = abs(float(np.linalg.norm(s)) - lam)
        else:
            report.zero_slack[j] = lam - float(np.linalg.norm(s))
    return report
