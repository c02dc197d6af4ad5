"""Approximately sparse benchmark DGPs and the Monte Carlo coverage harness.

The design draws covariates with an AR(1)-type correlation (adjacent
correlation one half), assigns a binary treatment through a logistic index,
and generates outcomes from treatment-specific linear models whose
coefficients decay polynomially, so signal strength and sparsity are dialed
by four scalars.  Replications run the full selection + refit + doubly-robust
pipeline and are aggregated into a coverage report.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, standardize
from .effects import (
    LinearContrast,
    NuisanceEstimates,
    _marginal_shares,
    apply_floor,
    ci_functional,
    estimate_mu,
    influence_values,
    variance_mu,
)
from .pipeline import PipelineSettings, fit_nuisances


@dataclass(frozen=True)
class DgpConfig:
    n: int = 500
    p: int = 200
    rho_beta: float = 1.0
    rho_gamma: float = 1.0
    alpha_beta: float = 2.0
    alpha_gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.p < 4:
            raise ValueError("p must be >= 4 (three lead coefficients plus a tail)")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if min(self.rho_beta, self.rho_gamma, self.alpha_beta, self.alpha_gamma) <= 0:
            raise ValueError("rho and alpha parameters must be positive")


@dataclass(frozen=True)
class DgpTruth:
    """Exact DGP quantities for the drawn sample, for oracle checks."""

    ate: float
    beta0: np.ndarray
    beta1: np.ndarray
    gamma: np.ndarray
    p_true: np.ndarray      # n x 2 true propensities
    mu_true: np.ndarray     # n x 2 true regression functions
    s_beta_effective: int   # coefficients with |value| > 0.1
    s_gamma_effective: int


def decaying_coefficients(p: int, rho: float, alpha: float, lead_sign: int) -> np.ndarray:
    """Coefficient vector: three unit leads then a polynomially decaying tail.

    Position j (1-indexed) has magnitude 1 for j <= 3 and (j-2)^(-alpha)
    after, with alternating signs; lead_sign fixes the sign at position 1.
    """
    j = np.arange(1, p + 1)
    mag = np.where(j <= 3, 1.0, np.maximum(j - 2, 1) ** (-float(alpha)))
    signs = np.where(j % 2 == 0, -lead_sign, lead_sign)
    return rho * signs * mag


def ar_half_draw(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """n x k Gaussian draws with covariance 2^(-|j1-j2|) between columns."""
    e = rng.standard_normal((n, k))
    z = np.empty_like(e)
    z[:, 0] = e[:, 0]
    scale = np.sqrt(0.75)
    for j in range(1, k):
        z[:, j] = 0.5 * z[:, j - 1] + scale * e[:, j]
    return z


def gen_dgp(cfg: DgpConfig) -> tuple[Dataset, DgpTruth]:
    """Draw one sample plus the exact truth record.

    Covariate position 1 is the intercept; the remaining p-1 positions are
    the correlated Gaussian draws.  beta1 = -beta0, so with mean-zero
    covariates the average treatment effect is 2 * rho_beta.
    """
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    beta0 = decaying_coefficients(cfg.p, cfg.rho_beta, cfg.alpha_beta, lead_sign=-1)
    gamma = decaying_coefficients(cfg.p, cfg.rho_gamma, cfg.alpha_gamma, lead_sign=+1)
    beta1 = -beta0

    z = ar_half_draw(rng, cfg.n, cfg.p - 1)
    index = gamma[0] + z @ gamma[1:]
    p1 = 1.0 / (1.0 + np.exp(-index))
    d = (rng.random(cfg.n) < p1).astype(np.int64)
    mu0 = beta0[0] + z @ beta0[1:]
    mu1 = beta1[0] + z @ beta1[1:]
    y = np.where(d == 1, mu1, mu0) + rng.standard_normal(cfg.n)

    names = tuple(f"z{j:04d}" for j in range(1, cfg.p))
    ds = Dataset(y=y, d=d, x_raw=z, column_names=names, treatment_map={0: 0, 1: 1})
    truth = DgpTruth(
        ate=2.0 * cfg.rho_beta,
        beta0=beta0,
        beta1=beta1,
        gamma=gamma,
        p_true=np.column_stack([1.0 - p1, p1]),
        mu_true=np.column_stack([mu0, mu1]),
        s_beta_effective=int((np.abs(beta0) > 0.1).sum()),
        s_gamma_effective=int((np.abs(gamma) > 0.1).sum()),
    )
    return ds, truth


def oracle_nuisances(ds: Dataset, truth: DgpTruth, floor: float = 0.0) -> NuisanceEstimates:
    """Package the true DGP functions as nuisance estimates."""
    phat = truth.p_true
    applied = False
    if floor > 0:
        phat, applied = apply_floor(phat, floor)
    return NuisanceEstimates(
        phat=phat,
        muhat=truth.mu_true,
        phat_marginal=_marginal_shares(ds.d, 2),
        floor=floor,
        floor_applied=applied,
    )


@dataclass(frozen=True)
class RepRecord:
    rep_seed: int
    estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    covered: bool
    bias: float
    n_comparison: int
    lambda_d: float
    lambda_y: float
    selected_d: int
    selected_y: int
    converged_logit: bool
    converged_linear: bool
    kkt_active_logit: float
    kkt_active_linear: float
    kkt_slack_logit: float    # min slack over zero groups (negative = violation)
    kkt_slack_linear: float
    influence_mean: float
    elapsed: float
    failure: str | None = None


def _failed_record(rep_seed: int, message: str, elapsed: float) -> RepRecord:
    nan = float("nan")
    return RepRecord(
        rep_seed=rep_seed, estimate=nan, se=nan, ci_lower=nan, ci_upper=nan,
        covered=False, bias=nan, n_comparison=0, lambda_d=nan, lambda_y=nan,
        selected_d=0, selected_y=0, converged_logit=False, converged_linear=False,
        kkt_active_logit=nan, kkt_active_linear=nan, kkt_slack_logit=nan,
        kkt_slack_linear=nan, influence_mean=nan, elapsed=elapsed, failure=message,
    )


def run_replication(
    cfg: DgpConfig,
    settings: PipelineSettings,
    rep_seed: int,
    oracle: bool = False,
    alpha: float = 0.05,
) -> RepRecord:
    """One full-pipeline draw: fit, estimate, interval, coverage flag."""
    start = time.perf_counter()
    draw_cfg = replace(cfg, seed=rep_seed)
    try:
        ds, truth = gen_dgp(draw_cfg)
        dm = standardize(
            np.column_stack([np.ones(ds.n), ds.x_raw]),
            intercept_col=0,
            provenance=["intercept", *ds.column_names],
        )
        if oracle:
            nuis = oracle_nuisances(ds, truth, floor=settings.floor)
            lam_d = lam_y = 0.0
            sel_d = sel_y = 0
            conv_l = conv_g = True
            kkt_al = kkt_ay = 0.0
            slack_l = slack_y = float("inf")
        else:
            pfit = fit_nuisances(ds, dm, _reseed(settings, rep_seed))
            nuis = pfit.nuisances
            lam_d, lam_y = pfit.lambda_d, pfit.lambda_y
            sel_d, sel_y = len(pfit.logit_fit.selected), len(pfit.linear_fit.selected)
            conv_g = pfit.logit_fit.converged
            conv_l = pfit.linear_fit.converged
            kkt_al = pfit.kkt_logit.max_active_direction_error
            kkt_ay = pfit.kkt_linear.max_active_direction_error
            slack_l = min(pfit.kkt_logit.zero_slack.values(), default=float("inf"))
            slack_y = min(pfit.kkt_linear.zero_slack.values(), default=float("inf"))

        est = estimate_mu(ds, nuis)
        est = variance_mu(ds, nuis, est, method=settings.variance_method)
        contrast = LinearContrast(weights=(-1.0, 1.0))
        ci = ci_functional(est, contrast, alpha=alpha)
        psi1 = influence_values(ds, nuis, "mu", 1, point=est.mu_hat[1])
        psi0 = influence_values(ds, nuis, "mu", 0, point=est.mu_hat[0])
        return RepRecord(
            rep_seed=rep_seed,
            estimate=ci.point,
            se=ci.se,
            ci_lower=ci.lower,
            ci_upper=ci.upper,
            covered=ci.contains(truth.ate),
            bias=ci.point - truth.ate,
            n_comparison=int((ds.d == 0).sum()),
            lambda_d=lam_d,
            lambda_y=lam_y,
            selected_d=sel_d,
            selected_y=sel_y,
            converged_logit=conv_g,
            converged_linear=conv_l,
            kkt_active_logit=kkt_al,
            kkt_active_linear=kkt_ay,
            kkt_slack_logit=slack_l,
            kkt_slack_linear=slack_y,
            influence_mean=float(np.mean(psi1 - psi0)),
            elapsed=time.perf_counter() - start,
        )
    except Exception as exc:  # recorded, never silently dropped
        return _failed_record(rep_seed, f"{type(exc).__name__}: {exc}", time.perf_counter() - start)


def _reseed(settings: PipelineSettings, rep_seed: int) -> PipelineSettings:
    return replace(settings, penalty=replace(settings.penalty, seed=rep_seed))


@dataclass(frozen=True)
class CellResult:
    config: DgpConfig
    reps: int
    failures: int
    coverage: float
    mean_ci_length: float
    mean_bias: float
    mean_n_comparison: float
    mean_selected_d: float
    mean_selected_y: float
    records: tuple = field(repr=False, default=())


@dataclass(frozen=True)
class CoverageReport:
    cells: tuple

    CSV_COLUMNS = (
        "n", "p", "rho_beta", "rho_gamma", "alpha_beta", "alpha_gamma", "seed",
        "reps", "failures", "coverage", "mean_ci_length", "mean_bias",
        "mean_n_comparison", "mean_selected_d", "mean_selected_y",
    )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            for cell in self.cells:
                cfg = asdict(cell.config)
                writer.writerow(
                    [cfg[k] for k in ("n", "p", "rho_beta", "rho_gamma",
                                      "alpha_beta", "alpha_gamma", "seed")]
                    + [cell.reps, cell.failures,
                       f"{cell.coverage:.6f}", f"{cell.mean_ci_length:.6f}",
                       f"{cell.mean_bias:.6f}", f"{cell.mean_n_comparison:.3f}",
                       f"{cell.mean_selected_d:.3f}", f"{cell.mean_selected_y:.3f}"]
                )


_WORKER_STATE: dict = {}


def _pool_init(settings, oracle, alpha):
    _WORKER_STATE["settings"] = settings
    _WORKER_STATE["oracle"] = oracle
    _WORKER_STATE["alpha"] = alpha


def _pool_run(args):
    cfg, rep_seed = args
    return run_replication(
        cfg, _WORKER_STATE["settings"], rep_seed,
        oracle=_WORKER_STATE["oracle"], alpha=_WORKER_STATE["alpha"],
    )


def default_threads() -> int:
    env = os.environ.get("DRSELECT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def coverage_study(
    grid,
    reps: int,
    settings: PipelineSettings = PipelineSettings(),
    oracle: bool = False,
    alpha: float = 0.05,
    threads: int | None = None,
    keep_records: bool = True,
    progress=None,
) -> CoverageReport:
    """Run `reps` replications per grid cell; seeds are cell seed + index."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    threads = default_threads() if threads is None else max(1, int(threads))
    tasks = [(cfg, cfg.seed + r) for cfg in grid for r in range(reps)]

    if threads == 1:
        results = []
        for i, task in enumerate(tasks):
            results.append(_pool_run_direct(task, settings, oracle, alpha))
            if progress and (i + 1) % 25 == 0:
                progress(i + 1, len(tasks))
    else:
        import multiprocessing as mp

        # workers are the parallel unit; keep BLAS single-threaded inside them
        saved = {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS")}
        os.environ["OMP_NUM_THREADS"] = "1"
        os.environ["OPENBLAS_NUM_THREADS"] = "1"
        try:
            ctx = mp.get_context("spawn")
            with ctx.Pool(
                threads, initializer=_pool_init, initargs=(settings, oracle, alpha)
            ) as pool:
                results = []
                for i, rec in enumerate(pool.imap(_pool_run, tasks, chunksize=4)):
                    results.append(rec)
                    if progress and (i + 1) % 25 == 0:
                        progress(i + 1, len(tasks))
        finally:
            for k, v in saved.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v

    cells = []
    for c_i, cfg in enumerate(grid):
        recs = tuple(results[c_i * reps:(c_i + 1) * reps])
        ok = [r for r in recs if r.failure is None]
        failures = len(recs) - len(ok)
        if ok:
            coverage = float(np.mean([r.covered for r in ok]))
            ci_len = float(np.mean([r.ci_upper - r.ci_lower for r in ok]))
            bias = float(np.mean([r.bias for r in ok]))
            ncomp = float(np.mean([r.n_comparison for r in ok]))
            sel_d = float(np.mean([r.selected_d for r in ok]))
            sel_y = float(np.mean([r.selected_y for r in ok]))
        else:
            coverage = ci_len = bias = ncomp = sel_d = sel_y = float("nan")
        cells.append(
            CellResult(
                config=cfg, reps=len(recs), failures=failures, coverage=coverage,
                mean_ci_length=ci_len, mean_bias=bias, mean_n_comparison=ncomp,
                mean_selected_d=sel_d, mean_selected_y=sel_y,
                records=recs if keep_records else (),
            )
        )
    return CoverageReport(cells=tuple(cells))


def _pool_run_direct(task, settings, oracle, alpha):
    cfg, rep_seed = task
    return run_replication(cfg, settings, rep_seed, oracle=oracle, alpha=alpha)


def mean_comparison_size(cfg: DgpConfig, n_seeds: int) -> float:
    """Average count of comparison-group units over fresh draws."""
    sizes = []
    for r in range(n_seeds):
        ds, _ = gen_dgp(replace(cfg, seed=cfg.seed + r))
        sizes.append(int((ds.d == 0).sum()))
    return float(np.mean(sizes))
