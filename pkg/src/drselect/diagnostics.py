"""Computable proxies for the eigenvalue conditions behind the fits.

Sparse eigenvalues of support-restricted Gram submatrices are exact; the
restricted eigenvalue over the mixed-norm cone is intractable exactly, so it
is approached by randomized sampling plus local descent and reported as an
estimate (an upper bound on the true minimum), never a certified bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_RESTRICTED_P = 200


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True)
class EigReport:
    gram_kind: str               # "pooled" or "per-treatment"
    support: tuple
    phi_min: float
    phi_max: float
    kappa_estimate: float | None = None


@dataclass(frozen=True)
class RestrictedEigEstimate:
    kappa_sq: float
    cone_multiplier: float
    samples: int
    seed: int
    blocks: int


def sparse_eig(gram: np.ndarray, support) -> tuple[float, float]:
    """Extreme eigenvalues of the support-restricted Gram submatrix."""
    support = sorted(int(j) for j in support)
    if not support:
        raise DiagnosticsError("support must be nonempty")
    gram = np.asarray(gram, dtype=float)
    sub = gram[np.ix_(support, support)]
    vals = np.linalg.eigvalsh(sub)
    return float(vals[0]), float(vals[-1])


def _cone_project(delta: np.ndarray, on_support: np.ndarray, multiplier: float) -> np.ndarray:
    """Rescale off-support rows so the mixed-norm cone constraint holds."""
    row_norms = np.linalg.norm(delta, axis=1)
    budget = multiplier * row_norms[on_support].sum()
    off = ~on_support
    off_mass = row_norms[off].sum()
    if off_mass > budget and off_mass > 0:
        delta = delta.copy()
        delta[off] *= budget / off_mass
    return delta


def _ratio(delta: np.ndarray, gram: np.ndarray, on_support: np.ndarray) -> float:
    num = float(np.einsum("jt,jk,kt->", delta, gram, delta))
    den = float((delta[on_support] ** 2).sum())
    if den <= 0:
        return np.inf
    return num / den


def restricted_eig_estimate(
    gram: np.ndarray,
    true_support,
    cone_multiplier: float = 3.0,
    samples: int = 10000,
    seed: int = 0,
    blocks: int = 1,
    descent_steps: int = 100,
) -> RestrictedEigEstimate:
    """Smallest Gram quadratic-form ratio found over the cone of directions
    whose off-support mixed norm is at most `cone_multiplier` times the
    on-support mixed norm.

    Sampling plus projected local descent; the support-restricted minimal
    eigenvector is always included as a candidate, so the estimate never
    exceeds the sparse minimum on the support.
    """
    gram = np.asarray(gram, dtype=float)
    p = gram.shape[0]
    if p > MAX_RESTRICTED_P:
        raise DiagnosticsError(
            f"p = {p} too large for the dense cone search (limit {MAX_RESTRICTED_P}); "
            "use sparse_eig on candidate supports instead"
        )
    support = sorted(int(j) for j in true_support)
    if not support:
        raise DiagnosticsError("support must be nonempty")
    on_support = np.zeros(p, dtype=bool)
    on_support[support] = True

    rng = np.random.Generator(np.random.Philox(seed))

    # guaranteed candidate: minimal eigenvector of the support submatrix
    sub = gram[np.ix_(support, support)]
    vals, vecs = np.linalg.eigh(sub)
    base = np.zeros((p, blocks))
    base[support, 0] = vecs[:, 0]
    best = _ratio(base, gram, on_support)
    best_delta = base

    for _ in range(samples):
        delta = rng.standard_normal((p, blocks))
        scale = rng.uniform(0.0, 1.0)
        row_norms = np.linalg.norm(delta, axis=1)
        budget = cone_multiplier * row_norms[on_support].sum() * scale
        off_mass = row_norms[~on_support].sum()
        if off_mass > 0:
            delta[~on_support] *= budget / off_mass
        r = _ratio(delta, gram, on_support)
        if r < best:
            best, best_delta = r, delta

    # projected gradient descent from the best sample
    delta = best_delta.copy()
    step = 0.1
    for _ in range(descent_steps):
        den = float((delta[on_support] ** 2).sum())
        gd = 2.0 * gram @ delta / den
        num = float(np.einsum("jt,jk,kt->", delta, gram, delta))
        gd[on_support] -= 2.0 * num / den ** 2 * delta[on_support]
        cand = _cone_project(delta - step * gd, on_support, cone_multiplier)
        r = _ratio(cand, gram, on_support)
        if r < best:
            best, delta = r, cand
            step *= 1.2
        else:
            step *= 0.5
            if step < 1e-12:
                break
    return RestrictedEigEstimate(
        kappa_sq=float(best),
        cone_multiplier=float(cone_multiplier),
        samples=int(samples),
        seed=int(seed),
        blocks=int(blocks),
    )


@dataclass(frozen=True)
class SupportTrackingTable:
    """Selected-support sizes across replications against the design sparsity."""

    sizes_d: np.ndarray
    sizes_y: np.ndarray
    design_sparsity: int
    quantiles: dict
    max_d: int
    max_y: int

    @property
    def median_d(self) -> float:
        return self.quantiles["d"][0.5]

    @property
    def median_y(self) -> float:
        return self.quantiles["y"][0.5]


def support_tracking(records, design_sparsity: int) -> SupportTrackingTable:
    """Summarize selected sizes from replication records.

    `records` is any iterable with `selected_d` and `selected_y` counts.
    """
    sizes_d = np.array([int(r.selected_d) for r in records], dtype=int)
    sizes_y = np.array([int(r.selected_y) for r in records], dtype=int)
    if sizes_d.size == 0:
        raise DiagnosticsError("no replication records supplied")
    qs = (0.05, 0.25, 0.5, 0.75, 0.95)
    quantiles = {
        "d": {q: float(np.quantile(sizes_d, q)) for q in qs},
        "y": {q: float(np.quantile(sizes_y, q)) for q in qs},
    }
    return SupportTrackingTable(
        sizes_d=sizes_d,
        sizes_y=sizes_y,
        design_sparsity=int(design_sparsity),
        quantiles=quantiles,
        max_d=int(sizes_d.max()),
        max_y=int(sizes_y.max()),
    )
