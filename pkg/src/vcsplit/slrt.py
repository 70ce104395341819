"""Split likelihood-ratio tests, randomized decisions, and test inversion.

The statistic is the conditional likelihood of one data part evaluated at an
estimate fitted on the other part, divided by its supremum over the null
set:

    T = L(y0 | y1; theta1_hat) / sup_{theta in null} L(y0 | y1; theta).

E[T] <= 1 under any null parameter, so comparing T to 1/alpha (or to
U/alpha with U uniform, which is strictly more powerful) gives a
finite-sample valid level-alpha test for arbitrary null sets, including
boundary points.  k-fold averaging rotates the roles of the folds and
compares the arithmetic mean of the k statistics to the same threshold.

Everything is carried in log space; the ratio is exponentiated only for
reporting.  One uniform draw is frozen per test or per inverted confidence
interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidParameterError, InvalidSplitError, VcsplitError
from .estimation import (
    FitOptions,
    FitResult,
    NullSpec,
    conditional_objective,
    fit_conditional,
    fit_conditional_sigma2,
    fit_marginal,
    project_capped_simplex,
    sigma2_conditional_objective,
    SIMPLEX_MARGIN,
)
from .model import KernelSet, SharedEigenRep, CrossedRep, _as_array, sigma2_from_theta
from .partition import Partition, block_kernels, make_partition


def to_diagonal_coords(y, kset: KernelSet):
    """Rotate (y, kernels) into diagonal coordinates when the set allows it.

    Dense sets and already-diagonal sets are returned unchanged.  Shared-basis
    sets are rotated by their basis; crossed sets by the closed-form Kronecker
    basis.  Splitting happens after this rotation.
    """
    y = _as_array(y)
    rep = kset.rep
    if isinstance(rep, SharedEigenRep):
        if rep.basis is None:
            return y, kset
        return rep.basis.T @ y, KernelSet.from_eigs(rep.eigs)
    if isinstance(rep, CrossedRep):
        from .structured import CrossedDesign, crossed_eigs

        eig = crossed_eigs(CrossedDesign(rep.dims, rep.n_factors))
        return eig.rotate(y), KernelSet.from_eigs(eig.eigs)
    return y, kset


@dataclass(frozen=True)
class SplitFit:
    """One split statistic with both fitted parameter records."""

    log_stat: float
    alt: FitResult
    null: FitResult

    @property
    def stat(self) -> float:
        return math.exp(self.log_stat) if self.log_stat < 700 else math.inf


def _null_start_from_alt(alt: FitResult, null: NullSpec, m: int) -> np.ndarray:
    """Alternative fit's h2 projected onto the null set (extra start)."""
    free = null.free_indices(m)
    cap = 1.0 - float(null.values.sum()) - SIMPLEX_MARGIN
    start = np.asarray(alt.theta.h2, dtype=float)[free]
    return project_capped_simplex(start, cap)


def split_lrt(y, kset: KernelSet, null: NullSpec, part: Partition,
              opts: FitOptions | None = None, *, unconstrained_alt: bool = False,
              unconstrained_null: bool = False) -> SplitFit:
    """Single-split statistic: fit on y[idx1], evaluate and test on y[idx0].

    The kernel set must be dense or diagonal in the current coordinates
    (rotate first for implicit representations; see to_diagonal_coords).
    The numerator uses the alternative fit's own total variance, never a
    re-profiled one.  Setting the unconstrained flags replaces the
    constrained estimates with their bound-free relaxations; the relaxed
    null estimate can only grow the denominator, which preserves validity.
    """
    opts = opts or FitOptions()
    y = _as_array(y)
    if y.size != kset.n:
        raise InvalidParameterError(f"response length {y.size} does not match n = {kset.n}")
    y0, y1 = y[part.idx0], y[part.idx1]
    m = kset.n_components
    if kset.is_diagonal:
        k0 = kset.restrict(part.idx0)
        k1 = kset.restrict(part.idx1)
        alt = fit_marginal(y1, k1, opts, unconstrained=unconstrained_alt)
        cond = conditional_objective(y0, None, k0)
        cond_arg = k0
    elif kset.kernels is not None:
        blocks = block_kernels(kset, part)
        alt = fit_marginal(y1, kset.restrict(part.idx1), opts,
                           unconstrained=unconstrained_alt)
        cond = conditional_objective(y0, y1, blocks)
        cond_arg = blocks
    else:
        raise VcsplitError("rotate implicit kernel representations before splitting")
    numerator = cond.value_at(alt.theta.h2, alt.theta.tau2)
    start = _null_start_from_alt(alt, null, m) if not unconstrained_null else \
        np.asarray(alt.theta.h2, dtype=float)[null.free_indices(m)]
    null_fit = fit_conditional(y0, y1, cond_arg, null, opts,
                               unconstrained=unconstrained_null,
                               extra_starts=[start])
    return SplitFit(log_stat=numerator - null_fit.loglik, alt=alt, null=null_fit)


def _split_lrt_sigma2(y, kset, pinned, part, opts, *, unconstrained_alt=False) -> SplitFit:
    """Split statistic for a null pinning variance components (absolute scale)."""
    opts = opts or FitOptions()
    y = _as_array(y)
    y0, y1 = y[part.idx0], y[part.idx1]
    if kset.is_diagonal:
        cond_arg = kset.restrict(part.idx0)
        alt = fit_marginal(y1, kset.restrict(part.idx1), opts,
                           unconstrained=unconstrained_alt)
        obj = sigma2_conditional_objective(y0, None, cond_arg)
    else:
        blocks = block_kernels(kset, part)
        cond_arg = blocks
        alt = fit_marginal(y1, kset.restrict(part.idx1), opts,
                           unconstrained=unconstrained_alt)
        obj = sigma2_conditional_objective(y0, y1, blocks)
    s_alt = np.append(alt.theta.tau2 * alt.theta.h2,
                      alt.theta.tau2 * (1.0 - alt.theta.h2.sum()))
    numerator = obj.value(s_alt)
    start = s_alt.copy()
    for i, v in pinned.items():
        start[i] = v
    null_fit = fit_conditional_sigma2(y0, y1, cond_arg, pinned, opts,
                                      extra_starts=[start])
    return SplitFit(log_stat=numerator - null_fit.loglik, alt=alt, null=null_fit)


def randomized_decision(stat: float, alpha: float, seed_u: int):
    """Draw the uniform threshold once and compare; returns (u, reject)."""
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"alpha must be in (0, 1), got {alpha}")
    u = draw_u(seed_u)
    return u, bool(stat > u / alpha)


def draw_u(seed_u: int) -> float:
    """Seeded uniform draw on (0, 1)."""
    rng = np.random.default_rng(seed_u)
    u = float(rng.uniform())
    while u == 0.0:  # pragma: no cover - probability zero
        u = float(rng.uniform())
    return u


def p_value(stat: float, u: float = 1.0) -> float:
    """Smallest alpha at which the (randomized) test rejects: min(1, u/stat)."""
    if stat <= 0.0:
        raise InvalidParameterError("statistic must be positive")
    if not 0.0 < u <= 1.0:
        raise InvalidParameterError("u must be in (0, 1]")
    return min(1.0, u / stat)


def _p_value_log(log_stat: float, u: float) -> float:
    return math.exp(min(0.0, math.log(u) - log_stat))


@dataclass(frozen=True)
class SlrtResult:
    """Outcome of a (k-fold) randomized split likelihood-ratio test."""

    stat: float
    log_stat: float
    theta1: tuple[FitResult, ...]
    theta0: tuple[FitResult, ...]
    u: float
    alpha: float
    reject: bool
    p_value: float
    seed_split: int
    seed_u: int
    k: int
    fold_log_stats: tuple[float, ...] = ()


def make_folds(n: int, k: int, seed: int) -> list[Partition]:
    """k near-equal seeded folds; fold j is idx1 (fit part), the rest idx0."""
    if k < 1:
        raise InvalidSplitError(f"k must be >= 1, got {k}")
    if k == 1:
        return [make_partition(n, n // 2, seed)]
    if n < 2 * k:
        raise InvalidSplitError(f"need n >= 2k, got n = {n}, k = {k}")
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.linspace(0, n, k + 1).astype(int)
    parts = []
    for j in range(k):
        fold = np.sort(perm[bounds[j]:bounds[j + 1]])
        if fold.size < 1:
            raise InvalidSplitError(f"fold {j} is empty")
        mask = np.ones(n, dtype=bool)
        mask[fold] = False
        rest = np.nonzero(mask)[0]
        parts.append(Partition(idx0=rest, idx1=fold, n0=rest.size, n1=fold.size,
                               seed=int(seed)))
    return parts


def _mean_log_stat(fold_logs) -> float:
    return float(logsumexp(fold_logs) - math.log(len(fold_logs)))


def kfold_slrt(y, kset: KernelSet, null: NullSpec, k: int, seed: int, *,
               alpha: float = 0.05, seed_u: int | None = None,
               opts: FitOptions | None = None, folds: list[Partition] | None = None,
               unconstrained_alt: bool = False, unconstrained_null: bool = False,
               sigma2_pins: dict[int, float] | None = None) -> SlrtResult:
    """k-fold randomized split LRT; k = 1 is a single 50/50 split.

    Each fold takes the role of the fitting part once; the statistics are
    averaged on the ratio scale and the average is compared to u/alpha.
    ``folds`` overrides the seeded uniform folding (hook for balanced
    designs).  ``sigma2_pins`` switches the null to absolute variance
    components pinned at the given values (used for sd-scale inversion).
    """
    if seed_u is None:
        seed_u = seed + 1
    y, kset = to_diagonal_coords(y, kset)
    parts = folds if folds is not None else make_folds(kset.n, k, seed)
    k_eff = len(parts)
    fits = []
    for j, part in enumerate(parts):
        try:
            if sigma2_pins is None:
                fits.append(split_lrt(y, kset, null, part, opts,
                                      unconstrained_alt=unconstrained_alt,
                                      unconstrained_null=unconstrained_null))
            else:
                fits.append(_split_lrt_sigma2(y, kset, sigma2_pins, part, opts,
                                              unconstrained_alt=unconstrained_alt))
        except VcsplitError as e:
            raise VcsplitError(f"fold {j}: {e}") from e
    fold_logs = tuple(f.log_stat for f in fits)
    log_stat = _mean_log_stat(fold_logs)
    u = draw_u(seed_u)
    reject = log_stat > math.log(u) - math.log(alpha)
    p = _p_value_log(log_stat, u)
    stat = math.exp(log_stat) if log_stat < 700 else math.inf
    return SlrtResult(
        stat=stat, log_stat=log_stat,
        theta1=tuple(f.alt for f in fits), theta0=tuple(f.null for f in fits),
        u=u, alpha=alpha, reject=bool(reject), p_value=p,
        seed_split=int(seed), seed_u=int(seed_u), k=k_eff,
        fold_log_stats=fold_logs,
    )


# ---------------------------------------------------------------------------
# Confidence intervals by test inversion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CiResult:
    """Acceptance set of a frozen-randomness test over a grid of null values.

    lower/upper summarize the set as its extreme points, refined by bisection
    at the boundary crossings; the full curve is kept for plotting and for
    width distributions.  ``empty=True`` flags an empty acceptance set (no
    grid point accepted) -- possible by construction and reported as-is.
    """

    component: int
    scale: str
    alpha: float
    u: float
    k: int
    grid: np.ndarray
    log_stats: np.ndarray
    log_threshold: float
    lower: float
    upper: float
    empty: bool
    seed_split: int
    seed_u: int

    @property
    def nonrandomized_log_threshold(self) -> float:
        return -math.log(self.alpha)


class _FrozenCurve:
    """Per-fold preprocessing for evaluating the statistic along a null grid.

    Folds, alternative fits and the uniform draw are computed once; each
    grid evaluation refits only the null estimate, warm-started from the
    previous grid point.
    """

    def __init__(self, y, kset, component, scale, k, seed, opts):
        if scale not in ("h2", "var", "sd"):
            raise InvalidParameterError(f"unknown scale {scale!r}")
        y, kset = to_diagonal_coords(y, kset)
        self.kset = kset
        self.scale = scale
        self.component = int(component)
        if not 0 <= self.component < kset.n_components:
            raise InvalidParameterError(
                f"component must be in [0, {kset.n_components}), got {component}"
            )
        self.opts = opts or FitOptions()
        self.parts = make_folds(kset.n, k, seed)
        self.fold_data = []
        for part in self.parts:
            y0, y1 = y[part.idx0], y[part.idx1]
            if kset.is_diagonal:
                cond_arg = kset.restrict(part.idx0)
                obj_h2 = conditional_objective(y0, None, cond_arg)
                obj_s2 = sigma2_conditional_objective(y0, None, cond_arg)
            else:
                cond_arg = block_kernels(kset, part)
                obj_h2 = conditional_objective(y0, y1, cond_arg)
                obj_s2 = sigma2_conditional_objective(y0, y1, cond_arg)
            alt = fit_marginal(y1, kset.restrict(part.idx1), self.opts)
            s_alt = sigma2_from_theta(alt.theta).sigma2
            num_h2 = obj_h2.value_at(alt.theta.h2, alt.theta.tau2)
            num_s2 = obj_s2.value(s_alt)
            self.fold_data.append(
                dict(part=part, y0=y0, y1=y1, cond_arg=cond_arg, alt=alt,
                     s_alt=s_alt, num_h2=num_h2, num_s2=num_s2, warm=None)
            )

    def log_stat(self, value: float) -> float:
        logs = []
        for fd in self.fold_data:
            if self.scale == "h2":
                null = NullSpec.fix({self.component: float(value)})
                m = self.kset.n_components
                starts = [_null_start_from_alt(fd["alt"], null, m)]
                if fd["warm"] is not None:
                    starts.append(fd["warm"])
                fit0 = fit_conditional(fd["y0"], fd["y1"], fd["cond_arg"], null,
                                       self.opts, extra_starts=starts)
                free = null.free_indices(m)
                fd["warm"] = np.asarray(fit0.theta.h2, dtype=float)[free]
                logs.append(fd["num_h2"] - fit0.loglik)
            else:
                v = float(value) ** 2 if self.scale == "sd" else float(value)
                pins = {self.component: v}
                start = fd["s_alt"].copy()
                start[self.component] = v
                starts = [start]
                if fd["warm"] is not None:
                    w = fd["warm"].copy()
                    w[self.component] = v
                    starts.append(w)
                fit0 = fit_conditional_sigma2(fd["y0"], fd["y1"], fd["cond_arg"],
                                              pins, self.opts, extra_starts=starts)
                fd["warm"] = fit0.sigma2
                logs.append(fd["num_s2"] - fit0.loglik)
        return _mean_log_stat(logs)


def _refine_boundary(curve_fn, accepted_x, rejected_x, log_thr, tol):
    """Bisect the acceptance boundary between an accepted and a rejected point."""
    lo, hi = rejected_x, accepted_x
    while abs(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        if curve_fn(mid) <= log_thr:
            hi = mid
        else:
            lo = mid
    return hi


def confidence_interval(y, kset: KernelSet, component: int, alpha: float = 0.05,
                        grid=None, k: int = 1, seed: int = 0, *,
                        seed_u: int | None = None, scale: str = "h2",
                        opts: FitOptions | None = None,
                        refine_tol: float = 1e-4) -> CiResult:
    """Invert the k-fold randomized split LRT over a grid of null values.

    All random elements (folds and the uniform threshold) are frozen across
    the grid.  Returns the acceptance set summarized by its smallest and
    largest points (boundary crossings bisected to ``refine_tol``) together
    with the full statistic curve.
    """
    if seed_u is None:
        seed_u = seed + 1
    if grid is None:
        grid = np.linspace(0.0, 0.95, 20) if scale == "h2" else None
    if grid is None:
        raise InvalidParameterError("a grid must be supplied for var/sd scales")
    if isinstance(grid, tuple) and len(grid) == 3:
        grid = np.linspace(grid[0], grid[1], int(grid[2]))
    grid = np.asarray(grid, dtype=float)
    if scale == "h2" and np.any(grid >= 1.0 - SIMPLEX_MARGIN):
        raise InvalidParameterError("h2-scale grid values must be < 1")
    curve = _FrozenCurve(y, kset, component, scale, k, seed, opts)
    log_stats = np.array([curve.log_stat(g) for g in grid])
    u = draw_u(seed_u)
    log_thr = math.log(u) - math.log(alpha)
    accepted = log_stats <= log_thr
    if not accepted.any():
        return CiResult(component=component, scale=scale, alpha=alpha, u=u, k=k,
                        grid=grid, log_stats=log_stats, log_threshold=log_thr,
                        lower=math.nan, upper=math.nan, empty=True,
                        seed_split=int(seed), seed_u=int(seed_u))
    first = int(np.argmax(accepted))
    last = int(len(grid) - 1 - np.argmax(accepted[::-1]))
    lower = grid[first]
    if first > 0:
        lower = _refine_boundary(curve.log_stat, grid[first], grid[first - 1],
                                 log_thr, refine_tol)
    upper = grid[last]
    if last < len(grid) - 1:
        upper = _refine_boundary(curve.log_stat, grid[last], grid[last + 1],
                                 log_thr, refine_tol)
    return CiResult(component=component, scale=scale, alpha=alpha, u=u, k=k,
                    grid=grid, log_stats=log_stats, log_threshold=log_thr,
                    lower=float(lower), upper=float(upper), empty=False,
                    seed_split=int(seed), seed_u=int(seed_u))


def acceptance_width(grid, log_stats, alpha: float, u: float) -> float:
    """Hull width of the acceptance set on a frozen curve (interpolated).

    The curve is linearly interpolated between grid points to locate the
    outermost threshold crossings; the width is their distance (0 when no
    point is accepted, the full grid span when all are).
    """
    grid = np.asarray(grid, dtype=float)
    ls = np.asarray(log_stats, dtype=float)
    thr = math.log(u) - math.log(alpha)
    acc = ls <= thr
    if not acc.any():
        return 0.0
    first = int(np.argmax(acc))
    last = int(len(grid) - 1 - np.argmax(acc[::-1]))
    left = grid[first]
    if first > 0:
        x0, x1 = grid[first - 1], grid[first]
        l0, l1 = ls[first - 1], ls[first]
        left = x0 + (l0 - thr) * (x1 - x0) / (l0 - l1)
    right = grid[last]
    if last < len(grid) - 1:
        x0, x1 = grid[last], grid[last + 1]
        l0, l1 = ls[last], ls[last + 1]
        right = x0 + (thr - l0) * (x1 - x0) / (l1 - l0)
    return float(right - left)


def ci_width_distribution(grid, log_stats, alpha: float, n_draws: int,
                          seed: int) -> np.ndarray:
    """Acceptance-set widths over seeded uniform threshold draws.

    Every width is at most the non-randomized width (the u = 1 endpoint of
    the same curve).
    """
    rng = np.random.default_rng(seed)
    us = rng.uniform(size=int(n_draws))
    us[us == 0.0] = 0.5  # pragma: no cover - probability zero
    return np.array([acceptance_width(grid, log_stats, alpha, float(u)) for u in us])
