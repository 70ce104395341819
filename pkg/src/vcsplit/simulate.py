"""Seeded data generation, kernel generators and Monte Carlo experiments.

Three experiment families are provided:

* coverage: validity of the randomized split-LRT interval across truth
  configurations (including boundary and near-boundary nuisance values);
* power: rejection curves under exact kernels, spectrally truncated
  kernels, and bound-free (unconstrained) estimation;
* timing: wall-clock comparison of naive dense, diagonal-under-the-null and
  fully diagonal implementations of the same statistic.

Every experiment is reproducible from its spec and master seed; replication
r draws its data / split / threshold streams from SeedSequence((seed, tag,
r)), so parallel and serial execution agree.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import InvalidDesignError, SingularCovarianceError, VcsplitError
from .estimation import FitOptions, NullSpec, fit_marginal, fit_null_1d, fit_conditional
from .estimation import conditional_objective
from .model import KernelSet, Sigma2Param, ThetaParam, _as_array
from .partition import make_partition, block_kernels
from .slrt import (
    _null_start_from_alt,
    draw_u,
    kfold_slrt,
    make_folds,
    split_lrt,
    to_diagonal_coords,
)


def _rep_seeds(master: int, tag: int, rep: int, count: int = 3) -> list[int]:
    """Independent integer seeds for one replication's random elements."""
    ss = np.random.SeedSequence((int(master), int(tag), int(rep)))
    return [int(s) for s in ss.generate_state(count, dtype=np.uint64)]


# ---------------------------------------------------------------------------
# Data generation and kernel generators
# ---------------------------------------------------------------------------


def gen_data(param, kset: KernelSet, seed: int) -> np.ndarray:
    """Draw y ~ N(0, Sigma(param)) with a seeded standard-normal stream.

    Diagonal representations use per-coordinate scaling; shared-basis and
    crossed representations generate in the eigenbasis and rotate back; dense
    kernels use a Cholesky factor of the assembled covariance.
    """
    rng = np.random.default_rng(seed)
    if isinstance(param, ThetaParam):
        h2, tau2 = param.h2, param.tau2
        sigma2 = np.append(tau2 * h2, tau2 * (1.0 - h2.sum()))
    elif isinstance(param, Sigma2Param):
        sigma2 = param.sigma2
    else:
        raise InvalidDesignError("param must be ThetaParam or Sigma2Param")
    z = rng.standard_normal(kset.n)
    if kset.is_diagonal:
        lam = kset.eig_matrix()
        d = lam @ sigma2[:-1] + sigma2[-1]
        return np.sqrt(d) * z
    if kset.kernels is None:
        from .structured import CrossedDesign, crossed_eigs

        rep = kset.rep
        if hasattr(rep, "basis") and rep.basis is not None:
            lam = rep.eigs
            d = lam @ sigma2[:-1] + sigma2[-1]
            return rep.basis @ (np.sqrt(d) * z)
        eig = crossed_eigs(CrossedDesign(rep.dims, rep.n_factors))
        d = eig.eigs @ sigma2[:-1] + sigma2[-1]
        return eig.rotate_back(np.sqrt(d) * z)
    cov = sigma2[-1] * np.eye(kset.n)
    for sv, K in zip(sigma2[:-1], kset.dense_kernels()):
        if sv != 0.0:
            cov += sv * K
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise SingularCovarianceError(f"simulation covariance not PD: {e}") from None
    return L @ z


def ar1_eigen_kernel(n: int, rho: float) -> np.ndarray:
    """Eigenvalues (descending) of the AR(1) correlation matrix rho^|i-j|."""
    if not abs(rho) < 1.0:
        raise InvalidDesignError(f"|rho| must be < 1, got {rho}")
    if n == 1:
        return np.array([1.0])
    A = scipy.linalg.toeplitz(rho ** np.arange(n))
    w = np.linalg.eigvalsh(A)
    return np.maximum(w[::-1], 0.0)


def spiked_eigenvalues(n: int, q: int, a1: float, a2: float, a3: float,
                       c: float) -> np.ndarray:
    """Descending spectrum: q leading values evenly spaced on [a2, a3], the
    trailing n - q evenly spaced on (0, a1] divided by c."""
    if not 0 < q < n:
        raise InvalidDesignError(f"q must be in (0, n), got {q}")
    if not (0 < a1 and 0 < a2 < a3 and c >= 1.0):
        raise InvalidDesignError("need 0 < a1, 0 < a2 < a3 and c >= 1")
    leading = np.linspace(a3, a2, q)
    trailing = np.linspace(a1, 0.0, n - q, endpoint=False) / c
    return np.concatenate([leading, trailing])


def spiked_kernel_pair(n: int, q1: int, q2: int, a1: float = 5.0, a2: float = 5.0,
                       a3: float = 10.0, c: float = 100.0, seed: int = 0) -> KernelSet:
    """Two dense kernels with spiked spectra sharing leading coordinates.

    The first kernel is diagonal; the second has the same spectral recipe but
    its trailing eigenspace is rotated by a seeded Haar-distributed block, so
    the pair is only approximately jointly diagonalizable.  Truncating the
    trailing spectra makes both exactly diagonal.
    """
    if q1 == q2:
        raise InvalidDesignError("q1 must differ from q2 (identifiability)")
    lam1 = spiked_eigenvalues(n, q1, a1, a2, a3, c)
    lam2 = spiked_eigenvalues(n, q2, a1, a2, a3, c)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n - q2, n - q2))
    o2, _, _ = np.linalg.svd(g)
    K1 = np.diag(lam1)
    V = np.zeros((n, n))
    V[:q2, :q2] = np.eye(q2)
    V[q2:, q2:] = o2
    K2 = (V * lam2) @ V.T
    K2 = 0.5 * (K2 + K2.T)
    return KernelSet.from_dense([K1, K2], validate=False)


def truncated_pair_eigs(n: int, q1: int, q2: int, a1: float = 5.0, a2: float = 5.0,
                        a3: float = 10.0, c: float = 100.0) -> np.ndarray:
    """Spectra of the truncated spiked pair (exactly diagonal, shape (n, 2))."""
    lam1 = spiked_eigenvalues(n, q1, a1, a2, a3, c)
    lam2 = spiked_eigenvalues(n, q2, a1, a2, a3, c)
    lam1[q1:] = 0.0
    lam2[q2:] = 0.0
    return np.column_stack([lam1, lam2])


def disjoint_support_kernels(n: int, n_components: int, rho: float = 0.5,
                             seed: int = 0):
    """Jointly diagonalizable kernels with disjoint AR(1)-eigenvalue supports.

    Returns (lam, basis): lam is (n, M) with floor(n / (M + 1)) nonzero
    entries per column on disjoint random index sets (so the columns multiply
    to zero), and basis holds the AR(1) eigenvectors; the dense kernels are
    basis @ diag(lam[:, m]) @ basis.T.
    """
    A = scipy.linalg.toeplitz(rho ** np.arange(n))
    w, V = np.linalg.eigh(A)
    w, V = np.maximum(w[::-1], 0.0), V[:, ::-1]
    size = n // (n_components + 1)
    perm = np.random.default_rng(seed).permutation(n)
    lam = np.zeros((n, n_components))
    for m_i in range(n_components):
        support = perm[m_i * size:(m_i + 1) * size]
        lam[support, m_i] = w[support]
    return lam, V


# ---------------------------------------------------------------------------
# Experiment specs and runners
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """Configuration for one Monte Carlo experiment (see the run_* functions)."""

    scenario: str
    n: int = 300
    replications: int = 1000
    alpha: float = 0.05
    seed: int = 20260810
    tau2: float = 1.0
    # coverage: kernel AR(1) correlations and (h2_target, h2_nuisance) truths
    rho: tuple[float, float] = (0.95, 0.5)
    truth_grid: tuple[tuple[float, float], ...] = (
        (0.0, 0.0), (0.3, 0.0), (0.6, 0.0), (0.9, 0.0), (0.0, 0.5), (0.0, 0.9),
    )
    # power: spiked-kernel shape, data truth and null grid for component 0
    q: tuple[int, int] = (30, 40)
    spike: tuple[float, float, float, float] = (5.0, 5.0, 10.0, 100.0)
    truth_h2: tuple[float, ...] = (0.0, 0.2)
    null_grid: tuple[float, ...] = (0.0, 0.15, 0.3, 0.45)
    variants: tuple[str, ...] = ("exact", "approx", "unconstrained")
    # timing
    sizes: tuple[int, ...] = (500, 1000, 2000)
    n_components: int = 2
    timing_reps: int = 5
    opts: FitOptions = field(default_factory=FitOptions)
    threads: int = 1


def write_table(rows: list[dict], path, columns=None) -> None:
    """Write rows as a TSV plot-data table."""
    if not rows:
        raise VcsplitError("no rows to write")
    cols = columns or list(rows[0].keys())
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _binomial_se(p_hat: float, n: int) -> float:
    return math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / n)


def _map_serial_or_parallel(fn, args_list, threads: int):
    if threads <= 1 or len(args_list) <= 1:
        return [fn(a) for a in args_list]
    with ProcessPoolExecutor(max_workers=threads, initializer=_limit_blas) as ex:
        return list(ex.map(fn, args_list, chunksize=max(1, len(args_list) // (4 * threads))))


_BLAS_LIMIT = None


def _limit_blas():  # pragma: no cover - exercised only in worker processes
    """Pin worker BLAS pools to one thread (the processes are the parallelism)."""
    import os

    global _BLAS_LIMIT
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"
    try:
        import threadpoolctl

        _BLAS_LIMIT = threadpoolctl.threadpool_limits(1)
    except ImportError:
        pass


# -- coverage ----------------------------------------------------------------


def _coverage_rep(args):
    (lam, truth, tau2, alpha, seeds, opts) = args
    kset = KernelSet.from_eigs(lam)
    theta = ThetaParam(h2=np.array(truth), tau2=tau2)
    y = gen_data(theta, kset, seeds[0])
    part = make_partition(kset.n, kset.n // 2, seeds[1])
    fit = split_lrt(y, kset, NullSpec.fix({0: truth[0]}), part, opts)
    u = draw_u(seeds[2])
    covered_rand = fit.log_stat <= math.log(u) - math.log(alpha)
    covered_fixed = fit.log_stat <= -math.log(alpha)
    return covered_rand, covered_fixed


def run_coverage(spec: ExperimentSpec) -> list[dict]:
    """Interval coverage at each truth configuration (randomized and not).

    The true target value is covered by the inverted interval exactly when
    the test of the true null accepts, so each replication runs one test at
    the truth rather than a full grid inversion.
    """
    lam = np.column_stack([ar1_eigen_kernel(spec.n, r) for r in spec.rho])
    rows = []
    for p_i, truth in enumerate(spec.truth_grid):
        args = [
            (lam, truth, spec.tau2, spec.alpha,
             _rep_seeds(spec.seed, p_i, r), spec.opts)
            for r in range(spec.replications)
        ]
        results = _map_serial_or_parallel(_coverage_rep, args, spec.threads)
        n_ok = len(results)
        cov_r = sum(r[0] for r in results) / n_ok
        cov_f = sum(r[1] for r in results) / n_ok
        rows.append(dict(
            value=truth[0], nuisance=truth[1],
            estimate=cov_r, se=_binomial_se(cov_r, n_ok),
            lower=cov_r - 1.96 * _binomial_se(cov_r, n_ok),
            upper=cov_r + 1.96 * _binomial_se(cov_r, n_ok),
            estimate_fixed=cov_f, se_fixed=_binomial_se(cov_f, n_ok),
            replications=n_ok,
        ))
    return rows


# -- power --------------------------------------------------------------------


def _power_rep(args):
    (kernels_dense, lam_trunc, truth, tau2, null_grid, alpha, variants,
     seeds, opts) = args
    kset = KernelSet.from_dense(kernels_dense, validate=False)
    theta = ThetaParam(h2=np.array(truth), tau2=tau2)
    y = gen_data(theta, kset, seeds[0])
    part = make_partition(kset.n, kset.n // 2, seeds[1])
    u = draw_u(seeds[2])
    out = {}
    for variant in variants:
        if variant == "approx":
            vk = KernelSet.from_eigs(lam_trunc)
        else:
            vk = kset
        unconstrained = variant == "unconstrained"
        y1 = y[part.idx1]
        y0 = y[part.idx0]
        if vk.is_diagonal:
            cond_arg = vk.restrict(part.idx0)
            alt = fit_marginal(y1, vk.restrict(part.idx1), opts,
                               unconstrained=unconstrained)
            cond = conditional_objective(y0, None, cond_arg)
        else:
            cond_arg = block_kernels(vk, part)
            alt = fit_marginal(y1, vk.restrict(part.idx1), opts,
                               unconstrained=unconstrained)
            cond = conditional_objective(y0, y1, cond_arg)
        numerator = cond.value_at(alt.theta.h2, alt.theta.tau2)
        rejects = []
        warm = None
        for h0 in null_grid:
            null = NullSpec.fix({0: float(h0)})
            starts = [] if warm is None else [warm]
            free = null.free_indices(vk.n_components)
            alt_start = np.asarray(alt.theta.h2, float)[free]
            starts.append(alt_start if unconstrained
                          else _null_start_from_alt(alt, null, vk.n_components))
            fit0 = fit_conditional(y0, y1, cond_arg, null, opts,
                                   unconstrained=unconstrained,
                                   extra_starts=starts)
            warm = np.asarray(fit0.theta.h2, float)[free]
            log_t = numerator - fit0.loglik
            rejects.append((log_t > math.log(u) - math.log(alpha),
                            log_t > -math.log(alpha)))
        out[variant] = rejects
    return out


def run_power(spec: ExperimentSpec) -> list[dict]:
    """Rejection curves over the null grid for each requested variant.

    Data are always generated from the exact kernels; the approx variant
    tests with the truncated (exactly diagonal) kernels, the unconstrained
    variant with bound-free estimates.  Data, split and threshold are shared
    across variants within a replication.
    """
    q1, q2 = spec.q
    a1, a2, a3, c = spec.spike
    kset = spiked_kernel_pair(spec.n, q1, q2, a1, a2, a3, c,
                              seed=int(np.random.SeedSequence((spec.seed, 777)).generate_state(1)[0]))
    lam_trunc = truncated_pair_eigs(spec.n, q1, q2, a1, a2, a3, c)
    kernels_dense = kset.dense_kernels()
    args = [
        (kernels_dense, lam_trunc, spec.truth_h2, spec.tau2, spec.null_grid,
         spec.alpha, spec.variants, _rep_seeds(spec.seed, 1, r), spec.opts)
        for r in range(spec.replications)
    ]
    results = _map_serial_or_parallel(_power_rep, args, spec.threads)
    rows = []
    for variant in spec.variants:
        for g_i, h0 in enumerate(spec.null_grid):
            rej = [res[variant][g_i][0] for res in results]
            rej_fixed = [res[variant][g_i][1] for res in results]
            p_hat = sum(rej) / len(rej)
            p_fixed = sum(rej_fixed) / len(rej_fixed)
            se = _binomial_se(p_hat, len(rej))
            rows.append(dict(
                variant=variant, value=float(h0), estimate=p_hat, se=se,
                lower=p_hat - 1.96 * se, upper=p_hat + 1.96 * se,
                estimate_fixed=p_fixed, se_fixed=_binomial_se(p_fixed, len(rej)),
                replications=len(rej),
            ))
    return rows


# -- timing --------------------------------------------------------------------


def _timing_problem(n: int, m: int, seed: int, tau2: float = 1.0):
    """One timing instance in the jointly diagonal coordinate system."""
    lam, _ = disjoint_support_kernels(n, m, rho=0.5, seed=seed)
    truth = np.zeros(m)
    truth[-1] = 0.2
    seeds = _rep_seeds(seed, 99, 0)
    kset = KernelSet.from_eigs(lam)
    y = gen_data(ThetaParam(h2=truth, tau2=tau2), kset, seeds[0])
    part = make_partition(n, n // 2, seeds[1])
    null = NullSpec.zeros(range(m - 1))
    return y, lam, part, null


def _stat_naive(y, lam, part, null, opts):
    """Dense split LRT: kernels handed over as dense arrays."""
    kset = KernelSet.from_dense([np.diag(lam[:, j]) for j in range(lam.shape[1])],
                                validate=False)
    return split_lrt(y, kset, null, part, opts).log_stat


def _stat_nulldiag(y, lam, part, null, opts):
    """Diagonal under the null only: 1-d null fit, dense alternative fit."""
    m = lam.shape[1]
    kset = KernelSet.from_dense([np.diag(lam[:, j]) for j in range(m)],
                                validate=False)
    y0, y1 = y[part.idx0], y[part.idx1]
    alt = fit_marginal(y1, kset.restrict(part.idx1), opts)
    blocks = block_kernels(kset, part)
    cond = conditional_objective(y0, y1, blocks)
    numerator = cond.value_at(alt.theta.h2, alt.theta.tau2)
    h_free, tau2 = fit_null_1d(y0, lam[part.idx0, m - 1])
    h2_null = np.zeros(m)
    h2_null[m - 1] = h_free
    denominator = cond.value_at(h2_null, tau2)
    return numerator - denominator


def _stat_fulldiag(y, lam, part, null, opts):
    """Fully diagonal split LRT (O(n) likelihood evaluations)."""
    kset = KernelSet.from_eigs(lam)
    return split_lrt(y, kset, null, part, opts).log_stat


_TIMING_METHODS = {
    "naive": _stat_naive,
    "nulldiag": _stat_nulldiag,
    "fulldiag": _stat_fulldiag,
}


def run_timing(spec: ExperimentSpec) -> list[dict]:
    """Wall-clock times of three implementations of one split statistic.

    The problem is built once in the jointly diagonal coordinate system and
    every method receives the same response and split, in the representation
    it exploits (dense arrays for the naive path).  Cross-method agreement of
    the log statistics (1e-4) is asserted before any time is recorded; one
    warmup run per cell is discarded.  Single-start fits keep the optimizer
    trajectory identical across methods.
    """
    opts = replace(spec.opts, n_starts=1)
    rows = []
    for n in spec.sizes:
        y, lam, part, null = _timing_problem(n, spec.n_components, spec.seed)
        stats = {}
        for name, fn in _TIMING_METHODS.items():
            stats[name] = fn(y, lam, part, null, opts)
        ref = stats["naive"]
        for name, val in stats.items():
            if abs(val - ref) > 1e-4:
                raise VcsplitError(
                    f"cross-path statistic mismatch at n = {n}: "
                    f"{name} = {val:.6f} vs naive = {ref:.6f}"
                )
        for name, fn in _TIMING_METHODS.items():
            times = []
            for _ in range(spec.timing_reps + 1):
                t0 = time.perf_counter()
                fn(y, lam, part, null, opts)
                times.append(time.perf_counter() - t0)
            times = times[1:]  # discard warmup
            rows.append(dict(
                n=n, method=name,
                mean_seconds=float(np.mean(times)),
                sd_seconds=float(np.std(times, ddof=1)) if len(times) > 1 else 0.0,
                reps=len(times), log_stat=stats[name],
            ))
    return rows


def run_experiment(spec: ExperimentSpec) -> list[dict]:
    runner = {"coverage": run_coverage, "power": run_power, "timing": run_timing}
    if spec.scenario not in runner:
        raise InvalidDesignError(f"unknown scenario {spec.scenario!r}")
    return runner[spec.scenario](spec)
