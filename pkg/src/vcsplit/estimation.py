"""Maximum-likelihood fitting of variance-component parameters.

All fitters maximize a profile objective over the variance proportions h2
(the total variance tau2 has a closed-form partial maximizer and is profiled
out) by projected gradient ascent with Armijo backtracking.  By the envelope
identity, the gradient of the profile objective equals the h2-part of the
full gradient evaluated at the profiled tau2.

Objectives come in a dense flavor (Cholesky factorizations per evaluation)
and a diagonal flavor (O(n*M) per evaluation) for kernels that are diagonal
in the working basis.  The conditional objective uses the decomposition
l(y0 | y1) = l(y) - l(y1), so it needs only two factorizations per
evaluation and no explicit Schur complement.

A separate family of fitters works directly on the variance-component scale
(sigma2) with selected components pinned to fixed values; these support
test inversion for variance- or sd-scale targets where tau2 cannot be
profiled out.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateDataError,
    InvalidParameterError,
    OptimizationFailureError,
    SingularCovarianceError,
)
from .model import (
    LOG_2PI,
    KernelSet,
    ThetaParam,
    _as_array,
    _solve_chol,
    assemble_psi,
    chol_inverse,
    chol_logdet,
)
from .partition import BlockKernels

_ARMIJO_SLOPE = 1e-4
_SHRINK = 0.5
_STEP_MIN = 1e-14
_STEP_MAX = 1e8
# Margin keeping sum(h2) strictly below 1 so Psi stays PD even when every
# kernel is singular.
SIMPLEX_MARGIN = 1e-8
# Final objectives within this (relative) amount of the best are ties; the
# candidate closest to the origin wins, which pins down flat directions.
_TIE_TOL = 1e-9


@dataclass(frozen=True)
class NullSpec:
    """Constraint set: selected h2 components pinned to fixed values.

    pinned is a sorted tuple of (component index, value) pairs; remaining
    components are free.  An empty NullSpec is the unrestricted model.
    """

    pinned: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        pins = tuple(sorted((int(i), float(v)) for i, v in dict(self.pinned).items())) \
            if isinstance(self.pinned, dict) else \
            tuple(sorted((int(i), float(v)) for i, v in self.pinned))
        idx = [i for i, _ in pins]
        vals = np.array([v for _, v in pins], dtype=float)
        if len(set(idx)) != len(idx) or any(i < 0 for i in idx):
            raise InvalidParameterError("pinned indices must be unique and nonnegative")
        if vals.size and (np.any(vals < 0.0) or vals.sum() >= 1.0):
            raise InvalidParameterError("pinned values must be >= 0 and sum to < 1")
        object.__setattr__(self, "pinned", pins)

    @classmethod
    def none(cls) -> "NullSpec":
        return cls(())

    @classmethod
    def fix(cls, pins: dict[int, float]) -> "NullSpec":
        return cls(tuple(pins.items()))

    @classmethod
    def zeros(cls, indices) -> "NullSpec":
        return cls(tuple((int(i), 0.0) for i in indices))

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.pinned)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.pinned], dtype=float)

    def free_indices(self, m: int) -> np.ndarray:
        pinned = set(self.indices)
        if pinned and max(pinned) >= m:
            raise InvalidParameterError(f"pinned index out of range for M = {m}")
        return np.array([i for i in range(m) if i not in pinned], dtype=int)

    def embed(self, x_free: np.ndarray, m: int) -> np.ndarray:
        full = np.zeros(m)
        for i, v in self.pinned:
            full[i] = v
        full[self.free_indices(m)] = x_free
        return full


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 500
    tol_grad: float = 1e-6
    tol_obj: float = 1e-10
    n_starts: int = 3
    start_seed: int = 0


@dataclass(frozen=True)
class FitResult:
    theta: ThetaParam
    loglik: float
    grad_norm: float
    iterations: int
    converged: bool
    n_starts: int
    constrained: bool
    sigma2: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Profile objectives in h2
# ---------------------------------------------------------------------------


class DenseProfile:
    """Profile log-likelihood of one Gaussian vector, dense kernels."""

    def __init__(self, y, kernels):
        self.y = _as_array(y)
        self.kernels = tuple(np.asarray(K, float) for K in kernels)
        self.n = self.y.size

    def _chol(self, h2):
        psi = assemble_psi(h2, self.kernels, self.n)
        return chol_logdet(psi, what=f"Psi(h2) at h2 = {h2}")

    def profile_value(self, h2):
        L, logdet = self._chol(h2)
        b = _solve_chol(L, self.y)
        quad = float(self.y @ b)
        if quad <= 0.0:
            raise DegenerateDataError("response is identically zero")
        tau2 = quad / self.n
        value = -0.5 * (self.n * LOG_2PI + self.n * math.log(tau2) + logdet + self.n)
        return value, tau2

    def profile_value_grad(self, h2):
        L, logdet = self._chol(h2)
        psi_inv = chol_inverse(L)
        b = psi_inv @ self.y
        quad = float(self.y @ b)
        if quad <= 0.0:
            raise DegenerateDataError("response is identically zero")
        tau2 = quad / self.n
        value = -0.5 * (self.n * LOG_2PI + self.n * math.log(tau2) + logdet + self.n)
        tr_inv = float(np.trace(psi_inv))
        bb = float(b @ b)
        grad = np.empty(len(self.kernels))
        for m_i, K in enumerate(self.kernels):
            tr_m = float(np.einsum("ij,ij->", psi_inv, K))
            qm = float(b @ (K @ b))
            grad[m_i] = -0.5 * ((tr_m - tr_inv) - (qm - bb) / tau2)
        return value, grad, tau2

    def value_at(self, h2, tau2):
        L, logdet = self._chol(h2)
        quad = float(self.y @ _solve_chol(L, self.y))
        return -0.5 * (self.n * LOG_2PI + self.n * math.log(tau2) + logdet + quad / tau2)


class DenseConditionalProfile:
    """Conditional profile log-likelihood of y0 given y1, dense kernels.

    Works in block order [y0; y1] and evaluates the conditional likelihood as
    the difference of the joint and the y1-marginal; tau2 is profiled at its
    conditional partial maximizer (q - q1) / n0.
    """

    def __init__(self, y0, y1, blocks: BlockKernels):
        y0 = _as_array(y0)
        y1 = _as_array(y1)
        self.n0, self.n1 = blocks.n0, blocks.n1
        self.n = self.n0 + self.n1
        self.y = np.concatenate([y0, y1])
        self.kernels = tuple(
            np.block([[k00, k01], [k01.T, k11]])
            for k00, k01, k11 in zip(blocks.k00, blocks.k01, blocks.k11)
        )

    def _chols(self, h2):
        psi = assemble_psi(h2, self.kernels, self.n)
        L, logdet = chol_logdet(psi, what=f"Psi(h2) at h2 = {h2}")
        L1, logdet1 = chol_logdet(psi[self.n0:, self.n0:], what=f"Psi_11(h2) at h2 = {h2}")
        return psi, L, logdet, L1, logdet1

    def _quads(self, L, L1):
        b = _solve_chol(L, self.y)
        b1 = _solve_chol(L1, self.y[self.n0:])
        q = float(self.y @ b)
        q1 = float(self.y[self.n0:] @ b1)
        return b, b1, q, q1

    def profile_value(self, h2):
        _, L, logdet, L1, logdet1 = self._chols(h2)
        _, _, q, q1 = self._quads(L, L1)
        qc = q - q1
        if qc <= 0.0:
            raise DegenerateDataError("conditional residual is exactly zero")
        tau2 = qc / self.n0
        value = -0.5 * (self.n0 * LOG_2PI + self.n0 * math.log(tau2)
                        + (logdet - logdet1) + self.n0)
        return value, tau2

    def profile_value_grad(self, h2):
        psi, L, logdet, L1, logdet1 = self._chols(h2)
        psi_inv = chol_inverse(L)
        psi11_inv = chol_inverse(L1)
        b = psi_inv @ self.y
        b1 = psi11_inv @ self.y[self.n0:]
        q = float(self.y @ b)
        q1 = float(self.y[self.n0:] @ b1)
        qc = q - q1
        if qc <= 0.0:
            raise DegenerateDataError("conditional residual is exactly zero")
        tau2 = qc / self.n0
        value = -0.5 * (self.n0 * LOG_2PI + self.n0 * math.log(tau2)
                        + (logdet - logdet1) + self.n0)
        tr_inv = float(np.trace(psi_inv))
        tr_inv1 = float(np.trace(psi11_inv))
        bb = float(b @ b)
        bb1 = float(b1 @ b1)
        grad = np.empty(len(self.kernels))
        s = slice(self.n0, self.n)
        for m_i, K in enumerate(self.kernels):
            K11 = K[s, s]
            tr_m = float(np.einsum("ij,ij->", psi_inv, K))
            tr_m1 = float(np.einsum("ij,ij->", psi11_inv, K11))
            qm = float(b @ (K @ b))
            qm1 = float(b1 @ (K11 @ b1))
            full = (tr_m - tr_inv) - (qm - bb) / tau2
            marg = (tr_m1 - tr_inv1) - (qm1 - bb1) / tau2
            grad[m_i] = -0.5 * (full - marg)
        return value, grad, tau2

    def value_at(self, h2, tau2):
        _, L, logdet, L1, logdet1 = self._chols(h2)
        _, _, q, q1 = self._quads(L, L1)
        return -0.5 * (self.n0 * LOG_2PI + self.n0 * math.log(tau2)
                       + (logdet - logdet1) + (q - q1) / tau2)


class DiagProfile:
    """Profile log-likelihood with diagonal kernels; O(n*M) per evaluation.

    For kernels diagonal in the working basis, y0 and y1 are independent, so
    this class doubles as the conditional objective on the idx0 coordinates.
    """

    def __init__(self, y, lam):
        self.y2 = _as_array(y) ** 2
        self.lam = np.asarray(lam, dtype=float)
        if self.lam.ndim == 1:
            self.lam = self.lam[:, None]
        self.n = self.y2.size
        self.lam_m1 = self.lam - 1.0

    def _psi(self, h2):
        psi = self.lam @ h2 + (1.0 - float(np.sum(h2)))
        if psi.size and psi.min() <= 0.0:
            raise SingularCovarianceError(
                f"diagonal Psi has nonpositive entry (min {psi.min():.3e}) at h2 = {h2}"
            )
        return psi

    def profile_value(self, h2):
        psi = self._psi(h2)
        quad = float(np.sum(self.y2 / psi))
        if quad <= 0.0:
            raise DegenerateDataError("response is identically zero")
        tau2 = quad / self.n
        value = -0.5 * (self.n * LOG_2PI + self.n * math.log(tau2)
                        + float(np.sum(np.log(psi))) + self.n)
        return value, tau2

    def profile_value_grad(self, h2):
        psi = self._psi(h2)
        quad = float(np.sum(self.y2 / psi))
        if quad <= 0.0:
            raise DegenerateDataError("response is identically zero")
        tau2 = quad / self.n
        value = -0.5 * (self.n * LOG_2PI + self.n * math.log(tau2)
                        + float(np.sum(np.log(psi))) + self.n)
        v = 1.0 / psi - self.y2 / (tau2 * psi**2)
        grad = -0.5 * (self.lam_m1.T @ v)
        return value, grad, tau2

    def value_at(self, h2, tau2):
        psi = self._psi(h2)
        quad = float(np.sum(self.y2 / psi))
        return -0.5 * (self.n * LOG_2PI + self.n * math.log(tau2)
                       + float(np.sum(np.log(psi))) + quad / tau2)


def conditional_objective(y0, y1, blocks_or_kset0):
    """Conditional-likelihood objective for y0 given y1.

    blocks_or_kset0 is either dense BlockKernels or a diagonal KernelSet
    restricted to the idx0 coordinates (in which case y0 is independent of
    y1 and the marginal objective is returned).
    """
    if isinstance(blocks_or_kset0, KernelSet):
        if not blocks_or_kset0.is_diagonal:
            raise InvalidParameterError(
                "conditional objective needs BlockKernels unless kernels are diagonal"
            )
        return DiagProfile(y0, blocks_or_kset0.eig_matrix())
    return DenseConditionalProfile(y0, y1, blocks_or_kset0)


# ---------------------------------------------------------------------------
# Projections and the ascent core
# ---------------------------------------------------------------------------


def project_capped_simplex(x: np.ndarray, cap: float) -> np.ndarray:
    """Euclidean projection onto {v : v >= 0, sum(v) <= cap}."""
    p = np.maximum(x, 0.0)
    if p.sum() <= cap:
        return p
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - cap
    ks = np.arange(1, x.size + 1)
    mask = u - css / ks > 0
    rho = int(ks[mask][-1])
    mu = css[rho - 1] / rho
    return np.maximum(x - mu, 0.0)


def _safe_value(value, x):
    try:
        return value(x)
    except (SingularCovarianceError, DegenerateDataError):
        return -np.inf


def _ascend(value, value_grad, x0, project, opts: FitOptions):
    """Projected gradient ascent with Armijo backtracking from one start.

    Raises SingularCovarianceError / DegenerateDataError if the start itself
    is infeasible; infeasible trial points during the line search are simply
    rejected (the objective is treated as -inf there).
    """
    x = project(np.asarray(x0, dtype=float))
    f, g = value_grad(x)
    t = 1.0
    converged = False
    iterations = 0
    for iterations in range(1, opts.max_iters + 1):
        pg = project(x + g) - x
        if np.max(np.abs(pg), initial=0.0) < opts.tol_grad:
            converged = True
            break
        t = min(t * 2.0, _STEP_MAX)
        accepted = False
        while t >= _STEP_MIN:
            xn = project(x + t * g)
            dx = xn - x
            if np.max(np.abs(dx), initial=0.0) == 0.0:
                break
            fn = _safe_value(value, xn)
            if fn >= f + _ARMIJO_SLOPE * float(g @ dx):
                accepted = True
                break
            t *= _SHRINK
        if not accepted:
            break
        fn, gn = value_grad(xn)
        flat = abs(fn - f) <= opts.tol_obj * max(1.0, abs(fn))
        x, f, g = xn, fn, gn
        if flat:
            converged = True
            break
    pg_norm = float(np.max(np.abs(project(x + g) - x), initial=0.0))
    if pg_norm < opts.tol_grad:
        converged = True
    return x, f, pg_norm, iterations, converged


def _maximize(value, value_grad, starts, project, opts: FitOptions):
    """Run the ascent from several starts; ties go to the point nearest 0."""
    results = []
    first_error = None
    for x0 in starts:
        try:
            results.append(_ascend(value, value_grad, x0, project, opts))
        except DegenerateDataError:
            raise
        except SingularCovarianceError as e:
            first_error = e
    if not results:
        raise OptimizationFailureError(
            f"no feasible starting point ({first_error})"
        )
    best = max(r[1] for r in results)
    tol = _TIE_TOL * max(1.0, abs(best))
    tied = [r for r in results if r[1] >= best - tol]
    chosen = min(tied, key=lambda r: float(np.linalg.norm(r[0])))
    return chosen, len(results)


def _default_starts(d: int, cap: float, opts: FitOptions, m_total: int):
    """Centroid, origin and seeded uniform draws inside the feasible set."""
    starts: list[np.ndarray] = []
    centroid = np.full(d, min(1.0 / (2.0 * max(m_total, 1)), cap / max(d, 1)))
    pool = [centroid, np.zeros(d)]
    rng = np.random.default_rng(opts.start_seed)
    while len(pool) < max(opts.n_starts, 0):
        w = rng.dirichlet(np.ones(d + 1))[:d] if d else np.zeros(0)
        pool.append(0.9 * cap * w)
    starts.extend(pool[: max(opts.n_starts, 0)])
    return starts


def _free_starts(null: NullSpec, m: int, opts: FitOptions, extra_starts, cap: float):
    free = null.free_indices(m)
    d = free.size
    starts = []
    if extra_starts is not None:
        for s in extra_starts:
            s = np.atleast_1d(np.asarray(s, dtype=float))
            starts.append(s[free] if s.size == m else s)
    starts.extend(_default_starts(d, cap, opts, m))
    return free, d, starts


# ---------------------------------------------------------------------------
# Public fitters (h2 scale, tau2 profiled)
# ---------------------------------------------------------------------------


def _fit_profile(objective, m: int, null: NullSpec, opts: FitOptions,
                 unconstrained: bool, extra_starts) -> FitResult:
    cap = 1.0 - float(null.values.sum()) - SIMPLEX_MARGIN
    free, d, starts = _free_starts(null, m, opts, extra_starts, cap)

    def embed(xf):
        return null.embed(xf, m)

    if d == 0:
        f, tau2 = objective.profile_value(embed(np.zeros(0)))
        theta = ThetaParam(h2=embed(np.zeros(0)), tau2=tau2, constrained=True)
        return FitResult(theta=theta, loglik=f, grad_norm=0.0, iterations=0,
                         converged=True, n_starts=0, constrained=True)

    def value(xf):
        return objective.profile_value(embed(xf))[0]

    def value_grad(xf):
        f, g, _ = objective.profile_value_grad(embed(xf))
        return f, g[free]

    if unconstrained:
        def project(x):
            return x
    else:
        def project(x):
            return project_capped_simplex(x, cap)

    (x, f, pg, iters, conv), n_started = _maximize(value, value_grad, starts, project, opts)
    h2 = embed(x)
    _, tau2 = objective.profile_value(h2)
    constrained_ok = not unconstrained
    theta = ThetaParam(h2=h2, tau2=tau2, constrained=constrained_ok)
    return FitResult(theta=theta, loglik=f, grad_norm=pg, iterations=iters,
                     converged=conv, n_starts=n_started, constrained=constrained_ok)


def fit_marginal(y1, kset1: KernelSet, opts: FitOptions | None = None, *,
                 unconstrained: bool = False, extra_starts=None) -> FitResult:
    """Maximize the marginal likelihood of y1 over the full parameter set."""
    opts = opts or FitOptions()
    y1 = _as_array(y1)
    m = kset1.n_components
    if y1.size < m + 1:
        warnings.warn(
            f"fitting {m + 1} variance parameters from {y1.size} observations",
            stacklevel=2,
        )
    if kset1.is_diagonal:
        obj = DiagProfile(y1, kset1.eig_matrix())
    else:
        obj = DenseProfile(y1, kset1.dense_kernels())
    return _fit_profile(obj, m, NullSpec.none(), opts, unconstrained, extra_starts)


def fit_conditional(y0, y1, blocks_or_kset0, null: NullSpec | None = None,
                    opts: FitOptions | None = None, *, unconstrained: bool = False,
                    extra_starts=None) -> FitResult:
    """Maximize the conditional likelihood of y0 given y1 over the null set.

    Components pinned by ``null`` are held fixed; the rest (and tau2, in
    closed form) are optimized.  With ``unconstrained=True`` the bound
    constraints on the free components are dropped (feasibility is limited
    only by positive definiteness, enforced through the line search).
    """
    opts = opts or FitOptions()
    null = null or NullSpec.none()
    obj = conditional_objective(y0, y1, blocks_or_kset0)
    return _fit_profile(obj, blocks_or_kset0.n_components, null, opts,
                        unconstrained, extra_starts)


def fit_unconstrained(objective: str, *args, **kwargs) -> FitResult:
    """Relaxed (bound-free) variant of fit_marginal / fit_conditional."""
    kwargs["unconstrained"] = True
    if objective == "marginal":
        return fit_marginal(*args, **kwargs)
    if objective == "conditional":
        return fit_conditional(*args, **kwargs)
    raise ValueError(f"unknown objective {objective!r}")


# ---------------------------------------------------------------------------
# One-dimensional null fitter (diagonal kernels, all but one component pinned)
# ---------------------------------------------------------------------------


def fit_null_1d(y0, lam, grid_size: int = 513, tol: float = 1e-10):
    """Maximize the one-free-component diagonal profile likelihood.

    For a single free proportion h with per-coordinate variances
    tau2 * (h * lam + 1 - h), the profile objective over h in [0, 1) is
    scanned on a grid and the bracketing interval refined by bisection on the
    derivative (falling back to golden-section if the derivative does not
    change sign).  Returns (h, tau2).
    """
    y2 = _as_array(y0) ** 2
    lam = np.asarray(lam, dtype=float).ravel()
    n0 = y2.size
    if lam.size != n0:
        raise InvalidParameterError("eigenvalue vector length must match y0")
    if not np.any(y2 > 0.0):
        raise DegenerateDataError("response is identically zero")
    lam_m1 = lam - 1.0

    def tau2_of(h):
        return float(np.sum(y2 / (h * lam_m1 + 1.0))) / n0

    def prof(h):
        w = h * lam_m1 + 1.0
        if w.min() <= 0.0:
            return -np.inf
        tau2 = float(np.sum(y2 / w)) / n0
        return -0.5 * (n0 * LOG_2PI + n0 * math.log(tau2)
                       + float(np.sum(np.log(w))) + n0)

    def dprof(h):
        w = h * lam_m1 + 1.0
        tau2 = float(np.sum(y2 / w)) / n0
        dtau2 = -float(np.sum(y2 * lam_m1 / w**2)) / n0
        return -0.5 * (n0 * dtau2 / tau2 + float(np.sum(lam_m1 / w)))

    upper = 1.0 - 1e-9
    hs = np.linspace(0.0, upper, grid_size)
    w = 1.0 + np.outer(hs, lam_m1)
    ok = w.min(axis=1) > 0.0
    vals = np.full(grid_size, -np.inf)
    if ok.any():
        tau = (y2 / w[ok]).sum(axis=1) / n0
        vals[ok] = -0.5 * (n0 * LOG_2PI + n0 * np.log(tau)
                           + np.log(w[ok]).sum(axis=1) + n0)
    i = int(np.argmax(vals))
    finite = vals[np.isfinite(vals)]
    if finite.size and float(finite.max() - finite.min()) <= 1e-12 * max(1.0, abs(finite.max())):
        return 0.0, tau2_of(0.0)  # flat objective: tie rule picks the origin
    lo = hs[max(i - 1, 0)]
    hi = hs[min(i + 1, grid_size - 1)]
    dlo, dhi = dprof(lo), dprof(hi)
    if dlo > 0.0 and dhi < 0.0:
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if dprof(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        h = 0.5 * (lo + hi)
    else:
        # golden-section refinement inside the bracketing cell
        gr = (math.sqrt(5.0) - 1.0) / 2.0
        a, b = lo, hi
        c, d = b - gr * (b - a), a + gr * (b - a)
        fc, fd = prof(c), prof(d)
        while b - a > tol:
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - gr * (b - a)
                fc = prof(c)
            else:
                a, c, fc = c, d, fd
                d = a + gr * (b - a)
                fd = prof(d)
        h = 0.5 * (a + b)
        for cand in (0.0, hs[i]):
            if prof(cand) > prof(h):
                h = cand
    if prof(0.0) >= prof(h):
        h = 0.0
    return float(h), tau2_of(float(h))


# ---------------------------------------------------------------------------
# sigma2-scale fitters (for variance / sd-scale test inversion)
# ---------------------------------------------------------------------------


class DiagSigma2:
    """Log-likelihood in the variance components, diagonal kernels."""

    def __init__(self, y, lam):
        self.y2 = _as_array(y) ** 2
        self.lam = np.asarray(lam, dtype=float)
        if self.lam.ndim == 1:
            self.lam = self.lam[:, None]
        self.n = self.y2.size

    def _d(self, s):
        d = self.lam @ s[:-1] + s[-1]
        if d.min() <= 0.0:
            raise SingularCovarianceError(
                f"nonpositive per-coordinate variance at sigma2 = {s}"
            )
        return d

    def value(self, s):
        d = self._d(s)
        return -0.5 * (self.n * LOG_2PI + float(np.sum(np.log(d)))
                       + float(np.sum(self.y2 / d)))

    def value_grad(self, s):
        d = self._d(s)
        f = -0.5 * (self.n * LOG_2PI + float(np.sum(np.log(d)))
                    + float(np.sum(self.y2 / d)))
        r = 1.0 / d - self.y2 / d**2
        g = np.empty(s.size)
        g[:-1] = -0.5 * (self.lam.T @ r)
        g[-1] = -0.5 * float(r.sum())
        return f, g


class DenseConditionalSigma2:
    """Conditional log-likelihood of y0 given y1 in the variance components."""

    def __init__(self, y0, y1, blocks: BlockKernels):
        y0 = _as_array(y0)
        y1 = _as_array(y1)
        self.n0, self.n1 = blocks.n0, blocks.n1
        self.n = self.n0 + self.n1
        self.y = np.concatenate([y0, y1])
        base = [
            np.block([[k00, k01], [k01.T, k11]])
            for k00, k01, k11 in zip(blocks.k00, blocks.k01, blocks.k11)
        ]
        base.append(np.eye(self.n))
        self.kernels = tuple(base)  # last entry is the error kernel

    def _sigma(self, s):
        cov = s[-1] * np.eye(self.n)
        for sv, K in zip(s[:-1], self.kernels[:-1]):
            if sv != 0.0:
                cov += sv * K
        return cov

    def value(self, s):
        cov = self._sigma(s)
        L, logdet = chol_logdet(cov, what=f"Sigma at sigma2 = {s}")
        L1, logdet1 = chol_logdet(cov[self.n0:, self.n0:], what="Sigma_11")
        q = float(self.y @ _solve_chol(L, self.y))
        q1 = float(self.y[self.n0:] @ _solve_chol(L1, self.y[self.n0:]))
        return -0.5 * (self.n0 * LOG_2PI + (logdet - logdet1) + (q - q1))

    def value_grad(self, s):
        cov = self._sigma(s)
        L, logdet = chol_logdet(cov, what=f"Sigma at sigma2 = {s}")
        L1, logdet1 = chol_logdet(cov[self.n0:, self.n0:], what="Sigma_11")
        inv = chol_inverse(L)
        inv1 = chol_inverse(L1)
        a = inv @ self.y
        a1 = inv1 @ self.y[self.n0:]
        q = float(self.y @ a)
        q1 = float(self.y[self.n0:] @ a1)
        f = -0.5 * (self.n0 * LOG_2PI + (logdet - logdet1) + (q - q1))
        g = np.empty(s.size)
        sl = slice(self.n0, self.n)
        for r_i, K in enumerate(self.kernels):
            K11 = K[sl, sl]
            full = float(np.einsum("ij,ij->", inv, K)) - float(a @ (K @ a))
            marg = float(np.einsum("ij,ij->", inv1, K11)) - float(a1 @ (K11 @ a1))
            g[r_i] = -0.5 * (full - marg)
        return f, g


def fit_conditional_sigma2(y0, y1, blocks_or_kset0, pinned: dict[int, float],
                           opts: FitOptions | None = None,
                           extra_starts=None) -> FitResult:
    """Maximize the conditional likelihood over sigma2 with pinned components.

    ``pinned`` maps component indices (0-based, < M) to fixed variance
    values.  Free components (including the error variance) are optimized by
    projected gradient ascent under nonnegativity.  Used for test inversion
    on the variance / standard-deviation scale, where the pinned value does
    not scale with tau2 and the profile trick does not apply.
    """
    opts = opts or FitOptions()
    y0 = _as_array(y0)
    if isinstance(blocks_or_kset0, KernelSet):
        if not blocks_or_kset0.is_diagonal:
            raise InvalidParameterError("kernel set must be diagonal for this path")
        obj = DiagSigma2(y0, blocks_or_kset0.eig_matrix())
        m = blocks_or_kset0.n_components
    else:
        obj = DenseConditionalSigma2(y0, y1, blocks_or_kset0)
        m = len(blocks_or_kset0.k00)
    total = m + 1
    pins = {int(i): float(v) for i, v in pinned.items()}
    if any(not 0 <= i < m for i in pins) or any(v < 0.0 for v in pins.values()):
        raise InvalidParameterError("pins must name kernel components with values >= 0")
    free = np.array([i for i in range(total) if i not in pins], dtype=int)
    scale = max(float(np.mean(y0**2)), np.finfo(float).tiny)
    floor = 1e-12 * scale

    def embed(xf):
        s = np.zeros(total)
        for i, v in pins.items():
            s[i] = v
        s[free] = xf
        return s

    def project(x):
        x = np.maximum(x, 0.0)
        if free[-1] == total - 1:  # error variance is free: keep it positive
            x[-1] = max(x[-1], floor)
        return x

    def value(xf):
        return obj.value(embed(xf))

    def value_grad(xf):
        f, g = obj.value_grad(embed(xf))
        return f, g[free]

    d = free.size
    starts = []
    if extra_starts is not None:
        for s0 in extra_starts:
            s0 = np.atleast_1d(np.asarray(s0, dtype=float))
            starts.append(project(s0[free] if s0.size == total else s0.copy()))
    n_extra = len(starts)
    err_only = np.zeros(d)
    err_only[-1] = scale
    even = np.full(d, scale / max(d, 1))
    starts.extend([err_only, even])
    rng = np.random.default_rng(opts.start_seed)
    while len(starts) - n_extra < max(opts.n_starts, 2):
        starts.append(project(scale * rng.dirichlet(np.ones(d))))
    (x, f, pg, iters, conv), n_started = _maximize(value, value_grad, starts, project, opts)
    s_full = embed(x)
    tot = float(s_full.sum())
    if tot <= 0.0:
        raise OptimizationFailureError("all fitted variance components are zero")
    theta = ThetaParam(h2=s_full[:-1] / tot, tau2=tot,
                       constrained=bool(np.all(s_full[:-1] >= 0.0)))
    return FitResult(theta=theta, loglik=f, grad_norm=pg, iterations=iters,
                     converged=conv, n_starts=n_started, constrained=True,
                     sigma2=s_full)


def sigma2_conditional_objective(y0, y1, blocks_or_kset0):
    """Sigma2-scale conditional objective (value / value_grad interface)."""
    if isinstance(blocks_or_kset0, KernelSet):
        return DiagSigma2(y0, blocks_or_kset0.eig_matrix())
    return DenseConditionalSigma2(y0, y1, blocks_or_kset0)
