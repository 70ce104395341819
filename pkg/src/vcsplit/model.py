"""Gaussian variance-components model.

The model is y ~ N(0, Sigma(theta)) with

    Sigma(theta) = tau2 * Psi(h2),
    Psi(h2)      = sum_m h2[m] * K[m] + (1 - sum(h2)) * I,

for known symmetric PSD kernel matrices K[1..M].  Two parameterizations are
supported: theta = (h2, tau2), where h2[m] is the proportion of total variance
attributable to kernel m and tau2 the total variance; and sigma2, the vector of
M + 1 variance components (one per kernel plus the error variance).

This module holds the parameter types, the kernel-set container and the exact
log-likelihoods and gradients, in both a dense path (Cholesky-based) and an
O(n*M) diagonal path for kernel sets with a shared eigenbasis.  All
log-likelihoods include the -(n/2)*log(2*pi) constant so values are comparable
with external mixed-model software; the constant cancels in likelihood ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky as _scipy_cholesky
from scipy.linalg import solve_triangular

from .errors import (
    DegenerateDataError,
    InvalidParameterError,
    SingularCovarianceError,
    SizeGuardError,
    VcsplitError,
)

LOG_2PI = math.log(2.0 * math.pi)

# Relative tolerance for PSD validation on load: eigenvalues below
# -PSD_TOL * spectral_norm are rejected, small negatives are clipped to zero.
PSD_TOL = 1e-8


def _as_array(y) -> np.ndarray:
    """Accept a ResponseVector or any array-like; return a float 1-d array."""
    if isinstance(y, ResponseVector):
        return y.y
    return np.atleast_1d(np.asarray(y, dtype=float))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Parameter types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThetaParam:
    """Parameter (h2, tau2): variance proportions and total variance.

    The constrained parameter set requires h2 >= 0 componentwise,
    sum(h2) < 1 and tau2 > 0.  With ``constrained=False`` the bounds on h2
    are dropped (feasibility is then limited only by Psi(h2) being positive
    definite, which is checked where the likelihood is evaluated).
    """

    h2: np.ndarray
    tau2: float
    constrained: bool = True

    def __post_init__(self):
        h2 = np.atleast_1d(np.asarray(self.h2, dtype=float))
        if h2.ndim != 1:
            raise InvalidParameterError("h2 must be a vector")
        if not np.all(np.isfinite(h2)) or not math.isfinite(self.tau2):
            raise InvalidParameterError("non-finite parameter value")
        if self.tau2 <= 0.0:
            raise InvalidParameterError(f"tau2 must be positive, got {self.tau2}")
        if self.constrained:
            if np.any(h2 < 0.0):
                raise InvalidParameterError(f"h2 components must be nonnegative, got {h2}")
            if h2.sum() >= 1.0:
                raise InvalidParameterError(f"sum(h2) must be < 1, got {h2.sum()}")
        object.__setattr__(self, "h2", _readonly(h2))
        object.__setattr__(self, "tau2", float(self.tau2))

    @property
    def n_components(self) -> int:
        return self.h2.size


@dataclass(frozen=True)
class Sigma2Param:
    """Variance components (sigma2[0..M-1], error variance sigma2[M])."""

    sigma2: np.ndarray

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        if s.ndim != 1 or s.size < 1:
            raise InvalidParameterError("sigma2 must be a nonempty vector")
        if not np.all(np.isfinite(s)):
            raise InvalidParameterError("non-finite variance component")
        if np.any(s < 0.0):
            raise InvalidParameterError(f"variance components must be nonnegative, got {s}")
        if s[-1] <= 0.0:
            raise InvalidParameterError("error variance (last entry) must be positive")
        object.__setattr__(self, "sigma2", _readonly(s))

    @property
    def n_components(self) -> int:
        return self.sigma2.size - 1


@dataclass(frozen=True)
class ResponseVector:
    """Observed response with a flag recording whether it was mean-centered."""

    y: np.ndarray
    centered: bool = False

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if y.ndim != 1:
            raise InvalidParameterError("response must be a vector")
        object.__setattr__(self, "y", _readonly(y))

    def __len__(self) -> int:
        return self.y.size


def theta_from_sigma2(s: Sigma2Param | np.ndarray) -> ThetaParam:
    """Convert variance components to (h2, tau2); tau2 is the total variance."""
    if not isinstance(s, Sigma2Param):
        s = Sigma2Param(np.asarray(s, dtype=float))
    tot = float(s.sigma2.sum())
    if tot <= 0.0:
        raise InvalidParameterError("all variance components are zero")
    return ThetaParam(h2=s.sigma2[:-1] / tot, tau2=tot)


def sigma2_from_theta(t: ThetaParam) -> Sigma2Param:
    """Convert (h2, tau2) to variance components; inverse of theta_from_sigma2."""
    rest = 1.0 - float(t.h2.sum())
    if rest <= 0.0 or np.any(t.h2 < 0.0):
        raise InvalidParameterError("theta is not in the constrained parameter set")
    return Sigma2Param(np.append(t.tau2 * t.h2, t.tau2 * rest))


# ---------------------------------------------------------------------------
# Kernel sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseRep:
    """Kernels stored as dense matrices with no known joint structure."""


@dataclass(frozen=True)
class SharedEigenRep:
    """All kernels share one orthogonal eigenbasis.

    ``basis is None`` means the basis is the identity, i.e. the kernels are
    diagonal and ``eigs[:, m]`` is the diagonal of kernel m.
    """

    basis: np.ndarray | None
    eigs: np.ndarray


@dataclass(frozen=True)
class CrossedRep:
    """Fully crossed random-effects layout.

    ``dims`` gives the number of levels along each axis of the observation
    grid; the first ``n_factors`` axes carry random effects, trailing axes are
    replication structure.  n = prod(dims).
    """

    dims: tuple[int, ...]
    n_factors: int


@dataclass(frozen=True)
class KernelSet:
    """The M symmetric PSD kernel matrices, with an optional structured form."""

    n: int
    n_components: int
    kernels: tuple[np.ndarray, ...] | None
    rep: DenseRep | SharedEigenRep | CrossedRep = field(default_factory=DenseRep)

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_dense(cls, kernels, validate: bool = True) -> "KernelSet":
        """Build from dense matrices; symmetrizes, optionally validates PSD.

        Validation rejects matrices whose smallest eigenvalue is below
        -PSD_TOL times the spectral norm; smaller negative eigenvalues
        (file-rounding artifacts) are clipped to zero.
        """
        mats = [np.asarray(K, dtype=float) for K in kernels]
        if not mats:
            raise InvalidParameterError("kernel set must contain at least one kernel")
        n = mats[0].shape[0]
        out = []
        for i, K in enumerate(mats):
            if K.ndim != 2 or K.shape != (n, n):
                raise InvalidParameterError(f"kernel {i} is not {n}x{n}")
            K = 0.5 * (K + K.T)
            if validate:
                w, V = np.linalg.eigh(K)
                scale = max(abs(w[0]), abs(w[-1]), np.finfo(float).tiny)
                if w[0] < -PSD_TOL * scale:
                    raise InvalidParameterError(
                        f"kernel {i} is not PSD: min eigenvalue {w[0]:.3e} "
                        f"(spectral norm {scale:.3e})"
                    )
                if w[0] < 0.0:
                    K = (V * np.maximum(w, 0.0)) @ V.T
                    K = 0.5 * (K + K.T)
            out.append(_readonly(K))
        return cls(n=n, n_components=len(out), kernels=tuple(out), rep=DenseRep())

    @classmethod
    def from_eigs(cls, eigs) -> "KernelSet":
        """Diagonal kernels given by their spectra; eigs has shape (n, M)."""
        lam = np.asarray(eigs, dtype=float)
        if lam.ndim == 1:
            lam = lam[:, None]
        if np.any(lam < 0.0):
            mn = lam.min()
            scale = max(lam.max(), np.finfo(float).tiny)
            if mn < -PSD_TOL * scale:
                raise InvalidParameterError(f"negative kernel eigenvalue {mn:.3e}")
            lam = np.maximum(lam, 0.0)
        n, m = lam.shape
        return cls(n=n, n_components=m, kernels=None,
                   rep=SharedEigenRep(basis=None, eigs=_readonly(lam)))

    @classmethod
    def from_shared_eigen(cls, basis, eigs, kernels=None) -> "KernelSet":
        """Kernels sharing the orthogonal eigenbasis ``basis``.

        Checks basis.T @ basis = I to 1e-10 entrywise and, when dense copies
        are supplied, the reconstruction basis @ diag(eigs[:, m]) @ basis.T
        against each kernel to 1e-8.
        """
        O = np.asarray(basis, dtype=float)
        lam = np.asarray(eigs, dtype=float)
        if lam.ndim == 1:
            lam = lam[:, None]
        n, m = lam.shape
        if O.shape != (n, n):
            raise InvalidParameterError("basis shape does not match eigenvalue vectors")
        err = np.abs(O.T @ O - np.eye(n)).max()
        if err > 1e-10:
            raise InvalidParameterError(f"basis is not orthogonal: max |O'O - I| = {err:.3e}")
        dense = None
        if kernels is not None:
            dense = tuple(_readonly(0.5 * (np.asarray(K, float) + np.asarray(K, float).T))
                          for K in kernels)
            for i, K in enumerate(dense):
                rec = (O * lam[:, i]) @ O.T
                if np.abs(rec - K).max() > 1e-8 * max(1.0, np.abs(K).max()):
                    raise InvalidParameterError(f"kernel {i} does not match its eigendecomposition")
        return cls(n=n, n_components=m, kernels=dense,
                   rep=SharedEigenRep(basis=_readonly(O), eigs=_readonly(lam)))

    @classmethod
    def from_crossed(cls, dims, n_factors: int | None = None) -> "KernelSet":
        """Fully crossed design over a grid with the given dimensions."""
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2:
            raise InvalidParameterError("a crossed design needs at least two dimensions")
        if any(d < 2 for d in dims):
            raise InvalidParameterError(f"each crossed dimension needs >= 2 levels, got {dims}")
        m = len(dims) if n_factors is None else int(n_factors)
        if not 1 <= m <= len(dims):
            raise InvalidParameterError(f"n_factors must be in [1, {len(dims)}], got {m}")
        n = int(np.prod(dims))
        return cls(n=n, n_components=m, kernels=None, rep=CrossedRep(dims=dims, n_factors=m))

    # -- structure queries ---------------------------------------------------

    @property
    def is_diagonal(self) -> bool:
        """True when the kernels are diagonal as stored (identity eigenbasis)."""
        return isinstance(self.rep, SharedEigenRep) and self.rep.basis is None

    def eig_matrix(self) -> np.ndarray:
        """Per-kernel spectra as an (n, M) array, for diagonal-capable sets."""
        if isinstance(self.rep, SharedEigenRep):
            return self.rep.eigs
        if isinstance(self.rep, CrossedRep):
            from .structured import CrossedDesign, crossed_eigs

            return crossed_eigs(CrossedDesign(self.rep.dims, self.rep.n_factors)).eigs
        raise VcsplitError("dense kernel set has no shared eigenvalue representation")

    def dense_kernels(self) -> tuple[np.ndarray, ...]:
        """Materialize dense kernel matrices (guarded for implicit reps)."""
        if self.kernels is not None:
            return self.kernels
        if isinstance(self.rep, SharedEigenRep):
            lam = self.rep.eigs
            if self.rep.basis is None:
                return tuple(np.diag(lam[:, i]) for i in range(self.n_components))
            O = self.rep.basis
            return tuple((O * lam[:, i]) @ O.T for i in range(self.n_components))
        from .structured import CrossedDesign, build_crossed_Z

        zs = build_crossed_Z(CrossedDesign(self.rep.dims, self.rep.n_factors))
        return tuple(Z @ Z.T for Z in zs)

    def restrict(self, idx) -> "KernelSet":
        """Kernel set on a coordinate subset (dense blocks or spectra rows)."""
        idx = np.asarray(idx, dtype=int)
        if self.is_diagonal:
            return KernelSet.from_eigs(self.rep.eigs[idx])
        if self.kernels is not None:
            sub = tuple(_readonly(K[np.ix_(idx, idx)]) for K in self.kernels)
            return KernelSet(n=idx.size, n_components=self.n_components,
                             kernels=sub, rep=DenseRep())
        raise VcsplitError(
            "cannot restrict an implicit kernel representation; rotate the problem first"
        )


# ---------------------------------------------------------------------------
# Covariance assembly and dense likelihood path
# ---------------------------------------------------------------------------


def _check_theta_dims(t: ThetaParam, m: int):
    if t.n_components != m:
        raise InvalidParameterError(
            f"theta has {t.n_components} components but the kernel set has {m}"
        )


def assemble_psi(h2: np.ndarray, kernels, n: int) -> np.ndarray:
    """Psi(h2) = sum_m h2[m] K[m] + (1 - sum(h2)) I, as a dense matrix."""
    psi = (1.0 - float(np.sum(h2))) * np.eye(n)
    for hm, K in zip(np.atleast_1d(h2), kernels):
        if hm != 0.0:
            psi += hm * K
    return psi


def assemble_sigma(t: ThetaParam, kset: KernelSet) -> np.ndarray:
    """Covariance matrix tau2 * Psi(h2) for the given kernel set."""
    _check_theta_dims(t, kset.n_components)
    if kset.is_diagonal:
        lam = kset.rep.eigs
        d = t.tau2 * (lam @ t.h2 + (1.0 - t.h2.sum()))
        return np.diag(d)
    return t.tau2 * assemble_psi(t.h2, kset.dense_kernels(), kset.n)


def chol_logdet(psi: np.ndarray, what: str = "covariance"):
    """Lower Cholesky factor and log-determinant; raises on non-PD input."""
    try:
        L = _scipy_cholesky(psi, lower=True, check_finite=False)
    except np.linalg.LinAlgError as e:
        raise SingularCovarianceError(f"{what} is not positive definite: {e}") from None
    return L, 2.0 * float(np.sum(np.log(np.diag(L))))


def _solve_chol(L: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = solve_triangular(L, y, lower=True, check_finite=False)
    return solve_triangular(L.T, z, lower=False, check_finite=False)


def chol_inverse(L: np.ndarray) -> np.ndarray:
    """Full symmetric inverse from a lower Cholesky factor (LAPACK dpotri)."""
    from scipy.linalg.lapack import dpotri

    inv, info = dpotri(L, lower=1)
    if info != 0:
        raise SingularCovarianceError("inversion from Cholesky factor failed")
    # dpotri fills one triangle only
    inv = np.tril(inv) + np.tril(inv, -1).T
    return inv


def loglik_dense(y, t: ThetaParam, kset: KernelSet) -> float:
    """Exact Gaussian log-likelihood via a Cholesky factorization of Psi(h2).

    Includes the -(n/2) log(2 pi) constant.  Raises SingularCovarianceError
    when Psi(h2) is not positive definite (never silently regularized).
    """
    y = _as_array(y)
    _check_theta_dims(t, kset.n_components)
    if y.size != kset.n:
        raise InvalidParameterError(f"response length {y.size} does not match n = {kset.n}")
    psi = assemble_psi(t.h2, kset.dense_kernels(), kset.n)
    try:
        L, logdet = chol_logdet(psi)
    except SingularCovarianceError:
        raise SingularCovarianceError(
            f"Psi(h2) not positive definite at h2 = {np.asarray(t.h2)}"
        ) from None
    b = _solve_chol(L, y)
    quad = float(y @ b)
    n = y.size
    return -0.5 * (n * LOG_2PI + n * math.log(t.tau2) + logdet + quad / t.tau2)


def loglik_grad_dense(y, t: ThetaParam, kset: KernelSet) -> np.ndarray:
    """Gradient of loglik_dense in theta = (h2, tau2), length M + 1.

    Uses the trace identity d l / d theta_j =
    -1/2 tr[(Sigma^-1 - Sigma^-1 y y' Sigma^-1) dSigma/dtheta_j] with
    dSigma/dh2_m = tau2 (K_m - I) and dSigma/dtau2 = Psi(h2).
    """
    y = _as_array(y)
    _check_theta_dims(t, kset.n_components)
    kernels = kset.dense_kernels()
    n = y.size
    psi = assemble_psi(t.h2, kernels, n)
    try:
        L, _ = chol_logdet(psi)
    except SingularCovarianceError:
        raise SingularCovarianceError(
            f"Psi(h2) not positive definite at h2 = {np.asarray(t.h2)}"
        ) from None
    psi_inv = chol_inverse(L)
    b = psi_inv @ y
    tr_inv = float(np.trace(psi_inv))
    bb = float(b @ b)
    quad = float(y @ b)
    tau2 = t.tau2
    grad = np.empty(t.n_components + 1)
    for m_i, K in enumerate(kernels):
        tr_m = float(np.einsum("ij,ij->", psi_inv, K))
        qm = float(b @ (K @ b))
        grad[m_i] = -0.5 * ((tr_m - tr_inv) - (qm - bb) / tau2)
    grad[-1] = -0.5 * (n / tau2 - quad / tau2**2)
    return grad


def profile_tau2(y, h2, kset: KernelSet) -> float:
    """Closed-form partial maximizer of tau2: y' Psi(h2)^-1 y / n."""
    y = _as_array(y)
    h2 = np.atleast_1d(np.asarray(h2, dtype=float))
    psi = assemble_psi(h2, kset.dense_kernels(), kset.n)
    L, _ = chol_logdet(psi)
    quad = float(y @ _solve_chol(L, y))
    if quad <= 0.0:
        raise DegenerateDataError("response is identically zero; tau2 estimate degenerate")
    return quad / y.size


# ---------------------------------------------------------------------------
# Diagonal likelihood path
# ---------------------------------------------------------------------------


def _eig_cols(eigs) -> np.ndarray:
    lam = np.asarray(eigs, dtype=float)
    if lam.ndim == 1:
        lam = lam[:, None]
    elif lam.ndim != 2:
        lam = np.column_stack([np.asarray(v, dtype=float) for v in eigs])
    return lam


def diag_variances(s: Sigma2Param, eigs) -> np.ndarray:
    """Per-coordinate variances sum_m sigma2[m] * lam[:, m] + sigma2[M]."""
    lam = _eig_cols(eigs)
    d = lam @ s.sigma2[:-1] + s.sigma2[-1]
    if np.any(d <= 0.0):
        raise SingularCovarianceError(
            f"nonpositive per-coordinate variance (min {d.min():.3e}) at sigma2 = {s.sigma2}"
        )
    return d


def loglik_diag(y, s: Sigma2Param, eigs) -> float:
    """Gaussian log-likelihood for kernels diagonal in the working basis.

    O(n*M); equals loglik_dense on the corresponding dense problem.
    """
    y = _as_array(y)
    d = diag_variances(s, eigs)
    if y.size != d.size:
        raise InvalidParameterError("response length does not match eigenvalue vectors")
    return -0.5 * (y.size * LOG_2PI + float(np.sum(np.log(d))) + float(np.sum(y * y / d)))


def loglik_grad_diag(y, s: Sigma2Param, eigs) -> np.ndarray:
    """Gradient of loglik_diag in sigma2 (length M + 1; error component last)."""
    y = _as_array(y)
    lam = _eig_cols(eigs)
    d = diag_variances(s, eigs)
    r = 1.0 / d - (y * y) / d**2
    grad = np.empty(s.sigma2.size)
    grad[:-1] = -0.5 * (lam.T @ r)
    grad[-1] = -0.5 * float(r.sum())
    return grad
