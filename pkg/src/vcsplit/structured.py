"""Structure detection and construction for fast likelihood paths.

Three sources of structure are handled:

* mutually annihilating kernels (K_m K_l = 0 for m != l) admit one shared
  orthogonal eigenbasis, built constructively from the per-kernel
  eigendecompositions;
* a single kernel left free under the null can be eigendecomposed so the
  covariance is diagonal on the null set (one-dimensional null fitting);
* fully crossed random-effects layouts have a closed-form Kronecker
  eigenbasis, assembled from per-dimension contrast blocks.

Spectral truncation (zeroing trailing eigenvalues) produces approximate
kernels that are exactly jointly diagonalizable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    InvalidDesignError,
    NotJointlyDiagonalizableError,
    SizeGuardError,
    VcsplitError,
)
from .model import KernelSet, _readonly

# Relative cutoff deciding which eigenvalues count as nonzero in the
# shared-basis construction.
EIG_CUTOFF = 1e-10
# Pairwise annihilation tolerance, relative to the product of spectral norms.
ANNIHILATION_TOL = 1e-8
# Dense Z / dense kernel materialization guard for crossed designs.
MAX_CROSSED_DENSE = 10_000


@dataclass(frozen=True)
class CrossedDesign:
    """Fully crossed layout: a grid with dims[r] levels along axis r.

    The first n_factors axes carry additive random effects; any trailing
    axes are replication structure (no effect of their own).  The kernel of
    factor m is Z_m Z_m' where Z_m is the Kronecker indicator matrix, and
    w_m = prod of the other dimensions is both the column sum of Z_m and the
    nonzero eigenvalue of the kernel.
    """

    dims: tuple[int, ...]
    n_factors: int | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        nf = len(dims) if self.n_factors is None else int(self.n_factors)
        if len(dims) < 2:
            raise InvalidDesignError("a crossed design needs at least two dimensions")
        if any(d < 2 for d in dims):
            raise InvalidDesignError(f"every dimension needs >= 2 levels, got {dims}")
        if not 1 <= nf <= len(dims):
            raise InvalidDesignError(f"n_factors must be in [1, {len(dims)}], got {nf}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "n_factors", nf)

    @property
    def n(self) -> int:
        return int(np.prod(self.dims))

    @property
    def weights(self) -> np.ndarray:
        n = self.n
        return np.array([n // d for d in self.dims[: self.n_factors]], dtype=float)


@dataclass(frozen=True)
class EigenStructure:
    """Shared eigenbasis and per-kernel spectra.

    ``basis is None`` means the identity.  For crossed designs the basis is
    stored implicitly as per-dimension orthonormal blocks plus a column
    order, and is materialized only on demand.
    """

    eigs: np.ndarray
    basis: np.ndarray | None = None
    factors: tuple[np.ndarray, ...] | None = None
    order: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.eigs.shape[0]

    def _tensor_apply(self, v: np.ndarray, transpose: bool) -> np.ndarray:
        dims = tuple(H.shape[0] for H in self.factors)
        t = np.asarray(v, dtype=float).reshape(dims)
        for axis, H in enumerate(self.factors):
            M = H.T if transpose else H
            t = np.moveaxis(np.tensordot(M, t, axes=(1, axis)), 0, axis)
        return t.reshape(-1)

    def rotate(self, v) -> np.ndarray:
        """Coordinates of v in the eigenbasis (O' v)."""
        v = np.asarray(v, dtype=float)
        if self.basis is not None:
            return self.basis.T @ v
        if self.factors is not None:
            return self._tensor_apply(v, transpose=True)[self.order]
        return v.copy()

    def rotate_back(self, v) -> np.ndarray:
        """Inverse of rotate (O v)."""
        v = np.asarray(v, dtype=float)
        if self.basis is not None:
            return self.basis @ v
        if self.factors is not None:
            w = np.empty_like(v)
            w[self.order] = v
            return self._tensor_apply(w, transpose=False)
        return v.copy()

    def materialize(self) -> np.ndarray:
        """Dense orthogonal basis matrix (guarded for large implicit bases)."""
        if self.basis is not None:
            return self.basis
        if self.factors is None:
            return np.eye(self.n)
        if self.n > MAX_CROSSED_DENSE:
            raise SizeGuardError(f"refusing to materialize a {self.n}x{self.n} basis")
        O = self.factors[0]
        for H in self.factors[1:]:
            O = np.kron(O, H)
        return O[:, self.order]


# ---------------------------------------------------------------------------
# Shared-basis construction for mutually annihilating kernels
# ---------------------------------------------------------------------------


def joint_diagonalize_annihilating(kernels) -> EigenStructure:
    """One orthogonal basis diagonalizing all kernels with K_m K_l = 0.

    Eigendecomposes each kernel, keeps the eigenvectors with nonzero
    eigenvalues (relative cutoff EIG_CUTOFF), verifies that the pooled set is
    orthonormal, and completes it to a full basis on the common null space.
    Columns are grouped by kernel with eigenvalues descending, completion
    columns last.
    """
    mats = [0.5 * (np.asarray(K, float) + np.asarray(K, float).T) for K in kernels]
    if not mats:
        raise VcsplitError("need at least one kernel")
    n = mats[0].shape[0]
    decomps = []
    norms = []
    for K in mats:
        w, V = np.linalg.eigh(K)
        w, V = w[::-1], V[:, ::-1]
        decomps.append((w, V))
        norms.append(max(abs(w[0]) if w.size else 0.0, abs(w[-1]) if w.size else 0.0))
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            scale = norms[i] * norms[j]
            if scale == 0.0:
                continue
            resid = float(np.linalg.norm(mats[i] @ mats[j], 2))
            if resid > ANNIHILATION_TOL * scale:
                raise NotJointlyDiagonalizableError((i, j), resid / scale)

    cols = []
    col_owner = []
    col_eig = []
    for m_i, (w, V) in enumerate(decomps):
        keep = np.abs(w) > EIG_CUTOFF * max(norms[m_i], np.finfo(float).tiny)
        for k in np.nonzero(keep)[0]:
            cols.append(V[:, k])
            col_owner.append(m_i)
            col_eig.append(w[k])
    q = len(cols)
    if q > n:
        raise NotJointlyDiagonalizableError(
            (-1, -1), float(q), message=f"collected {q} > n = {n} eigenvector columns"
        )
    if q:
        B = np.column_stack(cols)
        gram_err = float(np.abs(B.T @ B - np.eye(q)).max())
        if gram_err > 1e-10:
            raise NotJointlyDiagonalizableError(
                (-1, -1), gram_err,
                message=f"pooled eigenvectors not orthonormal (max deviation {gram_err:.3e})",
            )
    else:
        B = np.zeros((n, 0))
    if q < n:
        # orthonormal basis of the common null space from the residual projector
        proj = np.eye(n) - B @ B.T
        Q, R, _ = scipy.linalg.qr(proj, pivoting=True)
        keep = np.abs(np.diag(R)) > 1e-6
        completion = Q[:, : int(keep.sum())]
        if completion.shape[1] != n - q:
            raise VcsplitError("basis completion failed to span the null space")
        basis = np.concatenate([B, completion], axis=1)
    else:
        basis = B
    eigs = np.zeros((n, len(mats)))
    for pos, (owner, lam) in enumerate(zip(col_owner, col_eig)):
        eigs[pos, owner] = lam
    return EigenStructure(eigs=_readonly(eigs), basis=_readonly(basis))


def rotate_problem(y, kset: KernelSet, eig: EigenStructure):
    """Rotate the response into the shared eigenbasis; kernels become diagonal."""
    y = np.asarray(y, dtype=float)
    if y.size != eig.n:
        raise VcsplitError(f"response length {y.size} does not match basis size {eig.n}")
    if kset is not None and kset.n != eig.n:
        raise VcsplitError("kernel set and eigenstructure sizes differ")
    return eig.rotate(y), KernelSet.from_eigs(eig.eigs)


# ---------------------------------------------------------------------------
# Diagonal-under-the-null rotation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NullRotation:
    """Eigenbasis of the kernel left free under the null, applied everywhere.

    In the rotated coordinates the free kernel is exactly diagonal (spectrum
    ``lam_free``, descending), so the covariance is diagonal at any parameter
    with the other components pinned to zero; the remaining rotated kernels
    are generally dense.
    """

    basis: np.ndarray
    lam_free: np.ndarray
    kernels_rot: KernelSet
    free_index: int


def null_rotation(kset: KernelSet, free_index: int) -> NullRotation:
    """Eigendecompose kernel ``free_index``; conjugate every kernel by its basis."""
    kernels = kset.dense_kernels()
    if not 0 <= free_index < len(kernels):
        raise VcsplitError(f"free_index {free_index} out of range")
    w, O = np.linalg.eigh(kernels[free_index])
    w, O = w[::-1], O[:, ::-1]
    rotated = []
    for m_i, K in enumerate(kernels):
        if m_i == free_index:
            rotated.append(np.diag(np.maximum(w, 0.0)))
        else:
            R = O.T @ K @ O
            rotated.append(0.5 * (R + R.T))
    return NullRotation(
        basis=_readonly(O),
        lam_free=_readonly(np.maximum(w, 0.0)),
        kernels_rot=KernelSet.from_dense(rotated, validate=False),
        free_index=free_index,
    )


# ---------------------------------------------------------------------------
# Crossed-design eigensystem
# ---------------------------------------------------------------------------


def _contrast_block(d: int) -> np.ndarray:
    """Orthonormal d x d block whose first column is 1/sqrt(d) (Helmert-style)."""
    H = np.zeros((d, d))
    H[:, 0] = 1.0 / math.sqrt(d)
    for j in range(1, d):
        H[:j, j] = 1.0 / math.sqrt(j * (j + 1))
        H[j, j] = -j / math.sqrt(j * (j + 1))
    return H


def crossed_eigs(design: CrossedDesign) -> EigenStructure:
    """Closed-form eigenbasis and factor spectra for a crossed design.

    Basis columns are Kronecker products of per-dimension contrast blocks.
    The grand-mean direction comes first, then for each factor its within-
    factor contrasts, then the completion (interaction) directions.  Factor
    m has eigenvalue w_m on the grand-mean direction and on its own
    contrasts, zero elsewhere.
    """
    dims = design.dims
    nf = design.n_factors
    n = design.n
    w = design.weights
    grids = np.indices(dims).reshape(len(dims), n)
    nonzero = grids > 0
    n_nonzero = nonzero.sum(axis=0)

    eigs = np.zeros((n, nf))
    for m_i in range(nf):
        others = np.ones(n, dtype=bool)
        for r in range(len(dims)):
            if r != m_i:
                others &= ~nonzero[r]
        eigs[others, m_i] = w[m_i]

    # column order: grand mean, per-factor contrasts, then the rest
    group = np.full(n, 2 * len(dims) + 1, dtype=int)
    group[n_nonzero == 0] = 0
    for r in range(len(dims)):
        only_r = nonzero[r] & (n_nonzero == 1)
        group[only_r] = 1 + r
    order = np.lexsort(tuple(grids[::-1]) + (group,))
    factors = tuple(_contrast_block(d) for d in dims)
    return EigenStructure(eigs=_readonly(eigs[order]), basis=None,
                          factors=factors, order=_readonly(order).astype(int))


def build_crossed_Z(design: CrossedDesign) -> list[np.ndarray]:
    """Explicit Kronecker indicator matrices Z_m (dense oracle / BLUP input)."""
    if design.n > MAX_CROSSED_DENSE:
        raise SizeGuardError(
            f"dense Z for n = {design.n} > {MAX_CROSSED_DENSE}; use the eigen form"
        )
    out = []
    for m_i in range(design.n_factors):
        Z = np.ones((1, 1))
        for r, d in enumerate(design.dims):
            Z = np.kron(Z, np.eye(d) if r == m_i else np.ones((d, 1)))
        out.append(Z)
    return out


# ---------------------------------------------------------------------------
# Spectral truncation
# ---------------------------------------------------------------------------


def approx_truncate(K: np.ndarray, q: int) -> np.ndarray:
    """Zero the n - q smallest eigenvalues of a PSD kernel.

    The spectral-norm error ||K - K_trunc|| equals the largest eigenvalue
    removed; with q = n the kernel is returned unchanged, with q = 0 the
    zero matrix.
    """
    K = 0.5 * (np.asarray(K, float) + np.asarray(K, float).T)
    n = K.shape[0]
    if not 0 <= q <= n:
        raise InvalidDesignError(f"q must be in [0, {n}], got {q}")
    if q == n:
        return K.copy()
    w, V = np.linalg.eigh(K)  # ascending
    w = np.maximum(w, 0.0)
    w[: n - q] = 0.0
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)
