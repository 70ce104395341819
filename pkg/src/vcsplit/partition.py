"""Random data splits and block/conditional-Gaussian quantities.

A Partition divides the n coordinates of the response into two index sets:
idx0 (the part the test statistic is evaluated on) and idx1 (the part the
alternative estimate is fitted on).  Under the joint Gaussian model, y0 | y1
is Gaussian with moments given by the usual Schur-complement formulas; this
module computes those blocks, the conditional log-likelihood and the
closed-form conditional maximizer of tau2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, InvalidSplitError, SizeGuardError
from .model import (
    LOG_2PI,
    KernelSet,
    ThetaParam,
    _as_array,
    _readonly,
    _solve_chol,
    chol_logdet,
)

# Above this size of idx0 the explicit Schur complement is refused (O(n^3)
# memory/time); structured representations should be used instead.
MAX_DENSE_CONDITIONAL = 2048


@dataclass(frozen=True)
class Partition:
    """A two-way split of {0, ..., n-1}; deterministic given (n, n0, seed)."""

    idx0: np.ndarray
    idx1: np.ndarray
    n0: int
    n1: int
    seed: int | None = None

    def __post_init__(self):
        i0 = np.asarray(self.idx0, dtype=int)
        i1 = np.asarray(self.idx1, dtype=int)
        n = i0.size + i1.size
        union = np.concatenate([i0, i1])
        if np.unique(union).size != n or union.min() != 0 or union.max() != n - 1:
            raise InvalidSplitError("index sets must disjointly cover 0..n-1")
        if i0.size != self.n0 or i1.size != self.n1:
            raise InvalidSplitError("index set sizes do not match n0/n1")
        object.__setattr__(self, "idx0", _readonly(i0).astype(int))
        object.__setattr__(self, "idx1", _readonly(i1).astype(int))

    @property
    def n(self) -> int:
        return self.n0 + self.n1


def make_partition(n: int, n0: int, seed: int) -> Partition:
    """Uniform random n0-subset for idx0, drawn by a seeded shuffle."""
    if not 1 <= n0 <= n - 1:
        raise InvalidSplitError(f"n0 must be in [1, {n - 1}], got {n0}")
    perm = np.random.default_rng(seed).permutation(n)
    idx0 = np.sort(perm[:n0])
    idx1 = np.sort(perm[n0:])
    return Partition(idx0=idx0, idx1=idx1, n0=n0, n1=n - n0, seed=int(seed))


def partition_from_indices(idx0, n: int) -> Partition:
    """Caller-supplied split (hook for balanced designs); idx1 is the rest."""
    idx0 = np.unique(np.asarray(idx0, dtype=int))
    if idx0.size == 0 or idx0.size >= n or idx0.min() < 0 or idx0.max() >= n:
        raise InvalidSplitError("idx0 must be a nonempty proper subset of 0..n-1")
    mask = np.ones(n, dtype=bool)
    mask[idx0] = False
    idx1 = np.nonzero(mask)[0]
    return Partition(idx0=idx0, idx1=idx1, n0=idx0.size, n1=idx1.size, seed=None)


@dataclass(frozen=True)
class BlockKernels:
    """Kernel blocks at the partition indices: per m, K00, K01 and K11."""

    k00: tuple[np.ndarray, ...]
    k01: tuple[np.ndarray, ...]
    k11: tuple[np.ndarray, ...]
    n0: int
    n1: int

    @property
    def n_components(self) -> int:
        return len(self.k00)


def block_kernels(kset: KernelSet, part: Partition) -> BlockKernels:
    """Extract the dense kernel blocks for a partition."""
    i0, i1 = part.idx0, part.idx1
    k00, k01, k11 = [], [], []
    for K in kset.dense_kernels():
        k00.append(_readonly(K[np.ix_(i0, i0)]))
        k01.append(_readonly(K[np.ix_(i0, i1)]))
        k11.append(_readonly(K[np.ix_(i1, i1)]))
    return BlockKernels(k00=tuple(k00), k01=tuple(k01), k11=tuple(k11),
                        n0=part.n0, n1=part.n1)


def _psi_block(h2: np.ndarray, blocks, size: int, diagonal_term: bool) -> np.ndarray:
    psi = np.zeros((blocks[0].shape[0], blocks[0].shape[1]))
    for hm, K in zip(h2, blocks):
        if hm != 0.0:
            psi += hm * K
    if diagonal_term:
        psi += (1.0 - float(np.sum(h2))) * np.eye(size)
    return psi


def block_sigma(t: ThetaParam, blocks: BlockKernels, i: int, j: int) -> np.ndarray:
    """Covariance block Sigma_ij(theta) for the stored partition."""
    if (i, j) == (0, 0):
        return t.tau2 * _psi_block(t.h2, blocks.k00, blocks.n0, True)
    if (i, j) == (1, 1):
        return t.tau2 * _psi_block(t.h2, blocks.k11, blocks.n1, True)
    if (i, j) == (0, 1):
        return t.tau2 * _psi_block(t.h2, blocks.k01, blocks.n0, False)
    if (i, j) == (1, 0):
        return (t.tau2 * _psi_block(t.h2, blocks.k01, blocks.n0, False)).T
    raise ValueError("block indices must be 0 or 1")


def _conditional_core(h2: np.ndarray, y1: np.ndarray, blocks: BlockKernels):
    """Regression mean Psi01 Psi11^-1 y1 and conditional Psi00 - Psi01 Psi11^-1 Psi10.

    Computed at tau2 = 1 (everything scales linearly in tau2).
    """
    if blocks.n0 > MAX_DENSE_CONDITIONAL:
        raise SizeGuardError(
            f"dense conditional with n0 = {blocks.n0} > {MAX_DENSE_CONDITIONAL}; "
            "use a structured (diagonal) representation"
        )
    psi00 = _psi_block(h2, blocks.k00, blocks.n0, True)
    psi01 = _psi_block(h2, blocks.k01, blocks.n0, False)
    psi11 = _psi_block(h2, blocks.k11, blocks.n1, True)
    L11, _ = chol_logdet(psi11, what="Sigma_11")
    w = _solve_chol(L11, np.column_stack([y1, psi01.T]))
    mean = psi01 @ w[:, 0]
    cond = psi00 - psi01 @ w[:, 1:]
    cond = 0.5 * (cond + cond.T)
    return mean, cond


def conditional_moments(t: ThetaParam, y1, blocks: BlockKernels):
    """Exact conditional mean and covariance of y0 given y1.

    The covariance equals tau2 times its value at tau2 = 1 (the conditional
    mean does not depend on tau2).
    """
    y1 = _as_array(y1)
    mean, cond = _conditional_core(t.h2, y1, blocks)
    return mean, t.tau2 * cond


def cond_loglik(t: ThetaParam, y0, y1, blocks: BlockKernels) -> float:
    """Gaussian log-density of y0 under its conditional distribution given y1.

    Equals the full log-likelihood minus the marginal log-likelihood of y1.
    """
    y0 = _as_array(y0)
    y1 = _as_array(y1)
    mean, cond = conditional_moments(t, y1, blocks)
    L, logdet = chol_logdet(cond, what="conditional covariance")
    r = y0 - mean
    quad = float(r @ _solve_chol(L, r))
    n0 = y0.size
    return -0.5 * (n0 * LOG_2PI + logdet + quad)


def profile_tau2_cond(h2, y0, y1, blocks: BlockKernels) -> float:
    """Closed-form partial maximizer of tau2 in the conditional likelihood."""
    y0 = _as_array(y0)
    y1 = _as_array(y1)
    h2 = np.atleast_1d(np.asarray(h2, dtype=float))
    mean, cond = _conditional_core(h2, y1, blocks)
    r = y0 - mean
    L, _ = chol_logdet(cond, what="conditional covariance")
    quad = float(r @ _solve_chol(L, r))
    if quad <= 0.0:
        raise DegenerateDataError("conditional residual is exactly zero")
    return quad / y0.size
