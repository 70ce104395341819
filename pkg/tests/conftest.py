"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's computation paths: dense
log-likelihoods via explicit inverses and determinants, covariance assembly
via triple loops, derivatives via central finite differences, conditional
moments via explicitly inverted Schur complements.
"""

import math

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def random_psd(rng, n, rank=None, scale=1.0):
    A = rng.standard_normal((n, rank or n))
    return scale * (A @ A.T) / n


def random_theta(rng, m, interior=True):
    """Random constrained-valid theta; interior keeps h2 away from the faces."""
    w = rng.dirichlet(np.ones(m + 1))
    h2 = w[:m] * (0.8 if interior else 1.0 - 1e-6)
    if interior:
        h2 = 0.05 + 0.9 * h2  # keep every component strictly positive
        if h2.sum() >= 0.95:
            h2 *= 0.9 / h2.sum()
    tau2 = float(rng.lognormal(0.0, 0.5))
    return h2, tau2


def assemble_sigma_oracle(h2, tau2, kernels):
    """Naive elementwise triple-loop assembly of tau2 * Psi(h2)."""
    n = kernels[0].shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for m, K in enumerate(kernels):
                acc += h2[m] * K[i, j]
            if i == j:
                acc += 1.0 - sum(h2)
            out[i, j] = tau2 * acc
    return out


def loglik_oracle(y, h2, tau2, kernels):
    """Dense Gaussian log-density via explicit inverse and determinant."""
    n = len(y)
    sigma = tau2 * psi_oracle(h2, kernels)
    sign, logdet = np.linalg.slogdet(sigma)
    assert sign > 0
    quad = y @ np.linalg.inv(sigma) @ y
    return -0.5 * (n * math.log(2 * math.pi) + logdet + quad)


def psi_oracle(h2, kernels):
    n = kernels[0].shape[0]
    psi = (1.0 - float(np.sum(h2))) * np.eye(n)
    for hm, K in zip(np.atleast_1d(h2), kernels):
        psi = psi + hm * K
    return psi


def fd_gradient(f, x, step=1e-5):
    """Central finite differences, one coordinate at a time."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def schur_conditional_oracle(sigma, idx0, idx1, y1):
    """Conditional moments of y0 | y1 via explicitly inverted blocks."""
    s00 = sigma[np.ix_(idx0, idx0)]
    s01 = sigma[np.ix_(idx0, idx1)]
    s11 = sigma[np.ix_(idx1, idx1)]
    s11_inv = np.linalg.inv(s11)
    mean = s01 @ s11_inv @ y1
    cov = s00 - s01 @ s11_inv @ s01.T
    return mean, cov


def random_annihilating_kernels(rng, n, m):
    """Mutually annihilating PSD kernels: disjoint diagonal supports rotated
    by one random orthogonal matrix."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    sizes = rng.multinomial(n - m, np.ones(m) / m) + 1  # each block nonempty
    start = 0
    kernels = []
    blanks = n - int(sizes.sum())
    for size in sizes:
        lam = np.zeros(n)
        lam[start:start + size] = rng.uniform(0.5, 3.0, size=size)
        kernels.append((q * lam) @ q.T)
        start += size
    assert start <= n
    return kernels, blanks
