"""Response centering and BLUP-based model diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .errors import InvalidParameterError
from .model import ResponseVector, Sigma2Param, _as_array


def center_response(y_raw) -> ResponseVector:
    """Subtract the sample mean (the only fixed-effect adjustment supported)."""
    y = _as_array(y_raw)
    if y.size < 2:
        raise InvalidParameterError("need at least two observations to center")
    return ResponseVector(y=y - y.mean(), centered=True)


@dataclass(frozen=True)
class BlupResult:
    """Best linear unbiased predictions of the random effects.

    u_hat concatenates the per-factor effect predictions (lengths in
    factor_sizes); fitted = Z @ u_hat and resid is defined as y - fitted,
    so the decomposition reconstructs y to rounding.
    """

    u_hat: np.ndarray
    factor_sizes: tuple[int, ...]
    fitted: np.ndarray
    resid: np.ndarray

    def factor_effects(self, m: int) -> np.ndarray:
        start = sum(self.factor_sizes[:m])
        return self.u_hat[start:start + self.factor_sizes[m]]


def blup(y, Z: list[np.ndarray], s: Sigma2Param) -> BlupResult:
    """Predict random effects: u_hat = G Z' (Z G Z' + sigma2_err I)^-1 y.

    G is block diagonal with sigma2[m] I per factor; factors with a zero
    fitted variance get exactly zero predictions.
    """
    y = _as_array(y)
    mats = [np.asarray(Zm, dtype=float) for Zm in Z]
    if s.n_components != len(mats):
        raise InvalidParameterError(
            f"sigma2 has {s.n_components} factor components but {len(mats)} Z matrices given"
        )
    n = y.size
    if any(Zm.shape[0] != n for Zm in mats):
        raise InvalidParameterError("Z row counts must match the response length")
    sizes = tuple(Zm.shape[1] for Zm in mats)
    cov = s.sigma2[-1] * np.eye(n)
    for sv, Zm in zip(s.sigma2[:-1], mats):
        if sv != 0.0:
            cov += sv * (Zm @ Zm.T)
    a = scipy.linalg.solve(cov, y, assume_a="pos")
    u_parts = [sv * (Zm.T @ a) if sv != 0.0 else np.zeros(Zm.shape[1])
               for sv, Zm in zip(s.sigma2[:-1], mats)]
    u_hat = np.concatenate(u_parts) if u_parts else np.zeros(0)
    fitted = np.zeros(n)
    for Zm, um in zip(mats, u_parts):
        fitted += Zm @ um
    return BlupResult(u_hat=u_hat, factor_sizes=sizes, fitted=fitted,
                      resid=y - fitted)


def qq_data(resid, scale: float | None = None) -> np.ndarray:
    """Normal QQ table: columns (theoretical quantile, sorted scaled residual).

    Residuals are standardized by ``scale`` (the fitted error SD) when given.
    Plotting positions are (i - 0.5) / n.
    """
    r = _as_array(resid)
    if r.size < 3:
        raise InvalidParameterError("need at least three residuals")
    if scale is not None:
        r = r / scale
    n = r.size
    p = (np.arange(1, n + 1) - 0.5) / n
    return np.column_stack([norm.ppf(p), np.sort(r)])


def residual_vs_fitted(result: BlupResult) -> np.ndarray:
    """Scatter table (fitted value, residual) for spread diagnostics."""
    return np.column_stack([result.fitted, result.resid])
