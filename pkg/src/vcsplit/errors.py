"""Exception types shared across the package."""


class VcsplitError(Exception):
    """Base class for all vcsplit errors."""


class InvalidParameterError(VcsplitError, ValueError):
    """A parameter vector violates its constraints."""


class SingularCovarianceError(VcsplitError):
    """A covariance matrix is not positive definite."""


class DegenerateDataError(VcsplitError):
    """The data admit no interior variance estimate (e.g. an exactly zero residual)."""


class InvalidSplitError(VcsplitError, ValueError):
    """The requested data split is impossible."""


class InvalidDesignError(VcsplitError, ValueError):
    """Crossed-design or kernel-generator parameters are invalid."""


class NotJointlyDiagonalizableError(VcsplitError):
    """Kernels fail the mutual-annihilation requirement (or its numerical consequences)."""

    def __init__(self, pair, residual, message=None):
        self.pair = pair
        self.residual = residual
        if message is None:
            message = (
                f"kernels {pair[0]} and {pair[1]} do not annihilate each other: "
                f"scaled residual {residual:.3e}"
            )
        super().__init__(message)


class OptimizationFailureError(VcsplitError):
    """No feasible starting point, or the optimizer could not make progress at all."""


class SizeGuardError(VcsplitError):
    """Problem size exceeds a dense-path guard; use a structured representation instead."""
