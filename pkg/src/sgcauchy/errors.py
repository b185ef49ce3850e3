"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class SGError(Exception):
    """Base class for library errors."""


class DomainTagError(SGError, ValueError):
    """A grid function carries the wrong domain tag for the requested operation."""


class ExpressionError(SGError, ValueError):
    """An expression string could not be parsed."""


class DerivativeUnavailable(SGError):
    """A requested derivative order is not available for a symbol."""


class NumericalError(SGError):
    """Base class for convergence and contraction failures."""


class ContractionError(NumericalError):
    """Newton or fixed-point iteration failed; the time horizon is likely too large."""


class EquivalenceError(NumericalError):
    """A flow left the equivalence band <q>/<y> in [1/kappa, kappa]."""


class PicardError(NumericalError):
    """Picard iteration for the exchange system did not contract."""


class IrregularPhaseError(NumericalError):
    """A phase function has a degenerate mixed Hessian at some node."""


class NotHyperbolicError(SGError):
    """Characteristic roots are not real within tolerance."""


class NotInvolutiveError(SGError):
    """A symbol family failed the involutiveness check."""


class InadmissibleNoiseError(SGError, ValueError):
    """The noise model or coefficient fails an admissibility condition."""


class ConfigError(SGError, ValueError):
    """Invalid or incomplete run configuration."""
