"""Exception hierarchy.

Every error carries an ``exit_code`` used by the CLI: 3 for data/format
problems, 4 for numerical/domain problems.
"""

from __future__ import annotations


class SaeMatchError(Exception):
    exit_code = 4


# -- numerical / domain --------------------------------------------------------

class DimensionError(SaeMatchError, ValueError):
    """Array shapes or lengths do not agree."""


class DomainError(SaeMatchError, ValueError):
    """A value lies outside the domain an operation accepts."""


class InvalidThresholdError(DomainError):
    """A JumpReLU threshold is non-positive on an unfolded SAE (or not 1 on a folded one)."""


class FoldStateError(SaeMatchError):
    """Operation not allowed in the SAE's current folded/unfolded state."""


class SizeError(DomainError):
    """Problem too large for the requested method."""


class LayerMismatchError(SaeMatchError, ValueError):
    """Permutation layers do not connect."""


class BatchKindError(SaeMatchError, TypeError):
    """Activation batch has the wrong kind (hidden vs feature)."""


class NoActivationsError(DomainError):
    """No source feature fired, so the matching score is undefined."""


class DegenerateInputError(DomainError):
    """Input has zero variance or too few tokens."""


class SynthesisError(SaeMatchError):
    """Synthetic generator could not produce a valid sample."""


# -- data / format ---------------------------------------------------------------

class FormatError(SaeMatchError):
    exit_code = 3


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class MalformedHeaderError(FormatError):
    pass


class OutOfBoundsError(FormatError):
    pass


class OverlapError(FormatError):
    pass


class ShapeError(FormatError):
    pass


class MissingTensorError(FormatError):
    pass
