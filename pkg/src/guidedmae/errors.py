"""Shared exception and warning types."""


class GuidedMAEError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GuidedMAEError, ValueError):
    """Array shapes or geometry incompatible with the requested operation."""


class GeometryError(GuidedMAEError, ValueError):
    """Scene geometry cannot satisfy the coverage/margin constraints."""


class StateError(GuidedMAEError, ValueError):
    """An attention map was supplied in the wrong processing state."""


class ZeroVectorError(GuidedMAEError, ValueError):
    """A feature vector has zero norm, so cosine similarity is undefined."""


class EmptyMaskError(GuidedMAEError, ValueError):
    """No masked patches are available to average the loss over."""


class DegenerateClassError(GuidedMAEError, ValueError):
    """A declared class has no training examples."""


class InsufficientExamplesError(GuidedMAEError, ValueError):
    """Fewer examples are available than the operation requires."""


class EmptyRelevanceError(GuidedMAEError, ValueError):
    """A retrieval query has no relevant items in the gallery."""


class DisconnectedGraphError(GuidedMAEError, ValueError):
    """An affinity graph has a node with non-positive degree."""


class EigenSolverError(GuidedMAEError, RuntimeError):
    """The Jacobi eigensolver did not converge within the sweep budget."""


class FormatError(GuidedMAEError, ValueError):
    """A binary artifact file is malformed or has an unsupported version."""


class MissingMapError(GuidedMAEError, KeyError):
    """Training requires an attention map that was not provided."""


class MissingVariantError(GuidedMAEError, FileNotFoundError):
    """A background-variant split is absent from the dataset directory."""


class NonFiniteLossError(GuidedMAEError, ArithmeticError):
    """Training produced a non-finite loss value."""


class DegenerateMapWarning(UserWarning):
    """A raw attention map was constant; it normalizes to all zeros."""
