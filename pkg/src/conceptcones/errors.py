"""Exception and warning classes shared across the package."""


class ConceptConesError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(ConceptConesError, ValueError):
    pass


class ZeroVector(ConceptConesError, ValueError):
    """A vector that must be normalized has (numerically) zero norm."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InvalidLabels(ConceptConesError, ValueError):
    pass


class NoConvergence(ConceptConesError, RuntimeError):
    pass


class InsufficientSamples(ConceptConesError, ValueError):
    def __init__(self, concept, n_items, n_atoms):
        super().__init__(
            f"concept {concept} has {n_items} labeled items but needs at least {n_atoms}"
        )
        self.concept = concept


class EmptySupport(ConceptConesError):
    """An atom is used by no training item."""


class ZeroDirection(ConceptConesError):
    pass


class EmptyQuerySet(ConceptConesError, ValueError):
    def __init__(self, concept):
        super().__init__(f"no query contains concept {concept}")
        self.concept = concept


class DegenerateCrossCovariance(ConceptConesError, ValueError):
    pass


class ItemError(ConceptConesError):
    """Wraps a failure on a single item so the caller knows which one."""

    def __init__(self, index, cause):
        super().__init__(f"item {index}: {cause}")
        self.index = index
        self.cause = cause


class ManifestError(ConceptConesError):
    pass


class ContainerFormatError(ConceptConesError, ValueError):
    pass


class RankDeficientWarning(UserWarning):
    pass


class EmptyActiveSetWarning(UserWarning):
    pass


class OvercompleteWarning(UserWarning):
    pass
