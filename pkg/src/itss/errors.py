"""Exception hierarchy shared by every module of the package."""


class ItssError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ItssError, ValueError):
    """Input contains non-finite values or otherwise violates a precondition."""


class ShapeError(ItssError, ValueError):
    """Array shapes or layouts do not agree."""


class UndefinedSimilarityError(ItssError, ValueError):
    """Cosine similarity requested for a zero vector."""


class RankDeficientError(ItssError, ValueError):
    """Requested subspace dimension exceeds the numerical rank of the data."""

    def __init__(self, requested, achievable, layer=None):
        self.requested = requested
        self.achievable = achievable
        self.layer = layer
        where = "" if layer is None else f" in layer {layer}"
        super().__init__(
            f"requested dim {requested} but numerical rank{where} is only {achievable}"
        )


class DivergenceError(ItssError, RuntimeError):
    """Training loss became non-finite or exceeded the divergence guard."""


class CorruptArtifactError(ItssError, IOError):
    """A persisted artifact failed magic, checksum or structural validation."""


class UnsupportedVersionError(CorruptArtifactError):
    """A persisted artifact was written with an unknown format version."""


class MissingArtifactError(ItssError, FileNotFoundError):
    """A prerequisite artifact for a CLI command does not exist."""
