"""Exception types shared across the package."""


class MalformedRecord(ValueError):
    """An ATOM record is too short or carries non-numeric coordinates."""


class EmptyChain(ValueError):
    """The selected chain has fewer than two backbone-complete residues."""


class ChainNotFound(ValueError):
    """The requested chain id does not occur in the file."""


class DegenerateGeometry(ValueError):
    """Collinear atoms make a dihedral angle undefined."""


class DimensionMismatch(ValueError):
    """Array dimensions disagree with the model or graph layout."""


class NoMaskable(ValueError):
    """Every residue has both dihedral angles undefined; nothing to mask."""


class ShapeMismatch(ValueError):
    """Tensor operation applied to incompatible shapes."""


class NonFinite(FloatingPointError):
    """An operation produced inf or nan while checked mode was active."""


class BatchTooSmall(ValueError):
    """The mutual-information estimator needs at least two proteins."""


class MissingEmbedding(KeyError):
    """No stored embedding for the requested protein id."""


class LabelOutOfRange(ValueError):
    """A dataset label falls outside [0, n_classes)."""


class EmptyDataset(ValueError):
    """Evaluation requested on a dataset with no records."""
