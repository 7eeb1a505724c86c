"""Exception types shared across the package."""


class ElasticError(Exception):
    """Base class for all package errors."""


class ShapeError(ElasticError, ValueError):
    """Raised when tensor extents do not line up."""


class DataError(ElasticError, ValueError):
    """Raised for malformed datasets, labels or checkpoint files."""


class TapeError(ElasticError, RuntimeError):
    """Raised on invalid use of the gradient tape."""


class GraphError(ElasticError, ValueError):
    """Raised for malformed model graphs or unknown architectures."""


class PruneError(ElasticError, ValueError):
    """Raised for illegal drop sets, record mismatches and bad levels."""


class DivergenceError(ElasticError, ArithmeticError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss
