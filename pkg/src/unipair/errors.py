"""Exceptions raised by unipair."""


class UnipairError(Exception):
    """Base class for every error raised by this package."""


class ZeroRow(UnipairError, ValueError):
    """A feature row is too short to normalize."""

    def __init__(self, row: int, norm: float):
        self.row = row
        self.norm = norm
        super().__init__(f"row {row} has norm {norm:.3e}, below 1e-12")


class ShapeMismatch(UnipairError, ValueError):
    """Two batches (or a batch and a matrix) disagree in shape."""

    def __init__(self, what: str, left: tuple, right: tuple):
        self.left = left
        self.right = right
        super().__init__(f"{what}: shape {left} does not match {right}")


class NonFinite(UnipairError, ValueError):
    """An input contains NaN or infinity."""


class MissingWeights(UnipairError, ValueError):
    """A weighted loss was requested without a weight matrix."""


class MarginLengthMismatch(UnipairError, ValueError):
    """Per-anchor margins do not have one entry per anchor."""

    def __init__(self, got: int, expected: int):
        super().__init__(f"expected {expected} per-anchor margins, got {got}")


class TooFewItems(UnipairError, ValueError):
    """An operation needs at least two items to have a negative."""


class BadCutoff(UnipairError, ValueError):
    """A recall cutoff outside 1..B."""


class ConfigError(UnipairError, ValueError):
    """A configuration value violates its invariant."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class FormatError(UnipairError, ValueError):
    """An input file does not follow the expected format."""

    def __init__(self, path, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class DimMismatch(UnipairError, ValueError):
    """Two embedding files declare different dimensions."""

    def __init__(self, path_v, dim_v: int, path_t, dim_t: int):
        super().__init__(f"{path_v} has dim={dim_v} but {path_t} has dim={dim_t}")


class CountMismatch(UnipairError, ValueError):
    """Two embedding files hold different numbers of rows."""

    def __init__(self, path_v, count_v: int, path_t, count_t: int):
        self.counts = (count_v, count_t)
        super().__init__(f"{path_v} has {count_v} rows but {path_t} has {count_t} rows")


class Diverged(UnipairError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        super().__init__(f"loss became {loss} at epoch {epoch}, step {step}")
