"""Exception types raised across the package."""


class DimensionMismatch(ValueError):
    pass


class NotPositiveDefinite(ValueError):
    """Cholesky failed at every rung of the jitter ladder."""


class NonPositiveHyperparameter(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class InvalidPlan(ValueError):
    pass


class InvalidLayerIndex(IndexError):
    pass


class NonFiniteObjective(FloatingPointError):
    pass


class DataError(ValueError):
    """Base for dataset ingestion failures."""


class ParseError(DataError):
    def __init__(self, row, col, cell):
        super().__init__(f"cannot parse {cell!r} as a number at line {row}, column {col}")
        self.row = row
        self.col = col
        self.cell = cell


class RaggedRows(DataError):
    pass


class EmptyFile(DataError):
    pass


class ConfigError(ValueError):
    pass


class ModelFileError(ValueError):
    pass
