"""Exception taxonomy shared across the toolkit.

Exit-code mapping for the CLI lives in cli.py: ConfigError -> 2, data errors
-> 3, numerical failures -> 4.
"""


class UsbdError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(UsbdError):
    """Invalid configuration value or combination."""


# --- data / graph errors -----------------------------------------------------

class DataError(UsbdError):
    """Base class for malformed or inconsistent input data."""


class AsymmetricAdjacency(DataError):
    pass


class NegativeWeight(DataError):
    pass


class WeightOutOfRange(DataError):
    pass


class NonzeroDiagonal(DataError):
    pass


class FeatureShapeMismatch(DataError):
    pass


class ZeroFeatures(DataError):
    """Feature matrix has (near-)zero Frobenius norm; energy is undefined."""


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class InconsistentIndicator(DataError):
    """An edge connects nodes assigned to different graphs."""


class LabelOutOfRange(DataError):
    pass


class FeatureDimMismatch(DataError):
    pass


class AllZeroWeights(DataError):
    pass


class AllGraphsDegenerate(DataError):
    """Every graph in the domain has zero feature norm."""


class SpecMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class SchemaVersionMismatch(DataError):
    pass


class CorruptField(DataError):
    pass


# --- numerical errors --------------------------------------------------------

class NumericalError(UsbdError):
    """Base class for solver or differentiation failures."""


class ShapeMismatch(NumericalError):
    def __init__(self, primitive, detail):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


class NotScalarLoss(NumericalError):
    pass


class NonSymmetricInput(NumericalError):
    pass


class SinkhornDiverged(NumericalError):
    """Scaling vectors became non-finite; epsilon too small for the cost scale."""


class KTooSmall(ConfigError):
    pass
