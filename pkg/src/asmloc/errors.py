class ASMLocError(Exception):
    pass


class ContractError(ASMLocError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    pass


class ConfigurationError(ASMLocError, ValueError):
    pass


class NumericalError(ASMLocError, FloatingPointError):
    pass


class GenerationError(ASMLocError):
    pass


class FeatureFormatError(ASMLocError, IOError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class DimMismatchError(FeatureFormatError):
    pass


class TruncatedFileError(FeatureFormatError):
    pass


class CheckpointError(ASMLocError, IOError):
    pass
