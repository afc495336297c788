"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Grid or image dimensions are invalid or incompatible."""


class ShapeError(ValueError):
    """Tensor or layer shapes do not line up."""


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class ParameterError(ValueError):
    """A scalar parameter is outside its allowed range."""


class DegenerateInputError(ValueError):
    """Input has too little variety for the requested statistic."""


class ContractError(RuntimeError):
    """A runtime precondition of training or inference was violated."""
