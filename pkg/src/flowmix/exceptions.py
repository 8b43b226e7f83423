"""Exception hierarchy shared by every flowmix module."""


class FlowmixError(Exception):
    """Base class for all errors raised by flowmix."""


class DimensionError(FlowmixError, ValueError):
    """Tensor or array shapes are incompatible."""


class ContractError(FlowmixError, ValueError):
    """A call violated an operation's preconditions."""


class TapeError(FlowmixError, RuntimeError):
    """The gradient tape is in the wrong state (e.g. already consumed)."""


class BatchSizeError(FlowmixError, ValueError):
    """Batch statistics requested on a batch that is too small."""


class ConfigurationError(FlowmixError, ValueError):
    """A model was called with a configuration it was not built for."""


class InputError(FlowmixError, ValueError):
    """User-supplied data is empty, malformed or out of range."""


class SizingError(FlowmixError, ValueError):
    """No decoder size satisfies the parameter budget."""


class UnsupportedError(FlowmixError, NotImplementedError):
    """The requested quantity has no closed form for this family."""


class ParseError(InputError):
    """A point-cloud file could not be parsed.

    Attributes:
        path: File being read.
        line: 1-based line number of the offending line, if known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class NumericError(FlowmixError, FloatingPointError):
    """A non-finite value appeared during a forward computation.

    Attributes:
        where: Human readable location (layer index, component, loss term).
    """

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(message if where is None else f"{message} [{where}]")


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss or gradient.

    Attributes:
        model: The model restored to its last good state.
        log: The training log up to the failure.
    """

    def __init__(self, message, where=None, model=None, log=None):
        super().__init__(message, where)
        self.model = model
        self.log = log
