"""
Error taxonomy for the continual LoRA toolkit
"""

from typing import Iterable, List, Optional, Tuple


class ContinualLoraError(Exception):
    """Base class for every error raised by the toolkit"""


class ShapeError(ContinualLoraError, ValueError):
    """Operand shapes do not line up"""


class ConfigError(ContinualLoraError, ValueError):
    """Invalid configuration value or configuration file"""


class ContractError(ContinualLoraError, RuntimeError):
    """A strategy state machine was driven out of order or with the wrong state"""


class NumericError(ContinualLoraError, ArithmeticError):
    """A numerical routine failed to produce a trustworthy result"""

    def __init__(self, message: str, residual: Optional[float] = None, iterations: Optional[int] = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ComplementEmptyError(NumericError):
    """The accumulated adapter rows already span the whole input space"""


class DivergenceError(NumericError):
    """Training loss blew past the divergence guard"""

    def __init__(self, message: str, step: int, loss: float, initial_loss: float):
        super().__init__(message, residual=loss, iterations=step)
        self.step = step
        self.loss = loss
        self.initial_loss = initial_loss


class AdapterFormatError(ContinualLoraError, ValueError):
    """Adapter/weights file could not be parsed"""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class HeaderError(AdapterFormatError):
    """Header length field or header JSON is malformed"""


class TruncatedPayloadError(AdapterFormatError):
    """Tensor payload extends past the end of the file"""


class UnknownDtypeError(AdapterFormatError):
    """Tensor dtype is not one of F32/F64"""


class OffsetOverlapError(AdapterFormatError):
    """Tensor payloads do not tile the data section exactly (overlap or unused bytes)"""


class IncompleteDataError(ContinualLoraError, ValueError):
    """A metric needs score cells that were never evaluated"""

    def __init__(self, message: str, missing: Iterable[Tuple[int, int]] = ()):
        self.missing: List[Tuple[int, int]] = list(missing)
        if self.missing:
            cells = ", ".join(f"({j},{k})" for j, k in self.missing[:20])
            more = "" if len(self.missing) <= 20 else f" and {len(self.missing) - 20} more"
            message = f"{message}: missing cells {cells}{more}"
        super().__init__(message)


class UndefinedMetricError(ContinualLoraError, ValueError):
    """Metric is not defined for the given matrix size"""


class ScoreFileError(ContinualLoraError, ValueError):
    """Score CSV row could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
