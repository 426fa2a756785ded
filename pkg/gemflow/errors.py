"""
GemFlow Errors
Exception hierarchy shared by the library and the command line
"""

from typing import Optional


class GemflowError(Exception):
    """Base class for every gemflow failure"""

    exit_code = 1


class ConfigError(GemflowError, ValueError):
    """Invalid configuration: widths, dataset ids, config files"""

    exit_code = 2


class ShapeError(ConfigError):
    """Width or shape mismatch between arrays and networks"""


class InvalidArgumentError(ConfigError):
    """An argument outside an operation's precondition"""


class DomainError(InvalidArgumentError):
    """A function evaluated outside its domain"""


class UndefinedRatioError(InvalidArgumentError):
    """q puts mass where p does not, so q/p is undefined"""


class NumericFault(GemflowError, ArithmeticError):
    """Non-finite loss, gradient or velocity"""

    exit_code = 3

    def __init__(self, message: str, record=None):
        super().__init__(message)
        # partial RunRecord, kept so an aborted run can still be inspected
        self.record = record


class DataFormatError(GemflowError, OSError):
    """Malformed CSV or JSON input"""

    exit_code = 4

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line
