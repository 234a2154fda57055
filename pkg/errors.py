"""Exception hierarchy shared by every module; the CLI maps exit_code to the process status."""


class LsussError(Exception):
    """Base class for all segmentation toolkit errors"""
    exit_code = 4


class ValidationError(LsussError):
    """Invalid argument, window, configuration or architecture"""
    exit_code = 2


class ShapeError(ValidationError):
    """Array or channel dimensions do not match"""


class OracleCapError(ValidationError):
    """Brute-force oracle refused an input above its size cap"""


class DataError(LsussError):
    """Dataset ingestion or parse failure"""
    exit_code = 3

    def __init__(self, message: str, path=None, line=None):
        location = ''
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ': '
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class ExtractionExhausted(LsussError):
    """Fewer admissible change-points remain than were requested"""
    exit_code = 3


class InvariantViolation(LsussError):
    """An internal consistency guard failed"""
    exit_code = 4
