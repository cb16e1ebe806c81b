"""
Exception hierarchy for the LAQ simulator.
"""


class LAQError(Exception):
    """Base class for all simulator errors"""


class CodecError(LAQError, ValueError):
    """Invalid quantizer input or malformed wire message"""


class ConfigError(LAQError, ValueError):
    """Invalid run configuration or experiment file"""


class UnsupportedModelError(ConfigError):
    """Operation not defined for the requested model variant"""


class DataError(LAQError):
    """Dataset missing, malformed or inconsistent"""


class SyncError(LAQError):
    """Server and worker copies of a stored quantization diverged"""


class DivergenceError(LAQError):
    """Training loss became non-finite or exceeded the divergence limit"""

    def __init__(self, message: str, iteration: int, loss: float):
        super().__init__(message)
        self.iteration = iteration
        self.loss = loss
