"""
Exception types shared across the library
The CLI maps these onto its exit-code contract
"""


class MtscanError(Exception):
    """Base class for every error raised deliberately by mtscan"""

    kind = "error"


class ShapeError(MtscanError, ValueError):
    """Operand shapes or extents violate an op's precondition"""

    kind = "shape"


class ConfigError(MtscanError, ValueError):
    """Model config or CLI input does not satisfy its schema"""

    kind = "config"


class CheckpointError(MtscanError):
    """MTKP file is missing, truncated, or has the wrong magic/version"""

    kind = "checkpoint"


class NonFiniteError(MtscanError, FloatingPointError):
    """An op produced NaN/Inf while the finite check was enabled"""

    kind = "nonfinite"


class DivergenceError(MtscanError):
    """Training loss became NaN/Inf"""

    kind = "divergence"


class VerificationError(MtscanError):
    """A gradient check or oracle comparison exceeded its tolerance"""

    kind = "verification"
