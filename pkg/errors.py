"""
Error hierarchy for the LucidDream engine
Each error carries the exit code the command line reports for it
"""


class LucidDreamError(Exception):
    """Base class for every error raised by the engine"""

    exit_code = 1


class ValidationError(LucidDreamError, ValueError):
    """Invalid arguments, shapes or configuration values"""

    exit_code = 2


class ShapeError(ValidationError):
    """Tensor or frame dimensions do not fit the operation"""


class UnsupportedPaddingError(ShapeError):
    """Mirror padding at least as large as the padded axis"""


class UnsupportedSizeError(ValidationError):
    """Frame smaller than the network tile size"""


class IndexRangeError(ValidationError, IndexError):
    """Layer, feature-map or class index out of range"""


class UnknownPresetError(ValidationError):
    """Effect preset name not in the preset table"""


class ContractError(ValidationError):
    """A documented precondition was violated by the caller"""


class MissingInputError(LucidDreamError):
    """Frames, flows, images or weights that a run needs are absent"""

    exit_code = 3

    def __init__(self, message: str, missing=None):
        super().__init__(message)
        self.missing = list(missing or [])


class FormatError(LucidDreamError, ValueError):
    """A file does not follow its byte format"""

    exit_code = 4


class MagicError(FormatError):
    """Wrong magic number or magic bytes"""


class TruncatedError(FormatError):
    """Payload shorter than its header announces"""


class DimensionError(FormatError):
    """Header dimensions that cannot describe a valid payload"""


class WeightsShapeError(FormatError):
    """Weight tensors that do not match the network spec"""
