class ConvgapError(Exception):
    """Base class for all errors raised by convgap."""


class CheckpointFormatError(ConvgapError):
    """Container is malformed: missing/unexpected tensor, bad shape, version, truncation."""

    def __init__(self, message, tensor=None):
        super().__init__(message if tensor is None else f"{tensor}: {message}")
        self.tensor = tensor


class ConfigError(ConvgapError):
    pass


class TokenRangeError(ConvgapError):
    pass


class HookError(ConvgapError):
    pass


class UnpairedCheckpointsError(ConvgapError):
    pass


class WindowError(ConvgapError):
    pass


class MoERejectedError(ConvgapError):
    """Raised when an MoE-flagged checkpoint reaches a dense-MLP intervention."""


class LensFitDivergedError(ConvgapError):
    def __init__(self, layer, step, loss):
        super().__init__(f"tuned-lens fit diverged at layer {layer}, step {step} (loss={loss})")
        self.layer = layer
        self.step = step
        self.loss = loss


class EmptyMatchError(ConvgapError):
    pass


class AlignmentError(ConvgapError):
    pass


class TemplateError(ConvgapError):
    pass


class SchemaError(ConvgapError):
    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
