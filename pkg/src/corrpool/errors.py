"""Exception hierarchy shared by every module of the package."""


class CorrPoolError(Exception):
    """Base class for all errors raised by corrpool."""


class ShapeError(CorrPoolError, ValueError):
    pass


class EmptyUtteranceError(CorrPoolError, ValueError):
    pass


class InsufficientFramesError(CorrPoolError, ValueError):
    pass


class ParameterError(CorrPoolError, ValueError):
    pass


class NonFiniteError(CorrPoolError, FloatingPointError):
    """A computation produced NaN or Inf."""


class NormalizationError(CorrPoolError, ValueError):
    pass


class FormatError(CorrPoolError, ValueError):
    """Malformed on-disk data. ``offset`` is the byte (or line) position, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class SpecError(CorrPoolError, ValueError):
    pass


class CheckpointError(CorrPoolError):
    pass


class TrainingError(CorrPoolError, RuntimeError):
    def __init__(self, message, epoch=None, step=None):
        ctx = []
        if epoch is not None:
            ctx.append(f"epoch {epoch}")
        if step is not None:
            ctx.append(f"step {step}")
        if ctx:
            message = f"{message} [{', '.join(ctx)}]"
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class AlignmentError(CorrPoolError, ValueError):
    pass
