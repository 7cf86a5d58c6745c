"""Shared project exceptions."""


class TractStackError(Exception):
    """Base class for every error raised by tract_stack."""


class ConfigError(TractStackError):
    """Configuration is missing or invalid."""


class ShapeError(TractStackError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class FormatError(TractStackError):
    """A file does not follow the expected on-disk format."""


class UnsupportedDatatype(FormatError):
    """NIfTI datatype code outside the supported set."""


class CorruptData(FormatError):
    """Volume payload contains NaN or Inf values."""


class ChannelCountError(FormatError):
    """Peak volume does not carry exactly nine channels."""


class CorruptCheckpoint(FormatError):
    """Checkpoint payload is truncated or does not match its config."""


class IoError(TractStackError):
    """A file could not be read or written."""


class DegenerateDataset(TractStackError):
    """Training data cannot define the class weighting."""


class PairingError(TractStackError):
    """Predictions and references do not cover the same subjects."""


class SpecError(TractStackError):
    """Phantom specification is geometrically invalid."""


class DivergenceError(TractStackError):
    """Training produced a non-finite loss."""

    def __init__(
        self,
        message: str,
        *,
        epoch: int | None = None,
        batch: int | None = None,
        stage: str | None = None,
    ) -> None:
        self.epoch = epoch
        self.batch = batch
        self.stage = stage
        context = [
            f"{key}={value}"
            for key, value in (("stage", stage), ("epoch", epoch), ("batch", batch))
            if value is not None
        ]
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)

    def with_stage(self, stage: str) -> "DivergenceError":
        """Return a copy carrying an outer stage label, e.g. ``stage1/xy``."""
        inner = f"{stage}/{self.stage}" if self.stage else stage
        base = str(self.args[0]).split(" (", 1)[0]
        return DivergenceError(base, epoch=self.epoch, batch=self.batch, stage=inner)
