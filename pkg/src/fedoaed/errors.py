"""Exception types shared across the simulator."""


class FedoaedError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedoaedError):
    """Invalid configuration or incompatible dimensions supplied by the caller."""


class DataError(FedoaedError):
    """Malformed training data, e.g. labels outside the declared class range."""


class InternalError(FedoaedError):
    """Layout or shape mismatch between values that should always agree."""


class PartitionError(FedoaedError):
    """A partitioning scheme could not produce valid client shards."""


class IdxError(FedoaedError):
    """Base class for IDX file loading failures."""


class IdxMagicError(IdxError):
    """Unexpected magic number at the start of an IDX file."""


class IdxTruncatedError(IdxError):
    """IDX payload shorter than the header promises."""


class IdxCountMismatchError(IdxError):
    """Image and label files disagree on the sample count."""


class DivergenceError(FedoaedError):
    """Non-finite parameters appeared during local training."""

    def __init__(self, client_id: int, step: int, message: str = ""):
        self.client_id = client_id
        self.step = step
        detail = message or "non-finite parameters"
        super().__init__(f"client {client_id} diverged at local step {step}: {detail}")


class InsufficientSnapshots(FedoaedError):
    """Fewer snapshots collected than the denoiser's minimum; caller falls back."""


class DenoiserDivergence(FedoaedError):
    """The autoencoder produced a non-finite loss or reconstruction; caller falls back."""
