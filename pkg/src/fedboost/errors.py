"""Exception hierarchy shared across the package."""


class FedBoostError(Exception):
    """Base class for all package errors."""


# --- model / training ---

class InvalidLayout(FedBoostError):
    pass


class NonFiniteInput(FedBoostError):
    pass


class EmptyDataset(FedBoostError):
    pass


class ShapeMismatch(FedBoostError):
    pass


# --- data generation ---

class InvalidCovariance(FedBoostError):
    pass


class DegenerateSplit(FedBoostError):
    pass


# --- crypto ---

class WeakKey(FedBoostError):
    pass


class PlaintextOutOfRange(FedBoostError):
    pass


class KeyMismatch(FedBoostError):
    pass


class CapacityExceeded(FedBoostError):
    pass


# --- quantization ---

class NonFiniteGradient(FedBoostError):
    pass


class InvalidWeight(FedBoostError):
    pass


class GradientOverflow(FedBoostError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


# --- aggregation ---

class EmptyCohort(FedBoostError):
    pass


class DegenerateCohort(FedBoostError):
    pass


# --- transport ---

class TransportError(FedBoostError):
    pass


class TransportTimeout(TransportError):
    pass


class ChannelClosed(TransportError):
    pass


class FrameTooLarge(TransportError):
    pass


# --- protocol ---

class ProtocolViolation(FedBoostError):
    pass


class RoundAborted(FedBoostError):
    pass


# --- runner ---

class ConfigError(FedBoostError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class IoError(FedBoostError):
    pass
