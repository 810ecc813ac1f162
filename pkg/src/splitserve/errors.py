"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operands disagree on a dimension; message names both shapes."""


class ProtocolError(RuntimeError):
    """Malformed frame or a layer-service reply that violates the contract."""


class TransportError(RuntimeError):
    """Channel failure (disconnect, send/recv error); in-flight requests fail."""


class JobStateError(RuntimeError):
    """Client job invoked out of order (e.g. backward without a forward)."""


class ConfigError(ValueError):
    """Invalid scenario/job/model configuration."""
