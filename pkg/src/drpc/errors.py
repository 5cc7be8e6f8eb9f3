"""Exception types shared across the package."""


class DRPCError(Exception):
    """Base class for all package errors."""


class DimensionError(DRPCError, ValueError):
    """An input tensor has the wrong rank or extent along some axis."""


class ContractError(DRPCError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(DRPCError, ValueError):
    """An invalid or inconsistent configuration."""


class DataError(DRPCError, ValueError):
    """Input data outside its valid domain (bad label ids, pixel ranges, ...)."""


class GeometryError(DRPCError, ValueError):
    """A crop or region that does not fit the map it refers to."""


class NonFiniteLossError(DRPCError, RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, step=None, batch_ids=None, dump_path=None):
        super().__init__(message)
        self.step = step
        self.batch_ids = list(batch_ids or [])
        self.dump_path = dump_path
