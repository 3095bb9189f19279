"""Exception types shared across the package."""


class VlmError(Exception):
    """Base class for all package errors."""


class ShapeError(VlmError):
    """Operands have incompatible shapes."""


class ConfigError(VlmError):
    """A configuration value is out of range or inconsistent."""


class ContractError(VlmError):
    """A caller violated an operation's precondition."""


class DegenerateBatchError(VlmError):
    """A loss was requested over zero unmasked positions."""


class CheckpointError(VlmError):
    """Checkpoint file is malformed or does not match the config."""


class DivergenceError(VlmError):
    """Training produced a non-finite loss."""


class DataError(VlmError):
    """A dataset or caption file is malformed or insufficient."""
