"""Exception taxonomy shared across the package."""


class MmfuseError(Exception):
    """Base class for all package errors."""


class ShapeError(MmfuseError):
    """Operand shapes are incompatible; message names both shapes."""


class ContractError(MmfuseError):
    """A caller violated an operation's precondition."""


class ConfigError(MmfuseError):
    """A configuration value is invalid or inconsistent."""


class FormatError(MmfuseError):
    """A serialized file is malformed; message names the field and byte offset."""


class CheckpointVersionMismatch(MmfuseError):
    """Checkpoint format version differs from the supported one."""


class CheckpointMissingTensor(MmfuseError):
    """A tensor named in the checkpoint manifest has no file on disk."""


class CheckpointShapeDrift(MmfuseError):
    """A stored tensor's shape disagrees with the model configuration."""
