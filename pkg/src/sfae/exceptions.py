"""Exception hierarchy shared across the package."""


class SfaeError(Exception):
    """Base class for all package errors."""


class ContractError(SfaeError, ValueError):
    """Inputs violate a documented precondition (shape, range, labels)."""


class RangeError(ContractError):
    pass


class FormatError(SfaeError, ValueError):
    """A file parsed but its content is not a valid volume or archive."""


class PlacementError(SfaeError, RuntimeError):
    """No valid location exists for a synthetic anomaly."""


class BackboneInitError(SfaeError, RuntimeError):
    """Pretrained backbone weights could not be found or loaded."""


class SpecError(SfaeError, ValueError):
    """A model specification is invalid for the requested geometry."""


class DataContractError(ContractError):
    """Training data violates the normal-only contract."""


class ConfigError(SfaeError, ValueError):
    pass
