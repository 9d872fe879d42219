"""Exception hierarchy shared by every module."""


class VrbError(Exception):
    """Base class for all package errors."""


class ShapeError(VrbError, ValueError):
    pass


class NumericError(VrbError, ArithmeticError):
    pass


class ConfigurationError(VrbError, ValueError):
    pass


class ProtocolError(VrbError, ValueError):
    """A dialog act references something the schema does not define."""


class StateError(VrbError, RuntimeError):
    """An operation was applied to an object in the wrong lifecycle state."""


class PreconditionError(VrbError, ValueError):
    pass


class StructureError(VrbError, ValueError):
    pass


class CompatibilityError(VrbError, ValueError):
    """Schema hash of a corpus or checkpoint does not match the world in use."""


class VersionError(VrbError, ValueError):
    pass


class IntegrityError(VrbError, ValueError):
    pass


class ConsistencyError(VrbError, RuntimeError):
    pass
