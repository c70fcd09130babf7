"""Exception hierarchy shared by every module."""


class TempRegError(Exception):
    """Base class for all package errors."""


class InvalidShape(TempRegError, ValueError):
    pass


class ShapeMismatch(TempRegError, ValueError):
    pass


class CropUnderflow(TempRegError, ValueError):
    pass


class SwitchMismatch(TempRegError, ValueError):
    pass


class StaleCache(TempRegError, RuntimeError):
    pass


class ArchError(TempRegError, ValueError):
    pass


class InvalidInit(TempRegError, ValueError):
    pass


class NoData(TempRegError, ValueError):
    pass


class SpecError(TempRegError, ValueError):
    pass


class FormatError(TempRegError, ValueError):
    pass


class IoError(TempRegError, OSError):
    pass


class WrongModel(TempRegError, ValueError):
    pass


class InvalidInput(TempRegError, ValueError):
    pass


class UndefinedMetric(TempRegError, ValueError):
    pass
