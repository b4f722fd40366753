"""Exception hierarchy. CLI exit codes are attached to the three families."""


class CKDError(Exception):
    exit_code = 1


class ConfigError(CKDError, ValueError):
    exit_code = 2


class DataError(CKDError):
    exit_code = 3


class NumericalError(CKDError, ArithmeticError):
    exit_code = 4


class ArgumentError(CKDError, ValueError):
    exit_code = 2


class ShapeError(CKDError, ValueError):
    exit_code = 3


class WindowSizeError(ShapeError):
    pass


class MissingModality(DataError):
    pass


class CoRegistrationError(DataError):
    pass


class LabelCodeError(DataError):
    pass


class EmptyVolumeError(DataError):
    pass


class MissingLabelError(DataError):
    pass


class IoError(DataError, OSError):
    pass


class FormatError(DataError):
    pass
