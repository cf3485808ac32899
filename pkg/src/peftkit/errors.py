"""Exception hierarchy shared by every peftkit module.

The CLI maps these onto exit codes: usage/config problems exit 2, bad input
data exits 3 and numeric failures exit 4.
"""


class PeftkitError(Exception):
    exit_code = 1


class UsageError(PeftkitError, ValueError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class ShapeError(UsageError):
    pass


class RankError(UsageError):
    pass


class NotMergeableError(UsageError):
    pass


class DataError(PeftkitError, ValueError):
    exit_code = 3


class ChecksumError(DataError):
    pass


class NumericError(PeftkitError, FloatingPointError):
    exit_code = 4
