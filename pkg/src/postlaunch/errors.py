"""Exception hierarchy.

Every error class carries a distinct ``exit_code`` so the CLI can map
failures to stable process exit statuses. Codes 0-2 are reserved
(success, validation-verdict failure, usage).
"""


class PostLaunchError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class MissingValue(PostLaunchError):
    exit_code = 4

    def __init__(self, unit_id, column):
        self.unit_id = unit_id
        self.column = column
        super().__init__(f"missing or non-numeric value at unit {unit_id!r}, column {column!r}")


class DuplicateUnitId(PostLaunchError):
    exit_code = 5

    def __init__(self, unit_id):
        self.unit_id = unit_id
        super().__init__(f"duplicate unit id {unit_id!r}")


class UnknownTreatedId(PostLaunchError):
    exit_code = 6

    def __init__(self, unit_id):
        self.unit_id = unit_id
        super().__init__(f"treated id {unit_id!r} does not match any unit")


class BadT0(PostLaunchError):
    exit_code = 7


class RowMismatch(PostLaunchError):
    exit_code = 8

    def __init__(self, unit_id):
        self.unit_id = unit_id
        super().__init__(f"no covariate row for panel unit {unit_id!r}")


class UnknownUnitId(PostLaunchError):
    exit_code = 9

    def __init__(self, unit_id):
        self.unit_id = unit_id
        super().__init__(f"unknown unit id {unit_id!r}")


class EmptyDonorSet(PostLaunchError):
    exit_code = 10


class ExcludedIsTreated(PostLaunchError):
    exit_code = 11

    def __init__(self, unit_id):
        self.unit_id = unit_id
        super().__init__(f"cannot exclude treated unit {unit_id!r} from the donor pool")


class BadFraction(PostLaunchError):
    exit_code = 12


class EmptyGroup(PostLaunchError):
    exit_code = 13


class TooFewDonors(PostLaunchError):
    exit_code = 14


class SingularSystem(PostLaunchError):
    exit_code = 15


class ZeroActualNorm(PostLaunchError):
    exit_code = 16


class InsufficientColumns(PostLaunchError):
    exit_code = 17


class AllCandidatesFailed(PostLaunchError):
    exit_code = 18


class ShapeMismatch(PostLaunchError):
    exit_code = 19


class TooFewUnits(PostLaunchError):
    exit_code = 20


class InsufficientDonors(PostLaunchError):
    exit_code = 21


class EmptySplit(PostLaunchError):
    exit_code = 22


class EmptyControl(PostLaunchError):
    exit_code = 23


class ConfigInvalid(PostLaunchError):
    exit_code = 24
