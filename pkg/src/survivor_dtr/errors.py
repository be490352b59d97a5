"""Exception types raised across the package."""


class SurvivorDTRError(Exception):
    """Base class for data and estimation errors (CLI exit code 2)."""


class MonotoneViolation(SurvivorDTRError):
    """A trajectory has a field present where the censoring/death pattern forbids it."""

    def __init__(self, field, row=None):
        self.field = field
        self.row = row
        where = f" at row {row}" if row is not None else ""
        super().__init__(f"illegal presence of field '{field}'{where}")


class ParseError(SurvivorDTRError):
    def __init__(self, row, column, message=""):
        self.row = row
        self.column = column
        detail = f": {message}" if message else ""
        super().__init__(f"cannot parse row {row}, column '{column}'{detail}")


class EmptyStratum(SurvivorDTRError):
    def __init__(self, name, fold=None):
        self.name = name
        self.fold = fold
        where = f" (fold {fold})" if fold is not None else ""
        super().__init__(f"conditioning set '{name}' is empty{where}")


class NonpositiveDenominator(SurvivorDTRError):
    def __init__(self, value):
        self.value = value
        super().__init__(f"denominator estimate {value!r} is not positive")


class ArmNotFitted(SurvivorDTRError):
    def __init__(self, which, arm):
        self.which = which
        self.arm = arm
        super().__init__(f"nuisance '{which}' has no fit for arm {arm}")


class DimensionMismatch(SurvivorDTRError):
    pass


class ZeroOmega(SurvivorDTRError):
    pass
