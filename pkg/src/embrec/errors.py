"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for configuration
problems, 3 for bad or inconsistent data, 4 for numerical failures.
"""


class RecsysError(Exception):
    exit_code = 1


class ConfigError(RecsysError, ValueError):
    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(RecsysError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class DuplicateIdError(DataError):
    def __init__(self, item_id):
        self.item_id = item_id
        super().__init__(f"duplicate item_id {item_id!r}")


class EmptyDatasetError(DataError):
    pass


class EmptyHistoryError(DataError):
    pass


class MissingItemError(DataError, KeyError):
    def __init__(self, item_id):
        self.item_id = item_id
        super().__init__(f"unknown item_id {item_id!r}")

    def __str__(self):
        return self.args[0]


class CoverageError(DataError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        shown = ", ".join(self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"positives missing from candidate pool: {shown}{more}")


class SamplingError(DataError):
    pass


class ContractError(RecsysError, ValueError):
    pass


class ShapeError(RecsysError, ValueError):
    pass


class FormatError(DataError):
    """Wrong magic or unsupported file version."""


class IntegrityError(DataError):
    def __init__(self, message, offset=None):
        self.offset = offset
        where = "" if offset is None else f" at offset {offset}"
        super().__init__(f"{message}{where}")


class ConsistencyError(DataError):
    pass


class CompatibilityError(DataError):
    pass


class NumericError(RecsysError, ArithmeticError):
    exit_code = 4


class DegenerateVectorError(NumericError):
    pass


class StageError(RecsysError):
    """A pipeline stage failed; wraps the original error."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage {stage!r} failed: {cause}")
