"""Exception hierarchy shared by every stage."""


class FurnsetError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(FurnsetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateId(FurnsetError):
    def __init__(self, identity_id: str):
        self.identity_id = identity_id
        super().__init__(f"duplicate id {identity_id!r}")


class SchemaError(FurnsetError):
    pass


class FormatError(FurnsetError):
    pass


class DataError(FurnsetError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message)


class ShapeError(FurnsetError, ValueError):
    pass


class InsufficientData(FurnsetError):
    pass


class BudgetError(FurnsetError):
    pass


class LabelError(FurnsetError):
    pass


class MiningError(FurnsetError):
    pass


class ValidationError(FurnsetError):
    pass


class EmptyPoolError(FurnsetError):
    pass


class SamplingError(FurnsetError):
    pass


class EmptyCorpusError(FurnsetError):
    pass


class MissingEntity(FurnsetError, KeyError):
    def __init__(self, identity_id: str):
        self.identity_id = identity_id
        super().__init__(identity_id)

    def __str__(self) -> str:
        return f"no context vector for {self.identity_id!r}"


class ContractError(FurnsetError):
    pass


class PoolExhausted(FurnsetError):
    def __init__(self, instance_id: str, column: int):
        self.instance_id = instance_id
        self.column = column
        super().__init__(f"candidate pool of instance {instance_id!r} exhausted at column {column}")


class ConfigError(FurnsetError):
    pass


class IoError(FurnsetError, OSError):
    pass
