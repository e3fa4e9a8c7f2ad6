"""Exception hierarchy.

Every error raised by the library derives from :class:`FusionError` and
carries the process exit code the CLI maps it to.
"""


class FusionError(Exception):
    exit_code = 1
    module = "fusionkit"


# -- configuration (exit 2) -------------------------------------------------


class ConfigError(FusionError):
    exit_code = 2
    module = "cli_config"


class ParseError(ConfigError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class UnknownField(ConfigError):
    def __init__(self, field, where="config"):
        self.field = field
        super().__init__(f"unknown field {field!r} in {where}")


class ConfigTypeError(ConfigError):
    def __init__(self, field, expected, found):
        self.field = field
        self.expected = expected
        self.found = found
        super().__init__(f"{field}: expected {expected}, found {found}")


class UnknownAlgorithm(ConfigError):
    module = "merge_algorithms"


class UnexpectedParameter(ConfigError):
    module = "merge_algorithms"


# -- pool / structure validation (exit 3) -----------------------------------


class ValidationError(FusionError):
    exit_code = 3
    module = "model_pool"


class KeyMismatch(ValidationError):
    module = "tensor_core"

    def __init__(self, only_a, only_b):
        self.only_a = sorted(only_a)
        self.only_b = sorted(only_b)
        super().__init__(
            f"key sets differ: only in first {self.only_a}, only in second {self.only_b}"
        )


class ShapeMismatch(ValidationError):
    module = "tensor_core"

    def __init__(self, key, shape_a, shape_b):
        self.key = key
        self.shapes = (tuple(shape_a), tuple(shape_b))
        super().__init__(f"{key}: shape {tuple(shape_a)} vs {tuple(shape_b)}")


class LengthMismatch(ValidationError):
    module = "tensor_core"


class PoolNotMergeable(ValidationError):
    def __init__(self, report):
        self.report = report
        super().__init__("model pool is not mergeable:\n" + report.describe())


class UnknownModel(ValidationError):
    pass


class NoBaseModel(ValidationError):
    pass


class EmptyPool(ValidationError):
    pass


class MissingStats(ValidationError):
    module = "merge_algorithms"


class GramShapeMismatch(ValidationError):
    module = "merge_algorithms"


class InvalidPattern(ValidationError):
    pass


class MalformedArchitecture(ValidationError):
    module = "ensemble_eval"


class EmptyEnsemble(ValidationError):
    module = "ensemble_eval"


# -- numeric / algorithm (exit 4) -------------------------------------------


class NumericError(FusionError, ValueError):
    exit_code = 4
    module = "tensor_core"


class NonFiniteScalar(NumericError):
    pass


class DivisionByZero(NumericError):
    pass


class ZeroNorm(NumericError):
    pass


class NotRank2(NumericError):
    pass


class NonFiniteInput(NumericError):
    pass


class NoConvergence(NumericError):
    pass


class SingularSystem(NumericError):
    module = "merge_algorithms"


class NegativeFisher(NumericError):
    module = "merge_algorithms"


class NegativeWeight(NumericError):
    module = "merge_algorithms"


class ZeroWeightSum(NumericError):
    module = "merge_algorithms"


class InvalidTrimFraction(NumericError):
    module = "merge_algorithms"


class InvalidSparsity(NumericError):
    module = "merge_algorithms"


class InvalidParameter(NumericError):
    module = "merge_algorithms"


# -- checkpoint I/O (exit 5) ------------------------------------------------


class CheckpointIOError(FusionError):
    exit_code = 5
    module = "checkpoint_io"


class IoError(CheckpointIOError):
    pass


class MalformedHeader(CheckpointIOError):
    pass


class UnsupportedDtype(CheckpointIOError):
    pass


class UnknownKey(CheckpointIOError, LookupError):
    pass
