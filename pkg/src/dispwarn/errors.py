"""Exception hierarchy. Each family maps to a CLI exit code."""


class PipelineError(Exception):
    exit_code = 1


class ConfigInvalid(PipelineError, ValueError):
    exit_code = 2


class MissingArtifact(PipelineError, FileNotFoundError):
    exit_code = 3


class DataError(PipelineError, ValueError):
    exit_code = 4


class NumericalFailure(PipelineError, ArithmeticError):
    exit_code = 5


# panel
class DuplicateKey(DataError):
    pass


class UnbalancedPanel(DataError):
    pass


class NegativeFlow(DataError):
    pass


class RaggedFeatures(DataError):
    pass


class UnknownCountry(DataError, KeyError):
    pass


class NonPositiveThreshold(DataError):
    pass


# labeling
class SeriesTooShort(DataError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass


# features
class InsufficientHistory(DataError):
    pass


class UnmappedColumn(ConfigInvalid):
    pass


class AllMissingColumn(DataError):
    pass


# gbm / calibration / metrics
class SingleClassInput(DataError):
    pass


SingleClass = SingleClassInput


class DegenerateFeatures(NumericalFailure):
    pass


class WidthMismatch(DataError):
    pass


class TooFewRowsPerClass(DataError):
    pass


class NoPositives(DataError):
    pass


class LengthMismatch(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class InvalidScript(ConfigInvalid):
    pass
