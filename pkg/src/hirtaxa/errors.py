"""Exception hierarchy shared by every module.

Each exception carries an ``exit_code`` used by the command-line tool.
"""


class HirTaxaError(Exception):
    exit_code = 1


class ConfigError(HirTaxaError, ValueError):
    exit_code = 2


class NumericalError(HirTaxaError, ArithmeticError):
    exit_code = 3


class DataIOError(HirTaxaError, OSError):
    exit_code = 4


# taxonomy
class InconsistentParent(ConfigError):
    pass


class NonPrefixLabels(ConfigError):
    pass


class InfeasibleSplit(ConfigError):
    pass


class LevelOutOfRange(HirTaxaError, IndexError):
    pass


# synthdata
class ConfigInvalid(ConfigError):
    pass


class SchemaMismatch(DataIOError):
    pass


class CorruptRecord(DataIOError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


# corrupt
class BadKernel(ConfigError):
    pass


class BadAlphabet(HirTaxaError, ValueError):
    pass


# embedcore / autograd
class DegenerateNorm(NumericalError):
    pass


class EmptyFeature(HirTaxaError, ValueError):
    pass


class UnknownPrompt(HirTaxaError, KeyError):
    pass


class NonFiniteError(NumericalError):
    pass


class GraphReuse(HirTaxaError, RuntimeError):
    pass


class ShapeMismatch(HirTaxaError, ValueError):
    pass


# objectives
class BatchTooSmall(HirTaxaError, ValueError):
    pass


# evalharness
class GridMismatch(HirTaxaError, ValueError):
    exit_code = 5
