"""Exception hierarchy shared by every cfalign module.

Each class carries the CLI exit code it maps to so the command-line layer can
translate failures without a lookup table of its own.
"""


class CfalignError(Exception):
    exit_code = 7


class DimensionError(CfalignError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 2


class ContractError(CfalignError):
    """A caller broke an operation's precondition."""


class NumericError(CfalignError, FloatingPointError):
    """A NaN/Inf appeared, or an input left its numeric domain."""


class ConfigError(CfalignError, ValueError):
    exit_code = 2


class TensorFileError(CfalignError, IOError):
    exit_code = 3


class CheckpointError(CfalignError, IOError):
    exit_code = 3


class TrainingDivergence(CfalignError):
    exit_code = 4

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DegenerateInputError(CfalignError):
    """The latent gradient vanished, so there is no direction to move in."""


class LowSupportError(CfalignError):
    exit_code = 5


class IneligibleSampleError(CfalignError):
    exit_code = 6


class ExperimentError(CfalignError):
    exit_code = 7
