"""Exception and warning types shared across the package."""


class InvalidArgumentError(ValueError):
    """An operation received arguments violating its preconditions."""


class DegenerateInputError(InvalidArgumentError):
    """Input is structurally valid but numerically degenerate (e.g. zero variance)."""


class ConfigError(ValueError):
    """An experiment config file failed validation.

    Carries a list of field-level problems so the CLI can report all of
    them at once before any compute starts.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DatasetFormatError(RuntimeError):
    """A dataset file exists but does not parse in the declared layout."""


class CheckpointFormatError(RuntimeError):
    """A checkpoint file is unreadable, truncated, or malformed."""


class CheckpointVersionError(CheckpointFormatError):
    """A checkpoint was written with an incompatible format version."""


class NonFiniteLossError(ArithmeticError):
    """Training produced a non-finite loss; the run aborts rather than continue."""


class DegenerateColumnWarning(UserWarning):
    """A correlation computation met a constant column; its entries were set to 0."""
