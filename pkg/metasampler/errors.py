"""Exception hierarchy for metasampler and the CLI exit codes they map to."""

import click

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_PROTOCOL = 4


class MetaSamplerError(Exception):
    """Base class for every error raised by the package."""

    exit_code = EXIT_INPUT


class ContractViolation(MetaSamplerError, ValueError):
    """A caller broke an operation's precondition (shapes, arity, ranges)."""


class TensorIndexError(MetaSamplerError, IndexError):
    """An index passed to a gather or sampler is out of range."""


class DegenerateInputError(MetaSamplerError, ValueError):
    """Input geometry has no extent (e.g. every point identical)."""


class FormatError(MetaSamplerError, ValueError):
    """A TSR1/PCB1/checkpoint file has a bad magic or is truncated."""


class PretrainingFailure(MetaSamplerError):
    """A task model did not reach its convergence bar."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message, seed=None, metric=None):
        super().__init__(message)
        self.seed = seed
        self.metric = metric


class NumericalAbort(MetaSamplerError):
    """A loss went NaN/Inf; carries the diagnostics of the failing step."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PoolOverlapError(MetaSamplerError):
    """A model UID appears in two pools that must be disjoint."""

    exit_code = EXIT_PROTOCOL

    def __init__(self, message, uids=()):
        super().__init__(message)
        self.uids = sorted(uids)


class InputError(click.ClickException):
    """Missing or unreadable CLI input (dataset, checkpoint, output path)."""

    exit_code = EXIT_INPUT


def exit_code_for(exc):
    """Return the process exit code for an exception.

    Args:
        exc: Any exception instance.

    Returns:
        Integer exit code (2 input, 3 numerical, 4 protocol).
    """
    if isinstance(exc, (MetaSamplerError, click.ClickException)):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_INPUT
    return 1
