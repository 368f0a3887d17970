"""Shared exception types and their process exit codes."""


class BurstRankError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class InputError(BurstRankError):
    """Invalid input: bad arguments, malformed records, contract violations."""

    exit_code = 1


class FormatError(InputError):
    """Malformed binary or text file (bad magic, truncation, bad schema)."""


class NumericFault(BurstRankError):
    """A numeric operation produced NaN/Inf or received a non-finite value."""

    exit_code = 2
