"""Exception hierarchy. Each class carries the CLI exit code so subcommands
can map failures to distinct, machine-parseable codes.
"""

from __future__ import annotations


class MemsslError(Exception):
    exit_code = 1


class ConfigError(MemsslError):
    exit_code = 3


class ManifestError(MemsslError):
    exit_code = 4


class DataError(MemsslError):
    exit_code = 4


class DegenerateEmbeddingError(MemsslError):
    """A row fell below the minimum norm before unit normalization."""

    exit_code = 8


class DegenerateMetricError(MemsslError):
    """A statistic is undefined on the given inputs (e.g. zero variance)."""

    exit_code = 7


class CheckpointError(MemsslError):
    exit_code = 5


class BadMagicError(CheckpointError):
    exit_code = 10


class VersionMismatchError(CheckpointError):
    exit_code = 11


class TruncatedError(CheckpointError):
    exit_code = 12


class TensorShapeError(CheckpointError):
    exit_code = 13


class ConfigHashMismatchError(CheckpointError):
    exit_code = 14
