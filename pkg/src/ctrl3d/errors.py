"""Typed errors shared across the package, with the CLI exit code mapping."""


class Ctrl3DError(Exception):
    """Base class for all package errors."""


class ConfigError(Ctrl3DError, ValueError):
    """Invalid or inconsistent configuration (bad keys, bad values, bad shapes of inputs)."""


class DataError(Ctrl3DError, RuntimeError):
    """Dataset problems: empty folders, unreadable batches, resolution mismatches."""


class NumericError(Ctrl3DError, RuntimeError):
    """Numerical failures: non-finite losses, negative densities, non-PSD covariances."""


class AdapterError(Ctrl3DError, RuntimeError):
    """A pretrained-model adapter is missing, misconfigured, or failed."""


class CheckpointError(Ctrl3DError, RuntimeError):
    """Checkpoint container is malformed or does not match the manifest."""


# CLI exit codes; 0 is success, 1 is an unclassified crash.
EXIT_CODES = {
    ConfigError: 2,
    DataError: 3,
    NumericError: 4,
    AdapterError: 5,
    CheckpointError: 6,
}


def exit_code_for(exc: BaseException) -> int:
    for klass, code in EXIT_CODES.items():
        if isinstance(exc, klass):
            return code
    return 1
