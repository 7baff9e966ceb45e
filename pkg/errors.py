"""
Exception types shared by every module.

Each error carries an ``error_type`` (the same vocabulary the command layer
prints) and the process exit code the command layer maps it to.
"""

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3


class DerainError(Exception):
    """Base class for all laboratory errors"""

    error_type = 'error'
    exit_code = EXIT_FAILURE


class ShapeMismatchError(DerainError):
    """Raised when an operation receives tensors whose extents disagree"""

    error_type = 'shape_error'
    exit_code = EXIT_VALIDATION

    def __init__(self, op, dimension, expected, actual):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{op}: mismatch in {dimension} (expected {expected}, got {actual})"
        )


class DomainError(DerainError):
    """Raised when values fall outside an operation's domain"""

    error_type = 'domain_error'
    exit_code = EXIT_VALIDATION


class BinAreaError(DerainError):
    """Raised when a streak bin's area range cannot be realised at the image size"""

    error_type = 'bin_area_error'
    exit_code = EXIT_VALIDATION


class ConfigError(DerainError):
    error_type = 'validation_error'
    exit_code = EXIT_VALIDATION


class ManifestError(DerainError):
    error_type = 'manifest_error'
    exit_code = EXIT_VALIDATION


class MissingFilesError(DerainError):
    """Raised with the complete list of files that were expected but absent"""

    error_type = 'not_found'
    exit_code = EXIT_IO

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        listing = ', '.join(self.paths)
        super().__init__(f"{len(self.paths)} missing file(s): {listing}")


class StorageError(DerainError):
    """Raised on any read/write failure; always names the path involved"""

    error_type = 'io_error'
    exit_code = EXIT_IO

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class CheckpointError(DerainError):
    error_type = 'checkpoint_error'
    exit_code = EXIT_VALIDATION
