"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
execution failures -> 4.
"""


class EvalBlocksError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EvalBlocksError):
    """Invalid configuration, selector, or command-line usage."""


class DataError(EvalBlocksError):
    """Invalid or missing data: manifests, tensor files, result stores."""


class TensorFormatError(DataError):
    """Malformed tensor file: bad magic, unsupported dtype, truncation."""


class CacheError(EvalBlocksError):
    """Cache directory I/O failure. Aborts a run; never silently ignored."""


class BlockExecutionError(EvalBlocksError):
    """A block body failed. Recorded per node, not propagated as a crash."""
