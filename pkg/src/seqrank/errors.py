"""Exception types shared across modules, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration (bad field values, inconsistent settings)."""


class DataError(RuntimeError):
    """Problem with input data files or derived datasets."""


class ParseError(DataError):
    """Malformed input file; message carries the offending line number."""


class EmptyCorpusError(DataError):
    """No users survive filtering."""


class SamplingError(DataError):
    """Negative sampling is impossible (user interacted with every item)."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt or inconsistent with the current data."""


class DivergenceError(RuntimeError):
    """Training produced non-finite parameters."""
