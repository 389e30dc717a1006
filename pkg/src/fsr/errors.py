"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so ``fsr.cli`` can translate
failures without a lookup table.
"""


class FSRError(Exception):
    exit_code = 1


class ConfigError(FSRError, ValueError):
    """Invalid configuration or argument (exit code 1)."""

    exit_code = 1


class DataError(FSRError):
    """Problem with on-disk data (exit code 2)."""

    exit_code = 2


class LayoutError(DataError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"layout error: missing directory {self.path}")


class MaskMissingError(DataError):
    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("mask missing for: " + ", ".join(self.paths))


class DecodeError(DataError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        msg = f"decode error: cannot read image {self.path}"
        super().__init__(f"{msg} ({reason})" if reason else msg)


class InsufficientSamplesError(DataError):
    pass


class CacheError(DataError):
    """Unreadable or mismatched binary container (feature cache, checkpoint)."""


class DegenerateLabelsError(DataError, ValueError):
    pass


class DivergenceError(FSRError):
    exit_code = 3

    def __init__(self, step):
        self.step = step
        super().__init__(f"numerical divergence at step {step}")
