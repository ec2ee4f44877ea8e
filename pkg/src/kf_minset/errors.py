"""Exception hierarchy shared by every module."""


class KfMinsetError(Exception):
    """Base class for all errors raised by kf_minset."""


class NearPiRotation(KfMinsetError, ValueError):
    pass


class DegenerateGeometry(KfMinsetError, ValueError):
    pass


class ZeroVector(KfMinsetError, ValueError):
    pass


class DimensionMismatch(KfMinsetError, ValueError):
    pass


class WindowTooLarge(KfMinsetError, ValueError):
    pass


class CoincidentPoses(KfMinsetError, ValueError):
    pass


class MissingChannel(KfMinsetError, ValueError):
    pass


class DuplicateId(KfMinsetError, KeyError):
    pass


class MissingGroundTruth(KfMinsetError, KeyError):
    pass


class SingularSystem(KfMinsetError, RuntimeError):
    pass


class TooFewPoses(KfMinsetError, ValueError):
    pass


class ZeroBaseline(KfMinsetError, ValueError):
    pass


class ParseError(KfMinsetError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.path = path
        self.line = line


class CountMismatch(KfMinsetError, ValueError):
    pass


class BadMagic(KfMinsetError, ValueError):
    pass


class ConfigError(KfMinsetError, ValueError):
    pass


class StageError(KfMinsetError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage, method, cause):
        super().__init__(f"stage '{stage}' failed for method '{method}': {cause}")
        self.stage = stage
        self.method = method
