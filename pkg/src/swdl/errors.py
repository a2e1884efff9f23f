"""Exception hierarchy shared by every swdl module."""


class SwdlError(Exception):
    """Base class; the CLI maps these to exit code 1."""

    kind = "error"


class ArgumentError(SwdlError, ValueError):
    kind = "argument"


class ConfigError(SwdlError, ValueError):
    kind = "config"


class StateError(SwdlError, RuntimeError):
    kind = "state"


class DepthError(StateError):
    kind = "depth"


class ParseError(SwdlError, ValueError):
    kind = "parse"


class BadMagicError(ParseError):
    kind = "parse.magic"


class UnsupportedDatatypeError(ParseError):
    kind = "parse.datatype"


class TruncatedError(ParseError):
    kind = "parse.truncated"


class HeaderError(ParseError):
    kind = "parse.header"


class PreprocessingError(SwdlError):
    kind = "preprocess"


class MetricUndefinedError(SwdlError, ValueError):
    kind = "metric"


class DataError(SwdlError):
    kind = "data"


class SpecError(SwdlError, ValueError):
    kind = "spec"


class TrainingError(SwdlError, RuntimeError):
    kind = "training"
