"""Exception hierarchy shared by every module."""


class PrefillLabError(Exception):
    """Base class for all errors raised by the library."""


class ConfigError(PrefillLabError, ValueError):
    """Invalid model, ranking, pipeline or experiment configuration."""


class UsageError(ConfigError):
    """Bad command-line usage."""


class ModelFormatError(PrefillLabError, ValueError):
    """The model container on disk cannot be read."""


class MissingTensorError(ModelFormatError):
    pass


class ShapeMismatchError(ModelFormatError):
    pass


class MalformedContainerError(ModelFormatError):
    pass


class ForwardError(PrefillLabError, ValueError):
    """Token or position ids that the model cannot consume."""


class RankingError(PrefillLabError, ValueError):
    """A scoring or selection precondition does not hold."""


class OracleUndefinedError(RankingError):
    """The oracle generated no answer tokens, so no ranking exists."""


class ArchitectureError(PrefillLabError):
    """A prefill result violates its cache-length or index-set contract."""
