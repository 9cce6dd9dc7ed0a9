EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DATA_QUALITY = 3
EXIT_NOT_CONVERGED = 4


class PipelineError(RuntimeError):
    """Base class for pipeline failures; ``exit_code`` is the CLI status."""

    exit_code = EXIT_VALIDATION


class ConfigError(PipelineError):
    """Config file, schema or input paths fail validation."""


class DataQualityError(PipelineError):
    """Too many source lines ended in the error sink."""

    exit_code = EXIT_DATA_QUALITY


class NotConvergedError(PipelineError):
    """A fitted model failed its convergence check; outputs were still written."""

    exit_code = EXIT_NOT_CONVERGED


class ManifestError(PipelineError):
    pass
