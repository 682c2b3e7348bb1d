"""Error hierarchy shared across the pipeline.

Every failure the CLI can surface derives from :class:`PipelineError`; the
``exit_code`` attribute is what ``orthopipe`` returns to the shell
(0 ok, 2 config, 3 backend, 4 io).
"""


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    """Invalid or infeasible configuration (exit code 2)."""

    exit_code = 2


class BackendError(PipelineError):
    """Inference backend failure (exit code 3)."""

    exit_code = 3


class DataError(PipelineError):
    """Unreadable or malformed input data (exit code 4)."""

    exit_code = 4
