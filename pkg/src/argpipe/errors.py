"""Exception types raised by the engine, the models and the stream runtime."""


class ArgpipeError(Exception):
    pass


class ModelFormatError(ArgpipeError):
    """Malformed model or dictionary file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ScoringError(ArgpipeError):
    """A decision function produced a non-finite value."""

    def __init__(self, model_name, message="non-finite score"):
        self.model_name = model_name
        super().__init__(f"model {model_name!r}: {message}")


class TaskError(ArgpipeError):
    """A user function failed inside an engine task.

    Carries the stage name, the partition id and, when known, the key of
    the record being processed.
    """

    def __init__(self, stage, partition_id, key=None, cause=None):
        self.stage = stage
        self.partition_id = partition_id
        self.key = key
        self.cause = cause
        msg = f"stage {stage!r} failed in partition {partition_id}"
        if key is not None:
            msg += f" on key {key!r}"
        if cause is not None:
            msg += f": {type(cause).__name__}: {cause}"
        super().__init__(msg)


class StateOverflowError(ArgpipeError):
    """Per-file stream state grew past the configured cap."""

    def __init__(self, file_key, size, cap):
        self.file_key = file_key
        self.size = size
        self.cap = cap
        super().__init__(f"state for {file_key!r} holds {size} records, cap is {cap}")


class GenerationError(ArgpipeError):
    pass
