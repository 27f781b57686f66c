"""
Exception hierarchy for the BridgePure toolkit.

Library modules raise these; only the command line turns them into exit codes
and the failure manifest of a run directory.
"""


class BridgePureError(Exception):
    """Base class for every error raised by the toolkit."""


class ScheduleDomainError(BridgePureError, ValueError):
    """A time value lies outside [0, T]."""


class SingularTimeError(BridgePureError, ValueError):
    """A quantity was requested at a time where its variance collapses to zero."""


class TrainingFault(BridgePureError):
    """Non-finite loss during score model training."""

    def __init__(self, message, step=None, batch_id=None, times=None):
        super().__init__(message)
        self.step = step
        self.batch_id = batch_id
        self.times = times


class SamplingFault(BridgePureError):
    """Non-finite state while integrating the reverse bridge."""

    def __init__(self, message, step_index=None, image_id=None):
        super().__init__(message)
        self.step_index = step_index
        self.image_id = image_id


class ConfigurationError(BridgePureError, ValueError):
    """Invalid configuration value, unknown key or shape mismatch."""

    def __init__(self, message, line=None, key=None):
        super().__init__(message)
        self.line = line
        self.key = key

    def __str__(self):
        base = super().__str__()
        if self.line is not None:
            return f"line {self.line}: {base}"
        return base


class ProtectionError(BridgePureError, ValueError):
    """Bad protection spec or label out of range."""


class ArchiveError(BridgePureError):
    """Corrupt or inconsistent pair archive or checkpoint file."""


class SplitError(BridgePureError, ValueError):
    """Infeasible split sizes or not enough reference data."""


class AlignmentError(BridgePureError, ValueError):
    """Two image sets that must be aligned by id are not."""


class StageFailure(BridgePureError):
    """A pipeline stage failed; carries the stage id and the original cause."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
