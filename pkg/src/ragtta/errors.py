"""Exception types shared across the package.

CLI exit codes map onto these: ``ConfigurationError`` exits with 2, every
other ``RagTTAError`` with 3.
"""


class RagTTAError(Exception):
    """Base class for errors raised by ragtta."""


class RejectedInput(RagTTAError, ValueError):
    """An argument violates an operation precondition."""


class ConfigurationError(RagTTAError):
    """Missing artifacts, infeasible settings or malformed config files."""


class TrainingError(RagTTAError):
    """Training diverged or could not make progress."""


class StaleIndexError(RagTTAError):
    """The retrieval index was built with a different embedder."""


class EvaluatorError(RagTTAError):
    """The feedback evaluator failed (timeout, transport, malformed reply).

    Distinct from an empty report, which means nothing is missing.
    """


class StageError(RagTTAError):
    """A pipeline stage failed for a specific item."""

    def __init__(self, message, item_id=None):
        super().__init__(message if item_id is None else f"{item_id}: {message}")
        self.item_id = item_id
