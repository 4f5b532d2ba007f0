"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage errors -> 2, data errors -> 3,
backend errors -> 4.
"""


class ClipFusionError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(ClipFusionError, ValueError):
    """A caller violated an operation precondition."""


class PromptFormatError(InvalidArgumentError):
    """Prompt template missing placeholders or rendering left one unresolved."""


class IngestionError(ClipFusionError):
    """Dataset layout, image decoding, or result-file problems."""


class BankLookupError(ClipFusionError, KeyError):
    """A source tag is not present in a reference bank."""


class MetricError(ClipFusionError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""


class BackendUnavailableError(ClipFusionError):
    """A backend's checkpoint or dependency could not be loaded."""


class TokenAlignmentError(ClipFusionError):
    """A state-word span could not be located in the prompt tokenization."""


class UsageError(ClipFusionError):
    """Command-line usage problem not caught by the argument parser."""
