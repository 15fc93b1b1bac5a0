"""
Error types shared by the MSADM pipeline modules.

The command-line entry point maps each family to an exit code:
ConfigError → 1, DataError → 2, BackendError → 3.
"""


class MsadmError(Exception):
    """Base class for every pipeline error."""

    exit_code = 2


class ConfigError(MsadmError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 1


class DataError(MsadmError):
    """Problem with input data or a domain precondition."""

    exit_code = 2


class TraceParseError(DataError, ValueError):
    """A trace file row could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TraceValidationError(DataError, ValueError):
    """A trace violates an invariant (monotone timestamps, finite values)."""


class DomainError(DataError, ValueError):
    """Argument outside the domain of an operation."""


class GroupLookupError(DataError, LookupError):
    """No rule set for an (entity_class, kpi_name) pair."""


class GrammarStructureError(DataError, ValueError):
    """Semantic grammar is not a well-formed rooted tree."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"node '{node}': {message}")
        self.node = node


class DescriptorLookupError(DataError, LookupError):
    """A descriptor or state code does not resolve for a KPI."""


class ReportSchemaError(DataError, ValueError):
    """LLM response is missing a required section."""

    def __init__(self, message, raw=""):
        super().__init__(message)
        self.raw = raw


class ScenarioError(DataError, ValueError):
    """Simulator scenario is inconsistent (e.g. overlapping faults)."""


class TrainingError(DataError, RuntimeError):
    """Training diverged (NaN loss)."""


class BackendError(MsadmError, RuntimeError):
    """LLM backend could not produce a completion."""

    exit_code = 3


class PromptTooLongError(BackendError):
    """Prompt exceeds the configured token budget; nothing was sent."""
