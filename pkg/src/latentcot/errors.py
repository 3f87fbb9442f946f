"""Exception hierarchy. Domain errors map to CLI exit code 1."""


class DomainError(Exception):
    """Base class for contract and artifact failures."""


class ContractViolation(DomainError):
    """An operation was called outside its stated pre/post contract."""


class ShapeMismatch(ContractViolation):
    pass


class AlphabetError(DomainError):
    """Text contains a character outside the task alphabet."""


class TaskFormatError(DomainError):
    """A dataset file or record does not match the documented schema."""


class InfeasibleConfig(DomainError):
    """A generation or training config cannot be satisfied."""


class TrainingDiverged(DomainError):
    """A loss became non-finite; message carries the offending step."""


class MissingArtifact(DomainError):
    """A pipeline stage needs an artifact a previous stage did not produce."""


class CheckpointError(DomainError):
    """Checkpoint archive is malformed (bad magic, version, truncation, dup name)."""
