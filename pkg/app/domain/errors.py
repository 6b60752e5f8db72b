from dataclasses import dataclass
from typing import ClassVar, Optional


@dataclass(eq=False)
class DomainError(Exception):
    """Base class for all domain-level errors.

    These represent validation or integrity failures raised by the pipeline
    stages, independent of how the pipeline is driven (CLI, tests, workers).
    ``stage``, ``partition_id`` and ``path`` are filled in as the error
    travels up through the scheduler so the final report can say where it
    happened.
    """

    message: str
    stage: Optional[str] = None
    partition_id: Optional[int] = None
    path: Optional[str] = None

    code: ClassVar[str] = 'domain_error'

    def __str__(self) -> str:
        context = self.context()
        return f'{self.message} ({context})' if context else self.message

    def context(self) -> str:
        parts = []
        if self.stage is not None:
            parts.append(f'stage={self.stage}')
        if self.partition_id is not None:
            parts.append(f'partition={self.partition_id}')
        if self.path is not None:
            parts.append(f'path={self.path}')
        return ' '.join(parts)

    def attribute(
        self,
        *,
        stage: Optional[str] = None,
        partition_id: Optional[int] = None,
        path: Optional[str] = None,
    ) -> 'DomainError':
        """Fill in missing context without overwriting what is already known."""
        if self.stage is None:
            self.stage = stage
        if self.partition_id is None:
            self.partition_id = partition_id
        if self.path is None and path is not None:
            self.path = str(path)
        return self


class ConfigError(DomainError):
    """Raised when the system is misconfigured.

    Use this for missing or invalid settings, key files or profiles that
    prevent a stage from starting.
    """

    code = 'config_error'


# input formats
class MalformedInput(DomainError):
    code = 'malformed_input'


class MalformedFasta(MalformedInput):
    code = 'malformed_fasta'


class MalformedFastq(MalformedInput):
    code = 'malformed_fastq'


class MalformedSam(MalformedInput):
    code = 'malformed_sam'


# reference preparation
class InvalidPartitioning(DomainError):
    code = 'invalid_partitioning'


class IndexSegmentMismatch(DomainError):
    code = 'index_segment_mismatch'


class FingerprintMismatch(DomainError):
    code = 'fingerprint_mismatch'


# alignment / merge
class ExternalToolFailure(DomainError):
    code = 'external_tool_failure'


class ConflictingDuplicates(DomainError):
    code = 'conflicting_duplicates'


# sealing
class SealError(DomainError):
    code = 'seal_error'


class MissingRoot(SealError):
    code = 'missing_root'


class SealFailure(SealError):
    code = 'seal_failure'


class AuthFailure(SealError):
    code = 'auth_failure'


class PolicyMismatch(AuthFailure):
    code = 'policy_mismatch'


# dispatch reports unseal problems under this name
UnsealFailure = AuthFailure


# scheduling
class SchedulerError(DomainError):
    code = 'scheduler_error'


class TaskFailure(SchedulerError):
    code = 'task_failure'


class PlacementViolation(SchedulerError):
    code = 'placement_violation'
