"""Exceptions raised by fogml."""

from typing import Any, Dict, List, Mapping, Optional


class FogMLError(Exception):
    """Base error; carries a machine-readable code and detail mapping."""

    code = "error"
    exit_code = 1

    def __init__(self, message: str, **detail: Any) -> None:
        super().__init__(message)
        self.message = message
        self.detail: Dict[str, Any] = detail

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": self.message, "detail": self.detail}


class InvalidArgumentError(FogMLError):
    code = "invalid_argument"


class DimensionMismatchError(FogMLError):
    """Input width does not match the model spec."""

    code = "dimension_mismatch"

    def __init__(self, expected: Any, actual: Any, what: str = "features") -> None:
        super().__init__(
            f"{what} dimension mismatch: expected {expected}, got {actual}",
            expected=expected,
            actual=actual,
        )
        self.expected = expected
        self.actual = actual


class SpecMismatchError(FogMLError):
    code = "spec_mismatch"


class NonFiniteLossError(FogMLError):
    code = "non_finite_loss"

    def __init__(self, sample_index: int, value: float) -> None:
        super().__init__(
            f"non-finite loss {value} at sample {sample_index}",
            sample_index=sample_index,
        )
        self.sample_index = sample_index


class EmptyBatchError(FogMLError):
    code = "empty_batch"


class IdxFormatError(FogMLError):
    """Base class for IDX parsing failures."""

    code = "idx_format"


class BadMagicError(IdxFormatError):
    code = "bad_magic"

    def __init__(self, path: str, expected: int, actual: int) -> None:
        super().__init__(
            f"bad magic in {path}: expected {expected}, got {actual}",
            path=path,
            expected=expected,
            actual=actual,
        )


class TruncatedFileError(IdxFormatError):
    code = "truncated_file"

    def __init__(self, path: str, expected: int, actual: int) -> None:
        super().__init__(
            f"truncated file {path}: expected {expected} bytes, got {actual}",
            path=path,
            expected=expected,
            actual=actual,
        )


class CountMismatchError(IdxFormatError):
    code = "count_mismatch"

    def __init__(self, images: int, labels: int) -> None:
        super().__init__(
            f"image count {images} != label count {labels}",
            images=images,
            labels=labels,
        )


class InfeasiblePartitionError(FogMLError):
    """A partition plan requests more samples of some labels than exist."""

    code = "infeasible_partition"
    exit_code = 3

    def __init__(self, deficient: Mapping[int, Any]) -> None:
        labels: List[int] = sorted(deficient)
        super().__init__(
            f"partition plan infeasible for labels {labels}",
            deficient={str(k): v for k, v in sorted(deficient.items())},
        )
        self.deficient_labels = labels


class InfeasibleRankError(FogMLError):
    code = "infeasible_rank"


class UnknownMessageError(FogMLError):
    code = "unknown_message"


class SingularSystemError(FogMLError):
    code = "singular_system"


class UnfittedLabelError(FogMLError):
    code = "unfitted_label"


class NoFittableLabelError(FogMLError):
    code = "no_fittable_label"


class EmptySeedsError(FogMLError):
    code = "empty_seeds"


class ConfigError(FogMLError):
    code = "config"
    exit_code = 2


class BudgetExhaustedError(FogMLError):
    """Raised when the budget cannot pay for even a first round."""

    code = "budget_exhausted"
    exit_code = 4

    def __init__(self, remaining: float, needed: Optional[float] = None) -> None:
        super().__init__(
            f"budget exhausted (remaining {remaining}, needed {needed})",
            remaining=remaining,
            needed=needed,
        )
