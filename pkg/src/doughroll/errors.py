"""Exception taxonomy.

Every error carries a stable machine-parseable ``error_class`` slug; the CLI
prints ``<error_class>: <message>`` as its single-line failure output.
"""

from __future__ import annotations


class DoughrollError(Exception):
    error_class = "runtime-error"


class ConfigurationError(DoughrollError):
    error_class = "configuration-error"


class CardinalityError(DoughrollError):
    error_class = "cardinality-error"


class ShapeError(DoughrollError):
    error_class = "shape-error"


class DegenerateGoalError(DoughrollError):
    error_class = "degenerate-goal-error"


class DegenerateTestError(DoughrollError):
    error_class = "degenerate-test-error"


class ScheduleError(DoughrollError):
    error_class = "schedule-error"


class ResetCollisionError(DoughrollError):
    error_class = "reset-collision-error"


class SimulationDivergedError(DoughrollError):
    """Non-finite particle/grid state detected during a rollout."""

    error_class = "simulation-diverged"

    def __init__(self, step_index: int, message: str = ""):
        self.step_index = int(step_index)
        super().__init__(message or f"non-finite state at control step {step_index}")


class GradientOverflowError(DoughrollError):
    error_class = "gradient-overflow"

    def __init__(self, step_index: int = -1, message: str = ""):
        self.step_index = int(step_index)
        super().__init__(message or "non-finite gradient")


class OptimizationUnstableError(DoughrollError):
    error_class = "optimization-unstable"


class BaselineFailedError(DoughrollError):
    error_class = "baseline-failed"


class OccludedSceneError(DoughrollError):
    error_class = "occluded-scene"


class DatasetGenerationError(DoughrollError):
    error_class = "dataset-generation-error"


class DatasetIOError(DoughrollError):
    error_class = "dataset-io-error"


class VersionMismatchError(DatasetIOError):
    error_class = "version-mismatch"


class TruncatedFileError(DatasetIOError):
    error_class = "truncated-file"


class ChecksumError(DatasetIOError):
    error_class = "checksum-error"


class TrainingDivergedError(DoughrollError):
    error_class = "training-diverged"

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = int(epoch)
        super().__init__(message or f"non-finite training loss at epoch {epoch}")


class RolloutError(DoughrollError):
    error_class = "rollout-error"
