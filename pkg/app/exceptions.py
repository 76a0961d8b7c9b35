"""
Exception hierarchy for DiffuEraser Desk
Every error carries an optional stage tag so the CLI can report where a run failed
"""
from typing import Optional


class DiffuEraserError(Exception):
    """Base class for all errors raised by the package"""

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def with_stage(self, stage: str) -> "DiffuEraserError":
        """Return the same error tagged with a pipeline stage (first tag wins)"""
        if self.stage is None:
            self.stage = stage
        return self

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


class ConfigError(DiffuEraserError):
    """Invalid configuration, flags or config file"""


class VideoIOError(DiffuEraserError):
    """Frame/mask directory problems"""


class CodecError(DiffuEraserError):
    """Latent codec shape or mode problems"""


class ModelError(DiffuEraserError):
    """Denoiser / branch input contract violations"""


class CheckpointError(DiffuEraserError):
    """Missing or malformed checkpoint archive"""


class ScheduleError(DiffuEraserError):
    """Noise schedule and timestep problems"""


class PriorError(DiffuEraserError):
    """Prior model failures and prior validation errors"""


class PlanError(DiffuEraserError):
    """Temporal planner precondition violations"""


class TrainingError(DiffuEraserError):
    """Training loop failures (non-finite loss, bad batches)"""


class MetricsError(DiffuEraserError):
    """Evaluation input problems"""
