"""
FEWSHOT-AD ERRORS
=================
Module-tagged exception hierarchy.

Every error raised by the pipeline renders as ``[module] message`` so a CLI
user can tell which stage failed. Input-contract violations are also
``ValueError``; filesystem failures are also ``OSError``.
"""

from typing import Optional


class FewShotADError(Exception):
    """Base class for all pipeline errors."""

    module = "fewshot_ad"

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.path = path

    def __str__(self) -> str:
        if self.path:
            return f"[{self.module}] {self.message} (path: {self.path})"
        return f"[{self.module}] {self.message}"


class ScheduleError(FewShotADError, ValueError):
    module = "schedule_core"


class DenoiserError(FewShotADError, ValueError):
    module = "denoiser"


class TrainingDivergedError(DenoiserError):
    """A non-finite loss showed up during training."""


class PromptError(FewShotADError, ValueError):
    module = "prompts"


class CustomizationError(FewShotADError, ValueError):
    module = "customization"


class PersonalizationError(FewShotADError, ValueError):
    module = "personalization"


class EncoderError(FewShotADError, ValueError):
    module = "encoder"


class BankError(FewShotADError, ValueError):
    module = "bank"


class ScoringError(FewShotADError, ValueError):
    module = "scorer"


class EvaluationError(FewShotADError, ValueError):
    module = "eval"


class SynthError(FewShotADError, ValueError):
    module = "synth"


class ConfigError(FewShotADError, ValueError):
    module = "cli"


class ImageError(FewShotADError, ValueError):
    module = "imaging"


class ArtifactError(FewShotADError, OSError):
    module = "artifacts"


class DatasetError(FewShotADError, OSError):
    module = "datasets"
