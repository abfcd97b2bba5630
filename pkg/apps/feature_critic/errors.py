"""Exception types raised across the feature-critic package."""

from typing import Optional


class FeatureCriticError(Exception):
    """Base class for every error raised by this package."""


# autodiff


class NoActiveTape(FeatureCriticError):
    """An operation was recorded outside of a ``with Tape():`` block."""


class ShapeMismatch(FeatureCriticError):
    """Operand shapes are inconsistent with the operation."""


class NonScalarRoot(FeatureCriticError):
    """backward() was asked to differentiate a value that is not 1x1."""


class NonDifferentiablePath(FeatureCriticError):
    """A primitive without a recordable derivative lies on a second-order path."""


class NonFiniteValue(FeatureCriticError):
    """A function evaluated during finite differencing returned inf or nan."""


# models / meta


class MissingGradient(FeatureCriticError):
    """A gradient map does not cover every parameter it is applied to."""


class VariantMismatch(FeatureCriticError):
    """Critic parameters do not match the requested critic variant."""


class LabelOutOfRange(FeatureCriticError):
    """A label lies outside [0, C) for a C-way classifier."""


class InvalidSplitSize(FeatureCriticError):
    """The requested meta-train / meta-test split cannot be formed."""


class NonFiniteLoss(FeatureCriticError):
    """Training produced an inf or nan loss or gradient."""

    def __init__(self, message: str, step: int, state_path: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.state_path = state_path


# data


class DatasetNotFound(FeatureCriticError):
    """Dataset files are missing under the configured data root."""


class BadMagic(FeatureCriticError):
    """IDX file header carries an unexpected magic number."""


class CountMismatch(FeatureCriticError):
    """Image and label files disagree on the number of items."""


class TruncatedFile(FeatureCriticError):
    """IDX file ends before the payload announced by its header."""


class InsufficientSamples(FeatureCriticError):
    """A class has fewer examples than were requested from it."""


class OverlappingLabelSpaces(FeatureCriticError):
    """Source and target label spaces intersect in heterogeneous mode."""


class BatchTooLarge(FeatureCriticError):
    """A mini-batch larger than its domain was requested."""


# evaluation


class EmptyTrainSet(FeatureCriticError):
    """A shallow classifier was fitted on zero examples."""


class SingleClass(FeatureCriticError):
    """A linear probe needs at least two classes."""


class LengthMismatch(FeatureCriticError):
    """Prediction and ground-truth arrays differ in length."""


class MissingBaseline(FeatureCriticError):
    """A domain has no baseline error for VD-score computation."""


class DegenerateCovariance(UserWarning):
    """Feature covariance has rank below two; PCA pads with a zero column."""


# cli / artifacts


class ConfigError(FeatureCriticError):
    """Configuration file or override is invalid."""

    def __init__(
        self, message: str, key: Optional[str] = None, line: Optional[int] = None
    ):
        location = ""
        if key:
            location += f" [key: {key}]"
        if line is not None:
            location += f" [line: {line}]"
        super().__init__(f"{message}{location}")
        self.detail = message
        self.key = key
        self.line = line


class ModelShapeMismatch(FeatureCriticError):
    """A stored model artifact does not fit the configured architecture."""


class ArtifactFormatError(FeatureCriticError):
    """A parameter artifact is corrupt or has an unknown layout."""
