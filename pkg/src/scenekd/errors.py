"""Exception hierarchy shared across the package."""


class SceneKDError(Exception):
    """Base class for all package errors."""


class DimensionError(SceneKDError):
    """Tensor shapes are inconsistent; the message names the offending axis."""


class SpecError(SceneKDError):
    """A convolution or layer spec violates its structural constraints."""


class ConfigError(SceneKDError):
    """An architecture or experiment configuration violates an invariant."""


class InputError(SceneKDError):
    """A runtime input (label, dataset, probability vector) is invalid."""


class ParameterError(SceneKDError):
    """A scalar hyperparameter is outside its valid range."""


class PoolError(SceneKDError):
    """Teacher pool members are mutually inconsistent."""


class FusionError(SceneKDError):
    """Fusion head dimensions do not match the teacher pool."""


class FoldError(SceneKDError):
    """Normalization statistics cannot be folded into the convolution."""


class StateError(SceneKDError):
    """An operation was attempted before its prerequisite state existed."""


class PhaseOrderError(SceneKDError):
    """A pipeline phase ran before the phase it depends on."""


class FormatError(SceneKDError):
    """A serialized artifact is malformed or has an unsupported version."""
