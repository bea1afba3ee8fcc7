"""Exception hierarchy shared across the toolkit."""


class MyTMError(Exception):
    """Base error for every failure raised by the toolkit."""


class StructuralError(MyTMError, ValueError):
    """Tensor shapes do not match the expected convention."""


class DomainError(MyTMError, ValueError):
    """A value lies outside the domain an operation is defined on."""


class ConfigError(MyTMError, ValueError):
    """The configuration document is malformed or has unknown keys."""


class BackendError(MyTMError):
    """A backend component failed during inference."""


class BackendUnavailableError(BackendError):
    """A backend component could not be loaded."""


class NoFaceDetectedError(BackendError):
    """The swapper or aligner found no face in a frame."""


class ManifestError(MyTMError):
    """A manifest or ages file failed validation."""


class NoExtrapolationRangeError(MyTMError):
    """The training ages already cover the whole [0, 100] range."""


class ContractError(MyTMError):
    """A caller passed inputs it was responsible for filtering out."""


class CheckpointError(MyTMError):
    """A checkpoint directory is unreadable or fails its integrity check."""


class VideoJobError(MyTMError):
    """A video job cannot proceed (bad keyframe, empty frame directory)."""
