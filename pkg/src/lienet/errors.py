"""Exception hierarchy shared by every lienet module."""


class LieNetError(Exception):
    """Base class for all lienet errors."""


class NearPiSingularity(LieNetError):
    """Rotation angle too close to pi for the closed-form logarithm."""


class DegenerateMatrix(LieNetError):
    """Matrix is rank-deficient and cannot be projected onto SO(3)."""


class DegenerateBone(LieNetError):
    """Bone vector is too short to define a direction."""


class MalformedFile(LieNetError):
    """Syntax error in an input file."""


class InconsistentJointCount(MalformedFile):
    """A frame has the wrong number of coordinates."""


class UnknownLabel(MalformedFile):
    """A sequence label is missing or outside the allowed set."""


class ShapeMismatch(LieNetError):
    pass


class OddChannelCount(ShapeMismatch):
    pass


class StaleRecords(ShapeMismatch):
    """Pooling argmax records do not match the upstream gradient."""


class LabelOutOfRange(LieNetError):
    pass


class InvalidSpec(LieNetError):
    """Network specification violates a structural rule."""


class NonFiniteGradient(LieNetError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class EmptyDataset(LieNetError):
    pass


class GeometryMismatch(LieNetError):
    pass


class ConfigError(LieNetError):
    """Unknown key, unparsable value or out-of-range setting."""
