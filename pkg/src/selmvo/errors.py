"""Exception types shared across the package."""


class SelmError(Exception):
    """Base class for every error raised by selmvo."""


# geometry
class NonPositiveDepth(SelmError, ValueError):
    pass


class EmptyTrajectory(SelmError, ValueError):
    pass


# dataset
class MissingIndexFile(SelmError, FileNotFoundError):
    pass


class MalformedLine(SelmError, ValueError):
    def __init__(self, path, line_no, text=""):
        self.path = str(path)
        self.line_no = line_no
        self.text = text
        super().__init__(f"{path}: line {line_no}: malformed line: {text!r}")


class ImageDecodeError(SelmError, IOError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"cannot decode image {path}")


class MissingPoseFile(SelmError, FileNotFoundError):
    pass


class FrameCountMismatch(SelmError, ValueError):
    def __init__(self, images, poses):
        self.images = images
        self.poses = poses
        super().__init__(f"{images} images but {poses} poses")


# model runtime
class ModelFileUnreadable(SelmError, IOError):
    pass


class SignatureMismatch(SelmError, ValueError):
    def __init__(self, expected, found):
        self.expected = expected
        self.found = found
        super().__init__(f"model signature mismatch: expected {expected}, found {found}")


class InferenceBackendFailure(SelmError, RuntimeError):
    pass


class DeviceUnavailable(UserWarning):
    """Warning category: requested device missing, running on cpu."""


# worldmap
class EmptyReference(SelmError, ValueError):
    pass


# posesolver
class PointBehindCamera(SelmError, ValueError):
    pass


class InsufficientCorrespondences(SelmError, ValueError):
    pass


class NoConsensus(SelmError, RuntimeError):
    def __init__(self, best_inliers, required):
        self.best_inliers = best_inliers
        self.required = required
        super().__init__(f"best hypothesis has {best_inliers} inliers, need {required}")


class DivergedOptimization(SelmError, RuntimeError):
    pass


# tracker
class InsufficientDepthFeatures(SelmError, ValueError):
    pass


class TrackingLost(SelmError, RuntimeError):
    pass


class InitializationFailed(SelmError, RuntimeError):
    pass


# eval
class DegenerateGeometry(SelmError, ValueError):
    pass


class LengthMismatch(SelmError, ValueError):
    pass


class TooFewAssociations(SelmError, ValueError):
    def __init__(self, found):
        self.found = found
        super().__init__(f"only {found} associated pose pairs, need at least 3")


class NonPositiveBaseline(SelmError, ValueError):
    pass


class WriteFailure(SelmError, IOError):
    pass


# cli
class ConfigError(SelmError, ValueError):
    pass
