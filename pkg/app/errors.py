class RetinaIQAError(Exception):
    """Base class for every error raised by the toolkit."""


class UsageError(RetinaIQAError):
    pass


# imgproc

class NoFovFound(RetinaIQAError):
    pass


class EmptyCrop(RetinaIQAError):
    pass


# priors / nnet

class InvalidKernelSpec(RetinaIQAError, ValueError):
    pass


class ShapeMismatch(RetinaIQAError, ValueError):
    pass


class DegenerateBatch(RetinaIQAError):
    pass


class LabelOutOfRange(RetinaIQAError, ValueError):
    pass


class OddSpatialDim(RetinaIQAError, ValueError):
    pass


# data

class ParseError(RetinaIQAError):
    def __init__(self, path, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class MissingFile(RetinaIQAError, FileNotFoundError):
    pass


class TooFewSamples(RetinaIQAError):
    def __init__(self, label, count: int, k: int):
        self.label = label
        super().__init__(f"class '{label}' has {count} samples, needs at least {k} for {k}-fold split")


class ImageLoadError(RetinaIQAError):
    def __init__(self, path, reason: str):
        self.path = path
        super().__init__(f"could not load image {path}: {reason}")


# evaluate

class LengthMismatch(RetinaIQAError, ValueError):
    pass


class EmptyMatrix(RetinaIQAError):
    pass


class UntrainedModel(RetinaIQAError):
    pass


# train

class NonFiniteLoss(RetinaIQAError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


class CorruptCheckpoint(RetinaIQAError):
    pass


class FingerprintMismatch(RetinaIQAError):
    pass
