
class RetalkException(Exception):
    pass


# Media ingestion and audio features

class RetalkMediaException(RetalkException):
    pass


class MissingStream(RetalkMediaException):
    pass


class DecodeFailure(RetalkMediaException):
    pass


class UnsupportedCodec(RetalkMediaException):
    pass


class EmptyAudio(RetalkMediaException):
    pass


class OutOfRange(RetalkMediaException):
    pass


# Landmarks, alignment and coefficients

class RetalkGeometryException(RetalkException):
    pass


class BadWindow(RetalkGeometryException):
    pass


class DegenerateAnchors(RetalkGeometryException):
    pass


class DimensionMismatch(RetalkGeometryException):
    pass


class RatioOutOfRange(RetalkGeometryException):
    pass


class NonInvertibleTransform(RetalkGeometryException):
    pass


# Tensor contracts of the networks and image operators

class RetalkShapeException(RetalkException):
    pass


class BadShape(RetalkShapeException):
    pass


class BadWindowLength(RetalkShapeException):
    pass


class ShapeMismatch(RetalkShapeException):
    pass


class OddChannels(RetalkShapeException):
    pass


class LengthMismatch(RetalkShapeException):
    pass


class ZeroVector(RetalkShapeException):
    pass


class BadQuality(RetalkShapeException):
    pass


class TooManyLevels(RetalkShapeException):
    pass


# External models

class ProviderFailure(RetalkException):
    def __init__(self, kind: str, message: str = ''):
        super().__init__(f"{kind} provider failed{': ' + message if message else ''}")
        self.kind = kind


class LandmarkFailure(ProviderFailure):
    def __init__(self, message: str = ''):
        super().__init__('landmarks', message)


# Datasets and evaluation inputs

class RetalkDataException(RetalkException):
    pass


class EmptyDataset(RetalkDataException):
    pass


class DatasetEmpty(RetalkDataException):
    pass


class ClipTooShort(RetalkDataException):
    pass


class TooFewSamples(RetalkDataException):
    pass


# Orchestration

class RetalkPipelineException(RetalkException):
    pass


class MissingCheckpoint(RetalkPipelineException):
    def __init__(self, stage: str, path=None):
        super().__init__(f"Missing checkpoint for '{stage}'" + (f" at {path}" if path else ''))
        self.stage = stage


class StageFailure(RetalkPipelineException):
    def __init__(self, stage: str, message: str = ''):
        super().__init__(f"Stage '{stage}' failed{': ' + message if message else ''}")
        self.stage = stage


class DependencyMissing(RetalkPipelineException):
    def __init__(self, stage: str, dependency: str):
        super().__init__(f"Training '{stage}' requires a '{dependency}' checkpoint")
        self.stage = stage
        self.dependency = dependency


class RetalkConfigException(RetalkException):
    pass
