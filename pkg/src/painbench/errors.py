"""Exception types raised across the pipeline.

Every error derives from :class:`PainBenchError` (itself a ``ValueError``) so
callers can catch pipeline failures without swallowing unrelated bugs.
"""


class PainBenchError(ValueError):
    pass


# ingestion
class MissingField(PainBenchError):
    pass


class UnknownDatasetTag(PainBenchError):
    pass


class LabelContradiction(PainBenchError):
    pass


class MissingImageFile(PainBenchError):
    pass


class DuplicateSample(PainBenchError):
    pass


# preprocessing
class NoFaceDetected(PainBenchError):
    pass


class DegenerateBox(PainBenchError):
    pass


class MaskTooSparse(PainBenchError):
    pass


# scales / agreement
class OutOfRangeAU(PainBenchError):
    pass


class WrongItemCount(PainBenchError):
    pass


class InvalidScore(PainBenchError):
    pass


class InsufficientRaters(PainBenchError):
    pass


class DegenerateTable(PainBenchError):
    pass


class TooFewSubjects(PainBenchError):
    pass


class TooFewImages(PainBenchError):
    pass


class InconsistentRaterSet(PainBenchError):
    pass


# models / experiments
class UnknownArchitecture(PainBenchError):
    pass


class MissingPretrainedWeights(PainBenchError):
    pass


class SingleClassCorpus(PainBenchError):
    pass


class EmptyCorpus(PainBenchError):
    pass


class ShapeMismatch(PainBenchError):
    pass


class EmptyTestSet(PainBenchError):
    pass


# explanation
class SegmentationFailure(PainBenchError):
    pass


class LandmarksNotFound(PainBenchError):
    pass


class DegenerateLandmarks(PainBenchError):
    pass


class EmptyExplanationSet(PainBenchError):
    pass


# fixtures / config
class InvalidParams(PainBenchError):
    pass


class ConfigError(PainBenchError):
    pass
