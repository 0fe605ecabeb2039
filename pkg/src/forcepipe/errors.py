"""Exception hierarchy shared by all forcepipe modules."""


class ForcepipeError(Exception):
    """Base class; carries the module tag used in CLI messages."""

    module = "forcepipe"


# dataset
class DatasetError(ForcepipeError):
    module = "dataset"


class MalformedFile(DatasetError):
    pass


class RateMismatch(DatasetError):
    pass


class NonFiniteSample(DatasetError):
    pass


class NonPositiveLeverArm(DatasetError, ValueError):
    pass


class IntervalOutOfRange(DatasetError, ValueError):
    pass


# dsp
class DspError(ForcepipeError, ValueError):
    module = "dsp"


class Downsample(DspError):
    pass


class TooShort(DspError):
    pass


class WrongChannelCount(DspError):
    pass


class InvalidSpec(DspError):
    pass


class EvenWindow(DspError):
    pass


class OrderTooHigh(DspError):
    pass


# neuralnet / model
class NeuralNetError(ForcepipeError, ValueError):
    module = "neuralnet"


class ShapeMismatch(NeuralNetError):
    pass


class BatchTooSmall(NeuralNetError):
    pass


class InvalidRate(NeuralNetError):
    pass


class LengthMismatch(NeuralNetError):
    pass


class CheckpointError(NeuralNetError):
    pass


class ModelError(ForcepipeError, ValueError):
    module = "model"


class UnsupportedCombination(ModelError):
    pass


class EmptySet(ModelError):
    pass


class DivergedLoss(ModelError, FloatingPointError):
    pass


class DegenerateVariance(ModelError):
    pass


class MissingModel(ModelError):
    pass


# evaluation
class EvaluationError(ForcepipeError, ValueError):
    module = "evaluation"


class ConstantTarget(EvaluationError):
    pass


class TooSmall(EvaluationError):
    pass


class DegenerateInput(EvaluationError):
    pass


# synthgen
class InvalidProfile(ForcepipeError, ValueError):
    module = "synthgen"


# configuration / command line
class ConfigError(ForcepipeError, ValueError):
    module = "cli"
