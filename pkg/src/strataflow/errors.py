"""Exception hierarchy shared by all strataflow modules."""


class StrataflowError(Exception):
    """Base class for every error raised by the package."""


class PointOffStratum(StrataflowError):
    pass


class RankDeficient(StrataflowError):
    pass


class DimensionMismatch(StrataflowError):
    pass


class CocycleViolation(StrataflowError):
    pass


class InvalidScale(StrataflowError):
    pass


class NoTransverseSubtube(StrataflowError):
    pass


class NotDisjoint(StrataflowError):
    pass


class NotTransverse(StrataflowError):
    pass


class EmptyStratum(StrataflowError):
    pass


class ExhaustedTries(StrataflowError):
    def __init__(self, message, tries=0):
        super().__init__(message)
        self.tries = tries


class FlowEvaluationFailure(StrataflowError):
    pass


class NotAGroup(StrataflowError):
    pass


class NonTransverseSeed(StrataflowError):
    pass


class CannotSatisfyChoices(StrataflowError):
    pass


class IntegrationEscape(StrataflowError):
    pass


class UnresolvedMembership(StrataflowError):
    pass


class SamplingTooCoarse(StrataflowError):
    pass


class ChainComplexViolation(StrataflowError):
    pass


class NotLinearized(StrataflowError):
    pass


class PerturbationTooLarge(StrataflowError):
    def __init__(self, message, distance=float("nan")):
        super().__init__(message)
        self.distance = distance


class SplitIllConditioned(StrataflowError):
    pass


class NonTransverseZero(StrataflowError):
    pass


class SerializationError(StrataflowError):
    pass


class ParseError(StrataflowError):
    pass


class SchemaError(StrataflowError):
    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class StageError(StrataflowError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
