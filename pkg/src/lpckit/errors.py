"""Exception types shared across the toolkit."""


class LpcKitError(Exception):
    """Base class for toolkit errors."""


class DimensionMismatch(LpcKitError):
    pass


class RankDeficient(LpcKitError):
    pass


class CollectionStalled(LpcKitError):
    pass


class InvalidConfidence(LpcKitError):
    pass


class NotSchur(LpcKitError):
    pass


class NotStabilizable(LpcKitError):
    pass


class NoConvergence(LpcKitError):
    pass


class SingularMap(LpcKitError):
    pass


class EmptyFeasibleSet(LpcKitError):
    pass


class Degenerate(LpcKitError):
    pass


class BoundaryEvaluation(LpcKitError):
    pass


class Infeasible(LpcKitError):
    pass


class MaxIterations(LpcKitError):
    pass


class DivergenceDetected(LpcKitError):
    pass


class NoSafePolicy(LpcKitError):
    pass


class DesignInfeasible(LpcKitError):
    pass
