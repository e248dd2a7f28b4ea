"""Exception hierarchy for mlopt.

Numerical/domain failures derive from :class:`MloptError` so callers (the CLI in
particular) can map them to a single exit code.
"""


class MloptError(Exception):
    """Base class for all domain errors raised by this package."""


class PointBehindCamera(MloptError):
    pass


class PointAtInfinity(MloptError):
    pass


class DegenerateHomography(MloptError):
    pass


class TooFewPoints(MloptError):
    pass


class DegenerateSet(MloptError):
    pass


class DegenerateConfiguration(MloptError):
    pass


class IllConditioned(MloptError):
    pass


class GradientProbeFailed(MloptError):
    pass


class InitialConfigurationDegenerate(MloptError):
    pass


class DivergedBehindCamera(MloptError):
    pass


class ZeroTranslation(MloptError):
    pass


class InfeasibleDistribution(MloptError):
    pass


class SamplerExhausted(MloptError):
    pass


class MixedN(MloptError):
    pass
