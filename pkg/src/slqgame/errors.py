"""Exception hierarchy and the CLI exit-code taxonomy."""

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ASSUMPTION = 2
EXIT_BLOWUP = 3
EXIT_VERIFY = 4


class SLQError(Exception):
    exit_code = EXIT_CONFIG


class ConfigError(SLQError):
    pass


class DimensionMismatch(ConfigError):
    pass


class NonFinite(ConfigError):
    pass


class OutOfRange(SLQError):
    pass


class UnknownPreset(ConfigError):
    pass


class AssumptionViolation(SLQError):
    """Base for failures of the standing invertibility/positivity assumptions."""

    exit_code = EXIT_ASSUMPTION
    label = "assumption"

    def __init__(self, message, t=None, margin=None):
        super().__init__(message)
        self.t = t
        self.margin = margin


class AssumptionA31Violated(AssumptionViolation):
    label = "A3.1"


class AssumptionA32Violated(AssumptionViolation):
    label = "A3.2"


class AssumptionA33Violated(AssumptionViolation):
    label = "A3.3"


class AssumptionA34Violated(AssumptionViolation):
    label = "A3.4"




class SingularNtilde1(AssumptionA32Violated):
    pass


class SingularN2(AssumptionA34Violated):
    pass


class SingularGainMatrix(AssumptionViolation):
    label = "A3.5/A3.6"


class AssumptionA35Violated(SingularGainMatrix):
    label = "A3.5"


class AssumptionA36Violated(SingularGainMatrix):
    label = "A3.6"


class BlowUp(SLQError):
    exit_code = EXIT_BLOWUP

    def __init__(self, message, t=None, partial=None):
        super().__init__(message)
        self.t = t
        self.partial = partial


class DimensionDefect(SLQError):
    """A printed formula does not conform dimensionally for this instance."""


class RegressionIllConditioned(SLQError):
    def __init__(self, message, step=None, cond=None):
        super().__init__(message)
        self.step = step
        self.cond = cond


class NotObservationAdapted(SLQError):
    pass


class OptimizerStalled(SLQError):
    pass


class VerificationFailed(SLQError):
    exit_code = EXIT_VERIFY
