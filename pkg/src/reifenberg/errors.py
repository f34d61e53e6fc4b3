"""Exception hierarchy.  Every error carries a short machine-readable code."""


class ReifenbergError(Exception):
    code = "error"

    def to_json(self):
        return {"error": self.code, "message": str(self)}


class AffineDependence(ReifenbergError):
    code = "AffineDependence"


class DimensionMismatch(ReifenbergError):
    code = "DimensionMismatch"


class FaceContainment(ReifenbergError):
    code = "FaceContainment"


class EmptyFamily(ReifenbergError):
    code = "EmptyFamily"


class TooCloseToLowerSpine(ReifenbergError):
    code = "TooCloseToLowerSpine"


class UnknownName(ReifenbergError):
    code = "UnknownName"


class EmptyIntersection(ReifenbergError):
    code = "EmptyIntersection"


class HypothesisFailed(ReifenbergError):
    code = "HypothesisFailed"


class NoTypeMModel(ReifenbergError):
    code = "NoTypeMModel"


class ScaleLadderTooShort(ReifenbergError):
    code = "ScaleLadderTooShort"


class EmptyStratumLadder(ReifenbergError):
    code = "EmptyStratumLadder"


class CoverageGap(ReifenbergError):
    code = "CoverageGap"


class LipschitzExceeded(ReifenbergError):
    code = "LipschitzExceeded"


class GraphFitMissing(ReifenbergError):
    code = "GraphFitMissing"


class ContractViolated(ReifenbergError):
    code = "ContractViolated"


class MonitorHardFail(ReifenbergError):
    code = "MonitorHardFail"


class OutOfDomain(ReifenbergError):
    code = "OutOfDomain"


class InsufficientRange(ReifenbergError):
    code = "InsufficientRange"


class DensityTooLow(ReifenbergError):
    code = "DensityTooLow"


class FieldNotCertified(ReifenbergError):
    code = "FieldNotCertified"
