"""Exception hierarchy.

Every error carries a short machine-readable ``category`` which the command
line reports on failure.
"""


class CinePhaseError(Exception):
    category = "error"


class ShapeError(CinePhaseError, ValueError):
    category = "shape"


class NumericError(CinePhaseError, ArithmeticError):
    category = "numeric"


class StateError(CinePhaseError, RuntimeError):
    category = "state"


class ConfigError(CinePhaseError, ValueError):
    category = "config"


class DomainError(CinePhaseError, ValueError):
    category = "domain"


class SignalTooShort(CinePhaseError, ValueError):
    category = "signal_too_short"


class InsufficientBeats(CinePhaseError, ValueError):
    category = "insufficient_beats"


class TPeakNotFound(CinePhaseError, ValueError):
    category = "t_peak_not_found"


class NoOverlap(CinePhaseError, ValueError):
    category = "no_overlap"


class UnsupportedFrameRate(CinePhaseError, ValueError):
    category = "unsupported_frame_rate"


class EmptyDataset(CinePhaseError, ValueError):
    category = "empty_dataset"


class SequenceTooShort(CinePhaseError, ValueError):
    category = "sequence_too_short"


class EmptyEvaluation(CinePhaseError, ValueError):
    category = "empty_evaluation"


class FormatError(CinePhaseError, ValueError):
    category = "format"


class CollimationError(CinePhaseError, ValueError):
    category = "collimation"


class InclusionRejected(CinePhaseError, ValueError):
    category = "rejected"
