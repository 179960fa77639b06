"""Exception types shared across the package."""


class EfficientAsrError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(EfficientAsrError, ValueError):
    """Operand shapes or ranks are incompatible."""


class ConfigError(EfficientAsrError, ValueError):
    """Invalid configuration value (divisibility, ranges, unknown keys)."""


class ModeError(EfficientAsrError, ValueError):
    """Operation called on an attention layer in the wrong mode."""


class StateError(EfficientAsrError, ValueError):
    """Carried attention state is inconsistent with the current input."""


class ScheduleError(EfficientAsrError, ValueError):
    """Layer schedule violated, e.g. a shared layer with no prior update layer."""


class VocabError(EfficientAsrError, ValueError):
    """Token id outside the vocabulary, or a reserved id used as a label."""


class DegenerateRowError(EfficientAsrError, ValueError):
    """Softmax over a fully masked row."""


class InfeasibleAlignmentError(EfficientAsrError, ValueError):
    """CTC target cannot be aligned within the given number of frames."""


class NonFiniteLossError(EfficientAsrError, RuntimeError):
    """Training loss became NaN or infinite."""


class ReconciliationError(EfficientAsrError, RuntimeError):
    """Analytic cost formulas disagree with instrumented measurements."""
