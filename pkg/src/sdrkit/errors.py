"""Exception taxonomy shared by all sdrkit modules."""


class SdrkitError(Exception):
    """Base class for all errors raised by sdrkit."""


class FormatError(SdrkitError):
    """Malformed container or header (e.g. a broken RIFF/WAVE file)."""


class UnsupportedFormatError(SdrkitError):
    """Well-formed input that sdrkit does not handle (codec, rate ratio...)."""


class DegenerateInputError(SdrkitError):
    """Input that makes the requested operation meaningless (silence etc.)."""


class ParameterError(SdrkitError):
    """Out-of-range or inconsistent parameter value."""


class ShapeError(SdrkitError):
    """Array arguments whose shapes do not agree."""


class StateError(SdrkitError):
    """Operation applied to an object in the wrong state (double compression,
    consumed backprop tape, ...)."""


class InfeasibleRoomError(SdrkitError):
    """Room geometry and target decay time have no physical absorption."""


class NumericError(SdrkitError):
    """Numerical guard tripped (non-finite state, evaluation below the
    minimal diffusion time, diverged training loss)."""


class ConfigError(SdrkitError):
    """Invalid, inconsistent or mismatched run configuration."""
