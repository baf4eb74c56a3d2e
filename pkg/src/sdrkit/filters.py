"""IIR anti-aliasing filter design for the bandwidth-reduction task.

Four classical lowpass families, emitted as second-order sections.  Ripple
and stopband numbers for Chebyshev-I and elliptic are fixed here (1 dB /
40 dB) since only the family name and order vary across corruptions.
"""

from __future__ import annotations

import numpy as np
from scipy import signal

from .errors import ParameterError

FAMILIES = ("butterworth", "chebyshev1", "elliptic", "bessel")
ORDERS = (2, 4, 8)

PASSBAND_RIPPLE_DB = 1.0
STOPBAND_ATTEN_DB = 40.0


def design_lowpass(family: str, order: int, cutoff_hz: float, fs: float) -> np.ndarray:
    """Design a digital lowpass, returned as (n_sections, 6) SOS array.

    Bessel uses magnitude normalization so that, like the other families,
    the cutoff is the -3 dB point.
    """
    if order not in ORDERS:
        raise ParameterError(f"order must be one of {ORDERS}, got {order}")
    if not (0.0 < cutoff_hz < fs / 2):
        raise ParameterError(
            f"cutoff {cutoff_hz} Hz outside (0, {fs / 2}) for fs {fs}"
        )
    if family == "butterworth":
        sos = signal.butter(order, cutoff_hz, btype="low", output="sos", fs=fs)
    elif family == "chebyshev1":
        sos = signal.cheby1(
            order, PASSBAND_RIPPLE_DB, cutoff_hz, btype="low", output="sos", fs=fs
        )
    elif family == "elliptic":
        sos = signal.ellip(
            order,
            PASSBAND_RIPPLE_DB,
            STOPBAND_ATTEN_DB,
            cutoff_hz,
            btype="low",
            output="sos",
            fs=fs,
        )
    elif family == "bessel":
        sos = signal.bessel(
            order, cutoff_hz, btype="low", output="sos", norm="mag", fs=fs
        )
    else:
        raise ParameterError(f"unknown filter family {family!r}")
    return sos


def sos_response_db(sos: np.ndarray, freqs_hz, fs: float) -> np.ndarray:
    """|H| in dB at the given frequencies."""
    freqs_hz = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
    _, h = signal.sosfreqz(sos, worN=freqs_hz, fs=fs)
    return 20.0 * np.log10(np.maximum(np.abs(h), 1e-300))


def sos_max_pole_magnitude(sos: np.ndarray) -> float:
    """Largest pole magnitude over all sections (stability check)."""
    worst = 0.0
    for section in np.atleast_2d(sos):
        poles = np.roots(section[3:6])
        if poles.size:
            worst = max(worst, float(np.max(np.abs(poles))))
    return worst


def apply_lowpass(x: np.ndarray, sos: np.ndarray) -> np.ndarray:
    """Zero-phase filtering (forward-backward pass).

    Keeps the decimated signal time-aligned with its clean counterpart;
    the magnitude response is applied twice.
    """
    return signal.sosfiltfilt(sos, np.asarray(x, dtype=np.float64))
