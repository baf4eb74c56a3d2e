"""Mono waveform I/O and rational-rate polyphase resampling.

WAV support is deliberately narrow: RIFF/WAVE containers holding PCM16 or
IEEE float32 samples, which is all the corruption pipelines produce and
consume.  Multichannel files are reduced to channel 0.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

from .errors import DegenerateInputError, FormatError, UnsupportedFormatError

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

PCM16_SCALE = 32768.0


class MultichannelWarning(UserWarning):
    """Emitted when a multichannel file is reduced to its first channel."""


@dataclass
class Waveform:
    """A mono sample buffer plus its sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ValueError("Waveform samples must be one-dimensional")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample_rate_hz must be positive")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if self.samples.size and not np.isfinite(self.samples).all():
            raise ValueError("Waveform samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


def _read_chunks(data: bytes) -> dict:
    """Walk the RIFF chunk list and return {chunk_id: payload}."""
    if len(data) < 12:
        raise FormatError("file too short to be RIFF/WAVE")
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE file")
    chunks = {}
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        payload = data[pos + 8 : pos + 8 + size]
        if len(payload) < size:
            if cid == b"data":
                # tolerate a truncated data chunk, common with some writers
                size = len(payload)
            else:
                raise FormatError(f"truncated {cid!r} chunk")
        if cid not in chunks:
            chunks[cid] = payload[:size]
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    return chunks


def read_wav(path) -> Waveform:
    """Read a WAV file as a mono float waveform.

    PCM16 samples are scaled by 1/32768; float32 samples are returned as
    stored.  Files with more than one channel keep channel 0 only and emit
    a MultichannelWarning.
    """
    with open(path, "rb") as f:
        data = f.read()
    chunks = _read_chunks(data)
    if b"fmt " not in chunks or b"data" not in chunks:
        raise FormatError("missing fmt or data chunk")
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise FormatError("fmt chunk too short")
    audio_format, n_channels, sample_rate, _, _, bits = struct.unpack(
        "<HHIIHH", fmt[:16]
    )
    if audio_format == WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise FormatError("extensible fmt chunk too short")
        (audio_format,) = struct.unpack("<H", fmt[24:26])  # GUID leads with tag
    if n_channels < 1:
        raise FormatError("zero channels")
    if sample_rate <= 0:
        raise FormatError("non-positive sample rate")

    payload = chunks[b"data"]
    if audio_format == WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (2 * n_channels)],
                            dtype="<i2")
        samples = raw.astype(np.float32) / np.float32(PCM16_SCALE)
    elif audio_format == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (4 * n_channels)],
                            dtype="<f4")
        samples = raw.copy()
    else:
        raise UnsupportedFormatError(
            f"unsupported encoding: format tag {audio_format}, {bits} bits"
        )

    if n_channels > 1:
        samples = samples[::n_channels].copy()
        warnings.warn(
            f"{path}: {n_channels} channels, keeping channel 0",
            MultichannelWarning,
            stacklevel=2,
        )
    if samples.size and not np.isfinite(samples).all():
        raise FormatError("non-finite samples in file")
    return Waveform(samples, sample_rate)


def write_wav(path, w: Waveform, encoding: str = "float32") -> int:
    """Write a mono waveform as a WAV file.

    Returns the number of samples clipped to the representable range
    (always 0 for float32).  float32 round-trips bit-exactly through
    read_wav; pcm16 round-trips within 1/32768 per sample.
    """
    if encoding == "float32":
        payload = np.asarray(w.samples, dtype="<f4").tobytes()
        fmt_tag, bits, block = WAVE_FORMAT_IEEE_FLOAT, 32, 4
        clipped = 0
    elif encoding == "pcm16":
        x = np.asarray(w.samples, dtype=np.float64)
        q = np.round(x * PCM16_SCALE)
        clipped = int(np.count_nonzero((q > 32767.0) | (q < -32768.0)))
        q = np.clip(q, -32768.0, 32767.0)
        payload = q.astype("<i2").tobytes()
        fmt_tag, bits, block = WAVE_FORMAT_PCM, 16, 2
    else:
        raise UnsupportedFormatError(f"unsupported encoding {encoding!r}")

    byte_rate = w.sample_rate_hz * block
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, fmt_tag, 1, w.sample_rate_hz, byte_rate, block, bits
    )
    header += b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as f:
        f.write(header + payload)
    if clipped:
        warnings.warn(f"{path}: {clipped} samples clipped by pcm16 quantization",
                      stacklevel=2)
    return clipped


def _kaiser_sinc_taps(up: int, down: int, taps_per_phase: int, beta: float) -> np.ndarray:
    """Linear-phase lowpass for a rational resampler.

    Cutoff is min(pi/up, pi/down) in the upsampled domain; unity passband
    gain (resample_poly applies the factor `up` itself).
    """
    n_half = max(1, (taps_per_phase * max(up, down)) // 2)
    n = np.arange(-n_half, n_half + 1, dtype=np.float64)
    cutoff = 1.0 / max(up, down)  # fraction of the upsampled Nyquist
    taps = cutoff * np.sinc(cutoff * n) * np.kaiser(2 * n_half + 1, beta)
    return taps / taps.sum()


def resample_polyphase(
    w: Waveform,
    target_rate_hz: int,
    taps_per_phase: int = 24,
    kaiser_beta: float = 8.6,
    max_factor: int = 64,
) -> Waveform:
    """Polyphase resampling to target_rate_hz.

    The rate ratio must reduce to L/M with L, M <= max_factor.  Output is
    time-aligned with the input (group delay compensated) and has exactly
    ceil(len * L / M) samples.
    """
    if target_rate_hz <= 0:
        raise UnsupportedFormatError("target rate must be positive")
    g = math.gcd(w.sample_rate_hz, target_rate_hz)
    up = target_rate_hz // g
    down = w.sample_rate_hz // g
    if up > max_factor or down > max_factor:
        raise UnsupportedFormatError(
            f"rate ratio {target_rate_hz}/{w.sample_rate_hz} reduces to "
            f"{up}/{down}, beyond the supported factor {max_factor}"
        )
    if up == down:
        return Waveform(w.samples.copy(), target_rate_hz)
    if len(w) == 0:
        return Waveform(w.samples.copy(), target_rate_hz)
    taps = _kaiser_sinc_taps(up, down, taps_per_phase, kaiser_beta)
    y = resample_poly(np.asarray(w.samples, dtype=np.float64), up, down, window=taps)
    return Waveform(y, target_rate_hz)


def require_non_silent(w: Waveform, what: str = "signal") -> float:
    """Return max |samples|, raising DegenerateInputError on silence."""
    peak = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if peak == 0.0:
        raise DegenerateInputError(f"{what} is silent")
    return peak
