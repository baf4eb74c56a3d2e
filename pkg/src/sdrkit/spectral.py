"""STFT analysis/synthesis, magnitude compression, mixture normalization.

The time-frequency representation all restoration happens in: one-sided
STFT with a 510-sample Hann window zero-padded to a 512-point FFT, hop
128.  Spectrograms carry a `compressed` flag so the square-root magnitude
compression cannot be applied or inverted twice, and a `norm_factor`
remembering the mixture peak divided out before analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError, StateError
from .signal_io import Waveform


def _hann(n: int) -> np.ndarray:
    return np.hanning(n)


@dataclass(frozen=True)
class StftConfig:
    win_len: int = 510
    hop: int = 128
    fft_size: int = 512
    compress_scale: float = 0.15

    def __post_init__(self):
        if self.hop <= 0 or self.win_len <= 0:
            raise ValueError("win_len and hop must be positive")
        if self.hop > self.win_len:
            raise ValueError("hop must not exceed win_len")
        if self.fft_size < self.win_len:
            raise ValueError("fft_size must be at least win_len")
        if self.compress_scale <= 0:
            raise ValueError("compress_scale must be positive")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        return _hann(self.win_len)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_len:
            raise ShapeError(
                f"signal of {n_samples} samples shorter than one window "
                f"({self.win_len})"
            )
        return 1 + (n_samples - self.win_len) // self.hop


@dataclass
class ComplexSpectrogram:
    """F x T complex bins plus bookkeeping flags."""

    bins: np.ndarray
    compressed: bool = False
    norm_factor: float = 1.0

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 2:
            raise ShapeError("spectrogram bins must be a 2-D (F, T) array")
        if self.bins.size and not np.isfinite(self.bins).all():
            raise ValueError("spectrogram bins must be finite")
        if not (self.norm_factor > 0):
            raise ValueError("norm_factor must be positive")

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """One-sided STFT; frame t covers samples [t*hop, t*hop + win_len)."""
    x = np.asarray(w.samples, dtype=np.float64)
    n_frames = cfg.n_frames(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_len)[:: cfg.hop]
    frames = frames[:n_frames] * cfg.window()
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return ComplexSpectrogram(spec.T.copy(), compressed=False)


def istft(
    S: ComplexSpectrogram,
    cfg: StftConfig,
    length: int,
    sample_rate_hz: int = 16000,
) -> Waveform:
    """Least-squares overlap-add inverse of stft, cut/padded to `length`.

    Synthesis divides the windowed overlap-add by the accumulated squared
    window, which inverts the analysis exactly wherever frames overlap.
    """
    if S.compressed:
        raise StateError("istft of a compressed spectrogram; decompress first")
    if S.n_bins != cfg.n_bins:
        raise ShapeError(
            f"spectrogram has {S.n_bins} bins, config implies {cfg.n_bins}"
        )
    win = cfg.window()
    frames = np.fft.irfft(S.bins.T, n=cfg.fft_size, axis=1)[:, : cfg.win_len]
    n_cover = (S.n_frames - 1) * cfg.hop + cfg.win_len
    acc = np.zeros(n_cover)
    den = np.zeros(n_cover)
    for t in range(S.n_frames):
        s = t * cfg.hop
        acc[s : s + cfg.win_len] += win * frames[t]
        den[s : s + cfg.win_len] += win**2
    out = np.where(den > 1e-12, acc / np.maximum(den, 1e-12), 0.0)
    if length <= n_cover:
        out = out[:length]
    else:
        out = np.concatenate([out, np.zeros(length - n_cover)])
    return Waveform(out, sample_rate_hz)


def _unit_phase(z: np.ndarray) -> np.ndarray:
    # e^{i angle(z)}, with the phase of exact zeros defined as 0
    mag = np.abs(z)
    return np.where(mag > 0, z / np.where(mag > 0, mag, 1.0), 0.0)


def compress(S: ComplexSpectrogram, scale: float = 0.15) -> ComplexSpectrogram:
    """c = scale * |X|^0.5 * exp(i angle X)."""
    if S.compressed:
        raise StateError("spectrogram already compressed")
    mag = np.abs(S.bins)
    out = scale * np.sqrt(mag) * _unit_phase(S.bins)
    return ComplexSpectrogram(out, compressed=True, norm_factor=S.norm_factor)


def decompress(S: ComplexSpectrogram, scale: float = 0.15) -> ComplexSpectrogram:
    """Exact inverse of compress: X = (|c|/scale)^2 * exp(i angle c)."""
    if not S.compressed:
        raise StateError("spectrogram is not compressed")
    mag = np.abs(S.bins) / scale
    out = mag**2 * _unit_phase(S.bins)
    return ComplexSpectrogram(out, compressed=False, norm_factor=S.norm_factor)


def normalize_pair(clean: Waveform, corrupted: Waveform):
    """Scale both waveforms by 1 / max|corrupted|.

    Returns (clean_scaled, corrupted_scaled, norm_factor); multiplying the
    outputs by norm_factor restores the inputs.
    """
    if clean.sample_rate_hz != corrupted.sample_rate_hz:
        raise ShapeError("clean and corrupted sample rates differ")
    if len(corrupted) == 0:
        raise DegenerateInputError("corrupted signal is empty")
    factor = float(np.max(np.abs(corrupted.samples)))
    if factor == 0.0:
        raise DegenerateInputError("corrupted signal is silent")
    return (
        Waveform(clean.samples / factor, clean.sample_rate_hz),
        Waveform(corrupted.samples / factor, corrupted.sample_rate_hz),
        factor,
    )


def extract_patch(S: ComplexSpectrogram, frames: int = 256, rng=None):
    """Random contiguous crop of `frames` frames; returns (patch, offset).

    Offsets are drawn from rng so paired spectrograms can be cropped at the
    same position via take_patch.  Short inputs are zero-padded on the right
    (offset 0).
    """
    if rng is None:
        rng = np.random.default_rng()
    if S.n_frames > frames:
        offset = int(rng.integers(0, S.n_frames - frames + 1))
    else:
        offset = 0
    return take_patch(S, offset, frames), offset


def take_patch(S: ComplexSpectrogram, offset: int, frames: int = 256) -> ComplexSpectrogram:
    """Crop `frames` frames starting at `offset`, zero-padding on the right."""
    if offset < 0 or (S.n_frames > frames and offset > S.n_frames - frames):
        raise ShapeError(f"offset {offset} out of range for {S.n_frames} frames")
    patch = S.bins[:, offset : offset + frames]
    if patch.shape[1] < frames:
        pad = np.zeros((S.n_bins, frames - patch.shape[1]), dtype=patch.dtype)
        patch = np.concatenate([patch, pad], axis=1)
    return ComplexSpectrogram(
        patch.copy(), compressed=S.compressed, norm_factor=S.norm_factor
    )


def analyze(w: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """stft followed by compression with the config's scale."""
    return compress(stft(w, cfg), scale=cfg.compress_scale)


def synthesize(
    S: ComplexSpectrogram,
    cfg: StftConfig,
    length: int,
    sample_rate_hz: int = 16000,
) -> Waveform:
    """Decompress (if needed), invert the STFT, undo the mixture scaling."""
    if S.compressed:
        S = decompress(S, scale=cfg.compress_scale)
    w = istft(S, cfg, length, sample_rate_hz)
    return Waveform(w.samples * S.norm_factor, sample_rate_hz)
