"""Clean/corrupted pair generation for the three restoration tasks.

Additive noise mixed at an exact target SNR, reverberation from simulated
room impulse responses (the target is the same room with absorption 0.99),
and bandwidth reduction via IIR anti-aliasing, decimation and polyphase
return to the original rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import DegenerateInputError, ParameterError, ShapeError
from .filters import FAMILIES, ORDERS, apply_lowpass, design_lowpass
from .room import RoomSpec, direct_path_index, sample_room, simulate_rir
from .signal_io import Waveform, resample_polyphase

TASKS = ("noise", "reverb", "bandwidth")
DOWN_FACTORS = (2, 4, 8)
SNR_RANGE_DB = (0.0, 20.0)
CUTOFF_FRACTION = 0.9  # of the decimated Nyquist


@dataclass
class CorruptionSpec:
    kind: str
    snr_db: float | None = None
    room: RoomSpec | None = None
    filter_family: str | None = None
    filter_order: int | None = None
    down_factor: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ParameterError(f"kind must be one of {TASKS}, got {self.kind!r}")
        if self.kind == "noise" and self.snr_db is None:
            raise ParameterError("noise corruption needs snr_db")
        if self.kind == "reverb" and self.room is None:
            raise ParameterError("reverb corruption needs a room")
        if self.kind == "bandwidth":
            if self.filter_family not in FAMILIES:
                raise ParameterError(f"filter_family must be one of {FAMILIES}")
            if self.filter_order not in ORDERS:
                raise ParameterError(f"filter_order must be one of {ORDERS}")
            if self.down_factor not in DOWN_FACTORS:
                raise ParameterError(f"down_factor must be one of {DOWN_FACTORS}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": int(self.seed)}
        if self.kind == "noise":
            d["snr_db"] = float(self.snr_db)
        elif self.kind == "reverb":
            d["room"] = self.room.to_dict()
        else:
            d["filter_family"] = self.filter_family
            d["filter_order"] = int(self.filter_order)
            d["down_factor"] = int(self.down_factor)
        return d

    @staticmethod
    def from_dict(d: dict) -> "CorruptionSpec":
        room = RoomSpec.from_dict(d["room"]) if "room" in d else None
        return CorruptionSpec(
            kind=d["kind"],
            snr_db=d.get("snr_db"),
            room=room,
            filter_family=d.get("filter_family"),
            filter_order=d.get("filter_order"),
            down_factor=d.get("down_factor"),
            seed=d.get("seed", 0),
        )


def mix_at_snr(s: Waveform, n: Waveform, snr_db: float, rng=None):
    """Mix noise into speech at exactly snr_db.

    Noise longer than the speech is cropped at a random offset drawn from
    rng.  Returns (mixture, scaled_noise); the realized SNR matches the
    request to well under 1e-6 dB by construction.
    """
    if s.sample_rate_hz != n.sample_rate_hz:
        raise ShapeError("speech and noise sample rates differ")
    if len(n) < len(s):
        raise ShapeError(f"noise ({len(n)}) shorter than speech ({len(s)})")
    if rng is None:
        rng = np.random.default_rng()
    if len(n) > len(s):
        off = int(rng.integers(0, len(n) - len(s) + 1))
        noise = n.samples[off : off + len(s)]
    else:
        noise = n.samples
    p_s = float(np.mean(np.asarray(s.samples, dtype=np.float64) ** 2))
    p_n = float(np.mean(np.asarray(noise, dtype=np.float64) ** 2))
    if p_s == 0.0:
        raise DegenerateInputError("speech is silent")
    if p_n == 0.0:
        raise DegenerateInputError("noise is silent")
    alpha = np.sqrt(p_s / (p_n * 10.0 ** (snr_db / 10.0)))
    scaled = alpha * noise
    return (
        Waveform(s.samples + scaled, s.sample_rate_hz),
        Waveform(scaled, s.sample_rate_hz),
    )


def apply_reverb(s: Waveform, h: Waveform) -> Waveform:
    """Convolve with an RIR and realign so the direct path sits at lag 0."""
    if s.sample_rate_hz != h.sample_rate_hz:
        raise ShapeError("signal and RIR sample rates differ")
    y = fftconvolve(
        np.asarray(s.samples, dtype=np.float64),
        np.asarray(h.samples, dtype=np.float64),
    )
    direct = direct_path_index(h)
    out = y[direct : direct + len(s)]
    if out.size < len(s):
        out = np.concatenate([out, np.zeros(len(s) - out.size)])
    return Waveform(out, s.sample_rate_hz)


def bandwidth_reduce(s: Waveform, spec: CorruptionSpec) -> Waveform:
    """Anti-alias lowpass, keep every down_factor-th sample, resample back.

    Output has exactly the input length.
    """
    if spec.kind != "bandwidth":
        raise ParameterError("spec.kind must be 'bandwidth'")
    fs = s.sample_rate_hz
    if fs % spec.down_factor != 0:
        raise ParameterError(
            f"sample rate {fs} not divisible by down factor {spec.down_factor}"
        )
    cutoff = CUTOFF_FRACTION * (fs / 2.0 / spec.down_factor)
    sos = design_lowpass(spec.filter_family, spec.filter_order, cutoff, fs)
    filtered = apply_lowpass(s.samples, sos)
    low = Waveform(filtered[:: spec.down_factor], fs // spec.down_factor)
    back = resample_polyphase(low, fs)
    out = back.samples[: len(s)]
    if out.size < len(s):
        out = np.concatenate([out, np.zeros(len(s) - out.size)])
    return Waveform(out, fs)


def sample_spec(task: str, rng: np.random.Generator) -> CorruptionSpec:
    """Draw one corruption instance from the task's recipe distribution."""
    if task not in TASKS:
        raise ParameterError(f"task must be one of {TASKS}, got {task!r}")
    seed = int(rng.integers(0, 2**63 - 1))
    if task == "noise":
        return CorruptionSpec(
            kind="noise", snr_db=float(rng.uniform(*SNR_RANGE_DB)), seed=seed
        )
    if task == "reverb":
        return CorruptionSpec(kind="reverb", room=sample_room(rng), seed=seed)
    return CorruptionSpec(
        kind="bandwidth",
        filter_family=FAMILIES[rng.integers(len(FAMILIES))],
        filter_order=int(rng.choice(ORDERS)),
        down_factor=int(rng.choice(DOWN_FACTORS)),
        seed=seed,
    )


def corrupt_pair(s: Waveform, spec: CorruptionSpec, noise: Waveform | None = None):
    """Produce the (clean_target, corrupted) pair for one utterance.

    For noise the clean target is the input itself and `noise` must be
    given; for reverb the target is the dry (absorption 0.99) response of
    the same room; for bandwidth the target is the input.
    """
    rng = np.random.default_rng(np.uint64(spec.seed))
    if spec.kind == "noise":
        if noise is None:
            raise ParameterError("noise corruption needs a noise waveform")
        y, _ = mix_at_snr(s, noise, spec.snr_db, rng)
        return s, y
    if spec.kind == "reverb":
        h_wet = simulate_rir(spec.room, s.sample_rate_hz, dry=False)
        h_dry = simulate_rir(spec.room, s.sample_rate_hz, dry=True)
        return apply_reverb(s, h_dry), apply_reverb(s, h_wet)
    return s, bandwidth_reduce(s, spec)
