"""Shoebox room impulse responses via the image-source method.

Wall absorption comes from inverting Sabine's formula for the target decay
time; the anechoic target for dereverberation uses the same geometry with
absorption pinned to 0.99.  Image arrival times are spread onto the sample
grid with an 81-tap Hann-windowed sinc.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleRoomError, ParameterError
from .signal_io import Waveform

SPEED_OF_SOUND = 343.0
SINC_TAPS = 81

# recipe sampling box
DIM_XY = (5.0, 15.0)
DIM_Z = (2.0, 6.0)
T60_RANGE = (0.4, 1.0)
WALL_MARGIN = 0.5

DRY_ABSORPTION = 0.99

# keep images until the modeled decay has fallen by 60*this many dB past
# the direct arrival; 0.9 leaves well under 1e-4 of the tail energy out
# even though the specular lattice decays somewhat slower than the model
TRUNCATION_FACTOR = 0.9


@dataclass(frozen=True)
class RoomSpec:
    length: float
    width: float
    height: float
    t60_target: float
    source_pos: tuple
    mic_pos: tuple

    def __post_init__(self):
        lo, hi = DIM_XY
        if not (lo <= self.length <= hi and lo <= self.width <= hi):
            raise ParameterError(f"floor dims must lie in [{lo},{hi}] m")
        zlo, zhi = DIM_Z
        if not (zlo <= self.height <= zhi):
            raise ParameterError(f"height must lie in [{zlo},{zhi}] m")
        tlo, thi = T60_RANGE
        if not (tlo <= self.t60_target <= thi):
            raise ParameterError(f"t60_target must lie in [{tlo},{thi}] s")
        dims = (self.length, self.width, self.height)
        for name, pos in (("source", self.source_pos), ("mic", self.mic_pos)):
            if len(pos) != 3:
                raise ParameterError(f"{name}_pos must be 3-D")
            for c, d in zip(pos, dims):
                if not (WALL_MARGIN <= c <= d - WALL_MARGIN):
                    raise ParameterError(
                        f"{name} position {pos} closer than {WALL_MARGIN} m to a wall"
                    )

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def surface(self) -> float:
        l, w, h = self.length, self.width, self.height
        return 2.0 * (l * w + l * h + w * h)

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "width": self.width,
            "height": self.height,
            "t60_target": self.t60_target,
            "source_pos": list(self.source_pos),
            "mic_pos": list(self.mic_pos),
        }

    @staticmethod
    def from_dict(d: dict) -> "RoomSpec":
        return RoomSpec(
            d["length"],
            d["width"],
            d["height"],
            d["t60_target"],
            tuple(d["source_pos"]),
            tuple(d["mic_pos"]),
        )


def sabine_absorption(volume: float, surface: float, t60: float) -> float:
    """Uniform wall absorption for a target T60, alpha = 0.161 V / (T60 A).

    Values in (0.99, 1) are clamped to 0.99; >= 1 means the geometry cannot
    decay that fast and raises InfeasibleRoomError.
    """
    if t60 <= 0 or volume <= 0 or surface <= 0:
        raise ParameterError("volume, surface and t60 must be positive")
    alpha = 0.161 * volume / (t60 * surface)
    if alpha >= 1.0:
        raise InfeasibleRoomError(
            f"absorption {alpha:.3f} >= 1 for V={volume:.1f}, A={surface:.1f}, "
            f"T60={t60:.2f}"
        )
    return min(alpha, 0.99)


def sabine_t60(volume: float, surface: float, alpha: float) -> float:
    return 0.161 * volume / (alpha * surface)


def sample_room(rng: np.random.Generator) -> RoomSpec:
    """Draw a room from the recipe box with source/mic inside the margin."""
    while True:
        l = rng.uniform(*DIM_XY)
        w = rng.uniform(*DIM_XY)
        h = rng.uniform(*DIM_Z)
        t60 = rng.uniform(*T60_RANGE)
        dims = np.array([l, w, h])
        src = rng.uniform(WALL_MARGIN, dims - WALL_MARGIN)
        mic = rng.uniform(WALL_MARGIN, dims - WALL_MARGIN)
        spec = RoomSpec(l, w, h, t60, tuple(src), tuple(mic))
        try:
            sabine_absorption(spec.volume, spec.surface, t60)
        except InfeasibleRoomError:
            continue  # cannot happen inside the box, kept for safety
        return spec


def _axis_images(src: float, mic: float, dim: float, beta: float, n_max: int):
    """Image offsets and reflection amplitudes along one axis.

    Images live at (1-2p)*src + 2*r*dim for p in {0,1}, r in [-n,n]; the
    wall pair contributes beta^|r-p| * beta^|r| to the amplitude (p=1, r=1
    is the single bounce off the far wall, hence exponent |r-p| = 0 there).
    """
    r = np.arange(-n_max, n_max + 1)
    parts = []
    for p in (0, 1):
        pos = (1 - 2 * p) * src + 2 * r * dim
        amp = beta ** np.abs(r - p) * beta ** np.abs(r)
        parts.append((pos - mic, amp))
    off = np.concatenate([parts[0][0], parts[1][0]])
    amp = np.concatenate([parts[0][1], parts[1][1]])
    return off, amp


def simulate_rir(room: RoomSpec, fs: int, dry: bool = False) -> Waveform:
    """Image-source RIR for the room; dry=True pins absorption to 0.99.

    The response is truncated once the modeled decay has dropped 54 dB
    past the direct arrival, leaving under 1e-4 of the tail energy out.
    """
    if dry:
        alpha = DRY_ABSORPTION
    else:
        alpha = sabine_absorption(room.volume, room.surface, room.t60_target)
    # negative reflection coefficient: pressure flips sign at each bounce,
    # so dense late arrivals sum incoherently instead of piling up in phase
    beta = -float(np.sqrt(1.0 - alpha))
    t60_model = sabine_t60(room.volume, room.surface, alpha)

    src = np.asarray(room.source_pos, dtype=np.float64)
    mic = np.asarray(room.mic_pos, dtype=np.float64)
    direct_delay = float(np.linalg.norm(src - mic)) / SPEED_OF_SOUND
    t_max = direct_delay + TRUNCATION_FACTOR * t60_model
    reach = SPEED_OF_SOUND * t_max

    offs, amps = [], []
    for axis in range(3):
        dim = room.dims[axis]
        n_max = int(np.ceil(reach / (2.0 * dim))) + 1
        o, a = _axis_images(src[axis], mic[axis], dim, beta, n_max)
        offs.append(o)
        amps.append(a)

    # outer product over the three axes, flattened
    dx2 = offs[0][:, None, None] ** 2 + offs[1][None, :, None] ** 2
    dist = np.sqrt(dx2[:, :, None] + offs[2][None, None, :] ** 2).ravel()
    amp = (
        amps[0][:, None, None] * amps[1][None, :, None] * amps[2][None, None, :]
    ).ravel()

    keep = dist <= reach
    dist = dist[keep]
    amp = amp[keep] / (4.0 * np.pi * np.maximum(dist, 1e-3))
    delays = dist / SPEED_OF_SOUND * fs

    half = SINC_TAPS // 2
    n_out = int(np.ceil(t_max * fs)) + half + 2
    h = np.zeros(n_out + SINC_TAPS)
    k = np.arange(-half, half + 1, dtype=np.float64)
    chunk = 200_000
    for s in range(0, delays.size, chunk):
        d = delays[s : s + chunk]
        a = amp[s : s + chunk]
        base = np.floor(d).astype(np.int64)
        frac = d - base
        rel = k[None, :] - frac[:, None]
        taps = np.sinc(rel) * (0.5 * (1.0 + np.cos(2.0 * np.pi * rel / SINC_TAPS)))
        taps *= a[:, None]
        idx = base[:, None] + np.arange(-half, half + 1)[None, :] + half
        np.add.at(h, idx.ravel(), taps.ravel())
    h = h[half : half + n_out]
    return Waveform(h, fs)


def direct_path_index(h: Waveform) -> int:
    """Onset of the direct sound: first sample reaching half the peak.

    More robust than a plain argmax, whose direct-path peak can be split
    across two samples by the fractional-delay interpolation.
    """
    mag = np.abs(np.asarray(h.samples))
    if mag.size == 0 or mag.max() == 0:
        raise ParameterError("silent impulse response")
    return int(np.argmax(mag >= 0.5 * mag.max()))


def measure_t60(h: Waveform, fit_db=(-5.0, -15.0)) -> float:
    """Decay time from Schroeder backward integration of the squared RIR.

    A line is fit to the energy-decay curve between fit_db[0] and
    fit_db[1] and its slope extrapolated to -60 dB.  The short default
    range sits well clear of the truncated tail of simulated responses.
    """
    e = np.asarray(h.samples, dtype=np.float64) ** 2
    total = e.sum()
    if total <= 0:
        raise ParameterError("silent impulse response")
    edc = np.cumsum(e[::-1])[::-1] / total
    db = 10.0 * np.log10(np.maximum(edc, 1e-30))
    hi, lo = fit_db
    mask = (db <= hi) & (db >= lo)
    if mask.sum() < 8:
        raise ParameterError("decay range too short for a T60 fit")
    t = np.arange(db.size) / h.sample_rate_hz
    slope, _ = np.polyfit(t[mask], db[mask], 1)
    if slope >= 0:
        raise ParameterError("non-decaying energy curve")
    return -60.0 / slope
