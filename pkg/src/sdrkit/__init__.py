"""Score-based diffusion restoration of speech-like signals.

The toolkit corrupts clean recordings (additive noise, simulated
reverberation, bandwidth reduction), trains a noise-conditional score
network on compressed complex spectrograms, and restores recordings by
integrating the reverse SDE with a predictor-corrector sampler.  The
`sdrkit` console script exposes the full lifecycle.
"""

from .corruptions import CorruptionSpec, bandwidth_reduce, corrupt_pair, mix_at_snr, sample_spec
from .errors import (
    ConfigError,
    DegenerateInputError,
    FormatError,
    InfeasibleRoomError,
    NumericError,
    ParameterError,
    SdrkitError,
    ShapeError,
    StateError,
    UnsupportedFormatError,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .cli import RunConfig, main
from .metrics import MetricReport, evaluate_manifest, lsd, si_sdr
from .room import RoomSpec, measure_t60, sample_room, simulate_rir
from .sampler import SamplerConfig, corrector_step, predictor_step, restore, sample
from .scorenet import (
    AnalyticPointMassScore,
    NetworkScore,
    ScoreNetConfig,
    init_params,
    scorenet_forward,
)
from .sde import SdeConfig, kernel_mean, kernel_score, kernel_std, sample_prior
from .signal_io import Waveform, read_wav, write_wav
from .spectral import ComplexSpectrogram, StftConfig, analyze, synthesize
from .training import TrainConfig, dsm_loss, mse_loss, train

__version__ = "0.1.0"

__all__ = [
    "AnalyticPointMassScore",
    "ComplexSpectrogram",
    "ConfigError",
    "CorruptionSpec",
    "DegenerateInputError",
    "FormatError",
    "InfeasibleRoomError",
    "MetricReport",
    "NetworkScore",
    "NumericError",
    "ParameterError",
    "RoomSpec",
    "RunConfig",
    "SamplerConfig",
    "ScoreNetConfig",
    "SdeConfig",
    "SdrkitError",
    "ShapeError",
    "StateError",
    "StftConfig",
    "TrainConfig",
    "UnsupportedFormatError",
    "Waveform",
    "analyze",
    "bandwidth_reduce",
    "corrector_step",
    "corrupt_pair",
    "dsm_loss",
    "evaluate_manifest",
    "init_params",
    "kernel_mean",
    "kernel_score",
    "kernel_std",
    "load_checkpoint",
    "lsd",
    "main",
    "measure_t60",
    "mix_at_snr",
    "mse_loss",
    "predictor_step",
    "read_wav",
    "restore",
    "sample",
    "sample_prior",
    "sample_room",
    "sample_spec",
    "save_checkpoint",
    "scorenet_forward",
    "si_sdr",
    "simulate_rir",
    "synthesize",
    "train",
    "write_wav",
]
