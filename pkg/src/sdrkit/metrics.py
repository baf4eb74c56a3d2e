"""Instrumental evaluation: scale-invariant SDR, log-spectral distance.

Both metrics compare a degraded or restored waveform against a clean
reference.  SI-SDR follows the usual projection definition and is capped at
100 dB for (numerically) perfect estimates so aggregates stay finite.  LSD is
computed on this package's own analysis grid; published numbers use varying,
mostly unstated settings, so absolute values are not comparable across
papers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .signal_io import Waveform, read_wav
from .spectral import StftConfig, stft
from .training import load_manifest

SI_SDR_CAP_DB = 100.0
POWER_FLOOR = 1e-8
METRIC_COLUMNS = ("id", "task", "si_sdr_db", "lsd", "input_si_sdr_db", "input_lsd")


def _samples(w) -> np.ndarray:
    return np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=float)


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB of estimate against reference.

    The estimate is projected onto the reference (target = alpha ref with
    alpha = <est, ref>/||ref||^2) and the ratio of target power to residual
    power is reported.  Residuals below 1e-12 of the target power return the
    100 dB cap.
    """
    ref = _samples(reference)
    est = _samples(estimate)
    if ref.shape != est.shape or ref.ndim != 1:
        raise ShapeError(f"reference {ref.shape} vs estimate {est.shape}")
    if ref.size == 0:
        raise ShapeError("empty signals")
    ref_pow = float(np.dot(ref, ref))
    if ref_pow == 0.0:
        raise DegenerateInputError("silent reference")
    alpha = float(np.dot(est, ref)) / ref_pow
    target = alpha * ref
    err = est - target
    target_pow = float(np.dot(target, target))
    err_pow = float(np.dot(err, err))
    if err_pow < 1e-12 * target_pow:
        return SI_SDR_CAP_DB
    if target_pow == 0.0:
        return float("-inf")
    return float(10.0 * np.log10(target_pow / err_pow))


def lsd(reference: Waveform, estimate: Waveform,
        cfg: StftConfig = StftConfig()) -> float:
    """Log-spectral distance between the two signals' power spectrograms.

    Powers are floored at 1e-8 before the log; the RMS log10 gap is taken
    over frequency bins first, then averaged over frames.
    """
    ref = _samples(reference)
    est = _samples(estimate)
    if ref.shape != est.shape or ref.ndim != 1:
        raise ShapeError(f"reference {ref.shape} vs estimate {est.shape}")
    if not np.any(ref) or not np.any(est):
        raise DegenerateInputError("silent input to lsd")
    rate = reference.sample_rate_hz if isinstance(reference, Waveform) else 1
    p_ref = np.maximum(np.abs(stft(Waveform(ref, rate), cfg).bins) ** 2,
                       POWER_FLOOR)
    p_est = np.maximum(np.abs(stft(Waveform(est, rate), cfg).bins) ** 2,
                       POWER_FLOOR)
    gap = np.log10(p_ref) - np.log10(p_est)
    per_frame = np.sqrt(np.mean(gap**2, axis=0))
    return float(np.mean(per_frame))


@dataclass(frozen=True)
class MetricRow:
    id: str
    task: str
    si_sdr_db: float
    lsd: float
    input_si_sdr_db: float
    input_lsd: float


@dataclass(frozen=True)
class MetricReport:
    """Per-utterance rows plus mean/std aggregates (population std)."""

    rows: tuple
    skipped: tuple
    mean_si_sdr_db: float
    std_si_sdr_db: float
    mean_lsd: float
    std_lsd: float
    mean_input_si_sdr_db: float
    std_input_si_sdr_db: float
    mean_input_lsd: float
    std_input_lsd: float

    @staticmethod
    def from_rows(rows, skipped=()) -> "MetricReport":
        def agg(field):
            vals = [getattr(r, field) for r in rows]
            if not vals:
                return float("nan"), float("nan")
            return float(np.mean(vals)), float(np.std(vals))

        stats = {}
        for field in ("si_sdr_db", "lsd", "input_si_sdr_db", "input_lsd"):
            stats[f"mean_{field}"], stats[f"std_{field}"] = agg(field)
        return MetricReport(rows=tuple(rows), skipped=tuple(skipped), **stats)


def write_metric_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(METRIC_COLUMNS) + "\n")
        for r in rows:
            f.write(",".join([
                r.id, r.task, str(r.si_sdr_db), str(r.lsd),
                str(r.input_si_sdr_db), str(r.input_lsd),
            ]) + "\n")


def evaluate_manifest(manifest_path, restored_dir,
                      stft_cfg: StftConfig = StftConfig(),
                      csv_path=None, log=None) -> MetricReport:
    """Score every manifest row against its restored file.

    Restored files are looked up in restored_dir under the corrupted file's
    basename.  Rows with missing files are skipped with a warning; each row
    also carries the unprocessed corrupted baseline for comparison.
    """
    entries = load_manifest(manifest_path)
    restored_dir = Path(restored_dir)
    rows = []
    skipped = []
    for entry in entries:
        clean_path = Path(entry["clean"])
        corrupted_path = Path(entry["corrupted"])
        restored_path = restored_dir / corrupted_path.name
        missing = [str(p) for p in (clean_path, corrupted_path, restored_path)
                   if not p.exists()]
        if missing:
            skipped.append(corrupted_path.stem)
            if log is not None:
                log(f"skipping {corrupted_path.stem}: "
                    f"missing {', '.join(missing)}")
            continue
        clean = read_wav(clean_path)
        corrupted = read_wav(corrupted_path)
        restored = read_wav(restored_path)
        rows.append(MetricRow(
            id=corrupted_path.stem,
            task=str(entry.get("task", "")),
            si_sdr_db=si_sdr(clean, restored),
            lsd=lsd(clean, restored, stft_cfg),
            input_si_sdr_db=si_sdr(clean, corrupted),
            input_lsd=lsd(clean, corrupted, stft_cfg),
        ))
    report = MetricReport.from_rows(rows, skipped)
    if csv_path is not None:
        write_metric_csv(csv_path, report.rows)
    return report
