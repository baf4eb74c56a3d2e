"""Command-line drivers for the experiment lifecycle.

Subcommands mirror how an experiment unfolds: generate a corrupted dataset
from clean recordings, train a network on the resulting manifest, enhance
recordings with the checkpoint, evaluate restored files against their clean
references.  sde-sim is a standalone diagnostic that integrates the forward
process and checks it against the closed-form perturbation kernel.

Every command is deterministic under --seed; SDE_RESTORE_SEED serves as a
fallback seed for enhance.  Each command dumps its effective merged config
as JSON next to its outputs so a run can be reproduced from the artifacts
alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .corruptions import TASKS, CorruptionSpec, corrupt_pair, mix_at_snr, sample_spec
from .errors import ConfigError, InfeasibleRoomError, SdrkitError
from .metrics import evaluate_manifest
from .sampler import SamplerConfig, restore
from .scorenet import ScoreNetConfig
from .sde import SdeConfig, kernel_std, simulate_forward
from .signal_io import Waveform, read_wav, write_wav
from .spectral import StftConfig
from .training import TrainConfig, train

SIM_COLUMNS = ("t", "mu_weight", "sigma", "emp_mean", "emp_std")


# ------------------------------------------------------------- run config


@dataclass(frozen=True)
class RunConfig:
    """Merged view of every module's knobs plus run-level seed and paths.

    paths is free-form string metadata (input/output locations, counts)
    recorded for provenance; the numeric sections feed the modules directly.
    """

    stft: StftConfig = StftConfig()
    sde: SdeConfig = SdeConfig()
    net: ScoreNetConfig = ScoreNetConfig()
    train: TrainConfig = TrainConfig()
    sampler: SamplerConfig = SamplerConfig()
    seed: int = 0
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stft": asdict(self.stft),
            "sde": self.sde.to_dict(),
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
            "sampler": asdict(self.sampler),
            "seed": self.seed,
            "paths": dict(self.paths),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        sections = {
            "stft": StftConfig,
            "sde": SdeConfig,
            "net": ScoreNetConfig,
            "train": TrainConfig,
            "sampler": SamplerConfig,
        }
        allowed = set(sections) | {"seed", "paths"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, cls in sections.items():
            if name not in d:
                continue
            sub = d[name]
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            valid = {f.name for f in fields(cls)}
            extra = set(sub) - valid
            if extra:
                raise ConfigError(
                    f"unknown keys in config section {name!r}: {sorted(extra)}"
                )
            try:
                kwargs[name] = cls(**sub)
            except ValueError as e:
                raise ConfigError(f"config section {name!r}: {e}") from e
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        if "paths" in d:
            if not isinstance(d["paths"], dict):
                raise ConfigError("config section 'paths' must be an object")
            kwargs["paths"] = {str(k): str(v) for k, v in d["paths"].items()}
        return RunConfig(**kwargs)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid config JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config document must be a JSON object")
        return RunConfig.from_dict(d)


def load_run_config(path) -> RunConfig:
    return RunConfig.from_json(Path(path).read_text(encoding="utf-8"))


def _base_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig()


def _dump_config(cfg: RunConfig, out_path: Path) -> None:
    out_path.write_text(cfg.to_json(), encoding="utf-8")


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _jobs(args) -> int:
    n = getattr(args, "jobs", None)
    if n is None:
        n = os.cpu_count() or 1
    return max(1, int(n))


def _run_jobs(worker, jobs, n_jobs):
    """Order-preserving map, in-process when a single job slot is asked."""
    if n_jobs == 1 or len(jobs) <= 1:
        return [worker(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as pool:
        return list(pool.map(worker, jobs))


# -------------------------------------------------------------- generate


def _mix_for_disk(s, spec, noise):
    """Noise mix whose float32-written files realize the target SNR.

    mix_at_snr is exact in float64, but rounding both files to 32-bit
    floats perturbs the on-disk SNR by up to ~2e-6 dB at the top of the
    range; two multiplicative corrections against the written
    representation bring the re-measured value back under 1e-7 dB.
    """
    rng = np.random.default_rng(np.uint64(spec.seed))
    _, n_scaled = mix_at_snr(s, noise, spec.snr_db, rng)
    s32 = np.asarray(s.samples, dtype="<f4").astype(np.float64)
    c = 1.0
    for _ in range(2):
        y32 = np.asarray(s.samples + c * n_scaled.samples,
                         dtype="<f4").astype(np.float64)
        resid = y32 - s32
        realized = 10.0 * np.log10(np.sum(s32**2) / np.sum(resid**2))
        c *= 10.0 ** ((realized - spec.snr_db) / 20.0)
    return Waveform(s.samples + c * n_scaled.samples, s.sample_rate_hz)


def _generate_one(job):
    """Corrupt one utterance; returns (row_dict, error_message|None)."""
    (clean_path, noise_path, spec_dict, out_clean, out_corrupted, row) = job
    try:
        s = read_wav(clean_path)
        spec = CorruptionSpec.from_dict(spec_dict)
        noise = read_wav(noise_path) if noise_path else None
        if spec.kind == "noise":
            target, corrupted = s, _mix_for_disk(s, spec, noise)
        else:
            target, corrupted = corrupt_pair(s, spec, noise)
        write_wav(out_clean, target)
        write_wav(out_corrupted, corrupted)
        return row, None
    except SdrkitError as e:
        return row, f"{Path(out_corrupted).name}: {e}"


def cmd_generate(args) -> int:
    base = _base_config(args)
    seed = args.seed if args.seed is not None else base.seed
    clean_dir = Path(args.clean_dir)
    out_dir = Path(args.out_dir)
    clean_files = sorted(clean_dir.glob("*.wav"))
    if not clean_files:
        return _fail(f"no WAV files in clean dir {clean_dir}")
    noise_files = []
    if args.task == "noise":
        if not args.noise_dir:
            return _fail("task=noise requires --noise-dir")
        noise_files = sorted(Path(args.noise_dir).glob("*.wav"))
        if not noise_files:
            return _fail(f"no WAV files in noise dir {args.noise_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    lengths = {}

    def wav_len(path):
        if path not in lengths:
            lengths[path] = len(read_wav(path))
        return lengths[path]

    jobs = []
    for i in range(args.count):
        clean_path = clean_files[i % len(clean_files)]
        # infeasible corruption draws (e.g. a room no absorption can damp)
        # are resampled; the recipe boxes make this a no-op in practice
        spec = None
        for _ in range(100):
            try:
                spec = sample_spec(args.task, rng)
                break
            except InfeasibleRoomError:
                continue
        if spec is None:
            return _fail("could not draw a feasible corruption in 100 tries")
        noise_path = None
        if args.task == "noise":
            candidates = [
                p for p in noise_files if wav_len(p) >= wav_len(clean_path)
            ]
            if not candidates:
                return _fail(
                    f"no noise file at least as long as {clean_path.name}"
                )
            noise_path = str(candidates[int(rng.integers(len(candidates)))])
        name = f"{args.task}_{i:04d}"
        row = {
            "clean": f"{name}_clean.wav",
            "corrupted": f"{name}.wav",
            "task": args.task,
            "spec": spec.to_dict(),
            "seed": int(spec.seed),
        }
        jobs.append((
            str(clean_path), noise_path, spec.to_dict(),
            str(out_dir / row["clean"]), str(out_dir / row["corrupted"]), row,
        ))

    results = _run_jobs(_generate_one, jobs, _jobs(args))
    rows, failures = [], []
    for row, err in results:
        if err is None:
            rows.append(row)
        else:
            failures.append(err)
            _warn(f"skipping {err}")
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    effective = replace(base, seed=seed, paths={
        "command": "generate", "task": args.task,
        "clean_dir": str(clean_dir), "noise_dir": str(args.noise_dir or ""),
        "out_dir": str(out_dir), "count": str(args.count),
    })
    _dump_config(effective, out_dir / "generate_config.json")
    print(f"wrote {len(rows)} pairs and {manifest}")
    if failures:
        _warn(f"{len(failures)} utterance(s) skipped")
        if args.strict:
            return 1
    return 0


# ----------------------------------------------------------------- train


def cmd_train(args) -> int:
    base = _base_config(args)
    manifest = Path(args.manifest)
    if not manifest.exists():
        return _fail(f"manifest not found: {manifest}")
    checkpoint = Path(args.checkpoint)
    curve = Path(args.curve) if args.curve else checkpoint.with_suffix(".curve.csv")
    train_cfg = base.train
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    net_cfg = replace(base.net, mode=args.mode)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    try:
        train(
            manifest, args.mode, checkpoint, curve,
            train_cfg=train_cfg, sde_cfg=base.sde, stft_cfg=base.stft,
            net_cfg=net_cfg, log=lambda m: print(m, file=sys.stderr),
        )
    except SdrkitError as e:
        return _fail(str(e))
    effective = replace(base, train=train_cfg, net=net_cfg, paths={
        "command": "train", "manifest": str(manifest), "mode": args.mode,
        "checkpoint": str(checkpoint), "curve": str(curve),
    })
    _dump_config(effective, checkpoint.parent / "train_config.json")
    print(f"wrote {checkpoint} and {curve}")
    return 0


# --------------------------------------------------------------- enhance


def _enhance_one(job):
    (in_path, out_path, checkpoint, sampler_dict, seed, index, trace) = job
    try:
        w = read_wav(in_path)
        rng = np.random.default_rng([seed, index])
        out = restore(w, checkpoint, SamplerConfig(**sampler_dict), rng,
                      trace_path=trace)
        write_wav(out_path, out)
        return Path(in_path).name, None
    except SdrkitError as e:
        return Path(in_path).name, str(e)


def cmd_enhance(args) -> int:
    base = _base_config(args)
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        return _fail(f"checkpoint not found: {checkpoint}")
    in_path = Path(args.input)
    if in_path.is_dir():
        inputs = sorted(in_path.glob("*.wav"))
    elif in_path.exists():
        inputs = [in_path]
    else:
        return _fail(f"input not found: {in_path}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.seed is not None:
        seed = args.seed
    elif "SDE_RESTORE_SEED" in os.environ:
        try:
            seed = int(os.environ["SDE_RESTORE_SEED"])
        except ValueError:
            return _fail("SDE_RESTORE_SEED must be an integer")
    else:
        seed = base.seed
    sampler = base.sampler
    if args.steps is not None:
        sampler = replace(sampler, n_steps=args.steps)
    if args.snr_r is not None:
        sampler = replace(sampler, snr_r=args.snr_r)
    if args.scheme is not None:
        sampler = replace(sampler, scheme=args.scheme)

    jobs = [
        (str(p), str(out_dir / p.name), str(checkpoint), asdict(sampler),
         seed, i,
         str(out_dir / (p.stem + ".trace.csv")) if args.trace else None)
        for i, p in enumerate(inputs)
    ]
    results = _run_jobs(_enhance_one, jobs, _jobs(args))
    failures = [f"{name}: {err}" for name, err in results if err is not None]
    for f in failures:
        _warn(f"skipping {f}")

    effective = replace(base, sampler=sampler, seed=seed, paths={
        "command": "enhance", "input": str(in_path),
        "checkpoint": str(checkpoint), "out_dir": str(out_dir),
    })
    _dump_config(effective, out_dir / "enhance_config.json")
    print(f"restored {len(results) - len(failures)} of {len(results)} file(s)")
    if failures:
        _warn(f"{len(failures)} file(s) skipped")
        if args.strict:
            return 1
    return 0


# -------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    manifest = Path(args.manifest)
    if not manifest.exists():
        return _fail(f"manifest not found: {manifest}")
    base = _base_config(args)
    out_csv = Path(args.out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    try:
        report = evaluate_manifest(
            manifest, args.restored_dir, stft_cfg=base.stft,
            csv_path=out_csv, log=_warn,
        )
    except SdrkitError as e:
        return _fail(str(e))

    def line(label, si_mean, si_std, lsd_mean, lsd_std):
        return (f"{label:<10} {si_mean:8.2f} ± {si_std:<6.2f}"
                f" {lsd_mean:8.3f} ± {lsd_std:<6.3f}")

    print(f"{'':<10} {'si_sdr_db':>8}          {'lsd':>8}")
    print(line("mixture", report.mean_input_si_sdr_db,
               report.std_input_si_sdr_db, report.mean_input_lsd,
               report.std_input_lsd))
    print(line("restored", report.mean_si_sdr_db, report.std_si_sdr_db,
               report.mean_lsd, report.std_lsd))
    print(f"rows: {len(report.rows)}  skipped: {len(report.skipped)}")

    effective = replace(base, paths={
        "command": "evaluate", "manifest": str(manifest),
        "restored_dir": str(args.restored_dir), "out_csv": str(out_csv),
    })
    _dump_config(effective, out_csv.parent / "evaluate_config.json")
    if report.skipped:
        _warn(f"{len(report.skipped)} row(s) skipped")
        if args.strict:
            return 1
    return 0


# --------------------------------------------------------------- sde-sim


def cmd_sde_sim(args) -> int:
    base = _base_config(args)
    seed = args.seed if args.seed is not None else base.seed
    cfg = base.sde
    if args.n_paths < 1:
        return _fail("--n-paths must be at least 1")
    if args.n_steps < 100:
        return _fail("--n-steps must be at least 100 for a usable check")
    out_csv = Path(args.out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    paths_csv = (Path(args.paths_csv) if args.paths_csv
                 else out_csv.with_suffix(".paths.csv"))

    # one tracked bin per path: start at 1+0j and relax toward y = 0, so
    # the empirical mean estimates the kernel weight e^{-gamma t} directly
    rng = np.random.default_rng(seed)
    x0 = np.ones(args.n_paths, dtype=complex)
    y = np.zeros(args.n_paths, dtype=complex)
    times, states = simulate_forward(x0, y, cfg, args.n_steps, rng)

    with open(out_csv, "w", encoding="utf-8") as f:
        f.write(",".join(SIM_COLUMNS) + "\n")
        for k, t in enumerate(times):
            xs = states[k]
            emp_mean = complex(np.mean(xs))
            emp_std = float(np.sqrt(np.mean(np.abs(xs - emp_mean) ** 2)))
            f.write(",".join(str(v) for v in (
                float(t), float(np.exp(-cfg.gamma * t)),
                kernel_std(float(t), cfg), emp_mean.real, emp_std,
            )) + "\n")

    n_tracked = min(8, args.n_paths)
    with open(paths_csv, "w", encoding="utf-8") as f:
        header = ["t"]
        for p in range(n_tracked):
            header += [f"path{p}_re", f"path{p}_im"]
        f.write(",".join(header) + "\n")
        for k, t in enumerate(times):
            row = [str(float(t))]
            for p in range(n_tracked):
                row += [str(states[k][p].real), str(states[k][p].imag)]
            f.write(",".join(row) + "\n")

    final = states[-1]
    emp_std_t = float(np.sqrt(np.mean(np.abs(final - np.mean(final)) ** 2)))
    target = kernel_std(cfg.t_max, cfg)
    rel = abs(emp_std_t - target) / target
    ok = rel <= 0.05
    print(f"kernel check at t={cfg.t_max}: empirical std {emp_std_t:.5f} vs "
          f"analytic {target:.5f} (rel err {rel:.3%}): "
          f"{'PASS' if ok else 'FAIL'}")

    effective = replace(base, seed=seed, paths={
        "command": "sde-sim", "out_csv": str(out_csv),
        "paths_csv": str(paths_csv), "n_paths": str(args.n_paths),
        "n_steps": str(args.n_steps),
    })
    _dump_config(effective, out_csv.parent / "sde_sim_config.json")
    if not ok and args.strict:
        return 1
    return 0


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdrkit",
        description="Diffusion-based signal restoration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--strict", action="store_true",
                       help="exit nonzero on any skipped row or failed check")

    p = sub.add_parser("generate", help="corrupt clean WAVs into a dataset")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--noise-dir", help="required for task=noise")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a network on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", required=True,
                   choices=("generative", "discriminative"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--curve", help="training curve CSV path")
    p.add_argument("--seed", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="restore WAVs with a checkpoint")
    p.add_argument("--input", required=True, help="WAV file or directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="fallback: SDE_RESTORE_SEED, then config seed")
    p.add_argument("--steps", type=int, default=None,
                   help="reverse-grid points (default 50)")
    p.add_argument("--snr-r", type=float, default=None)
    p.add_argument("--scheme", choices=("pc", "em"), default=None)
    p.add_argument("--trace", action="store_true",
                   help="write a per-step sampler trace CSV next to each output")
    p.add_argument("--jobs", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="score restored files vs references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--restored-dir", required=True)
    p.add_argument("--out-csv", required=True)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sde-sim", help="forward-SDE kernel consistency check")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--paths-csv", help="per-path trajectory CSV")
    p.add_argument("--n-paths", type=int, default=1000)
    p.add_argument("--n-steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_sde_sim)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SdrkitError as e:
        return _fail(str(e))
    except FileNotFoundError as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
