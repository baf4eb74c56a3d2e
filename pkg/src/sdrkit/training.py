"""Score-matching and complex-MSE training loops with Adam and EMA.

Generative mode trains the score network on the denoising objective: for
each item draw t uniformly in [t_eps, T] and a complex-normal z, form
x_t = mu + sigma(t) z, and regress the network output onto -z/sigma(t).
Discriminative mode trains the same backbone to map the corrupted
spectrogram straight to the clean one under squared error.

Determinism: every random draw (split, init, crops, t, z, shuffles) comes
from generators derived from TrainConfig.seed, so two runs with the same
config produce byte-identical checkpoints.  Validation uses a generator
reseeded identically each epoch, which makes validation losses comparable
across epochs.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .errors import ConfigError, NumericError, ShapeError
from .scorenet import (
    ScoreNetConfig,
    ScoreNetParams,
    init_params,
    scorenet_backward,
    scorenet_forward,
)
from .sde import SdeConfig, complex_normal, kernel_std
from .signal_io import read_wav
from .spectral import StftConfig, analyze, normalize_pair, take_patch

CURVE_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "wall_time_s")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    micro_batch: int = 16
    ema_decay: float = 0.999
    max_epochs: int = 300
    patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1
    patch_frames: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.ema_decay < 1):
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.micro_batch < 1:
            raise ValueError("batch sizes must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if not (0 <= self.val_fraction < 1):
            raise ValueError("val_fraction must lie in [0, 1)")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0 or self.patch_frames < 1:
            raise ValueError("adam_eps and patch_frames must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


def init_optimizer(params: ScoreNetParams) -> OptimizerState:
    zeros = lambda: {n: np.zeros_like(params[n]) for n in params.names()}
    return OptimizerState(m=zeros(), v=zeros(), step=0)


def adam_step(
    params: ScoreNetParams,
    grads: dict,
    state: OptimizerState,
    cfg: TrainConfig,
):
    """Bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in params.names():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        params.tensors[name] = params.tensors[name] - cfg.lr * m_hat / (
            np.sqrt(v_hat) + cfg.adam_eps
        )
    return params, state


def ema_update(ema: ScoreNetParams, params: ScoreNetParams, decay: float):
    """ema <- decay * ema + (1 - decay) * params, in place on ema."""
    for name in params.names():
        ema.tensors[name] = decay * ema.tensors[name] + (1.0 - decay) * params[name]
    return ema


def _as_batch(x0, y):
    x0 = np.asarray(x0, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    if x0.ndim == 2:
        x0, y = x0[None], y[None]
    if x0.shape != y.shape or x0.ndim != 3:
        raise ShapeError(f"batch shapes {x0.shape} vs {y.shape}")
    return x0, y


def _accumulate(total: dict, part: dict):
    for name, g in part.items():
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g


def dsm_loss(
    params,
    net_cfg: ScoreNetConfig,
    x0,
    y,
    sde: SdeConfig = SdeConfig(),
    rng=None,
    micro_batch: int = None,
    score_fn=None,
    with_grads: bool = True,
):
    """Denoising score-matching loss over a batch; returns (loss, grads).

    Draw order per call: first t for the whole batch, then z.  score_fn
    overrides the network (signature (x_t, y, t) -> score batch) and yields
    grads=None; it exists so the loss can be checked against exact scores.
    """
    x0, y = _as_batch(x0, y)
    if score_fn is None and net_cfg.mode != "generative":
        raise ConfigError("dsm_loss needs a generative-mode network")
    if rng is None:
        rng = np.random.default_rng()
    bsz = x0.shape[0]
    t = rng.uniform(sde.t_eps, sde.t_max, size=bsz)
    z = complex_normal(x0.shape, rng)
    sigma = np.array([kernel_std(tv, sde) for tv in t])
    w = np.exp(-sde.gamma * t)[:, None, None]
    mu = w * x0 + (1.0 - w) * y
    x_t = mu + sigma[:, None, None] * z
    target = -z / sigma[:, None, None]

    if score_fn is not None:
        score = np.asarray(score_fn(x_t, y, t))
        loss = float(np.sum(np.abs(score - target) ** 2) / bsz)
        _check_loss_finite(loss, t)
        return loss, None

    chunk = micro_batch or bsz
    loss_sum = 0.0
    grads: dict = {}
    for lo in range(0, bsz, chunk):
        hi = min(lo + chunk, bsz)
        out, tape = scorenet_forward(
            params, net_cfg, x_t[lo:hi], y[lo:hi], t[lo:hi], sde
        )
        r = out - target[lo:hi]
        loss_sum += float(np.sum(np.abs(r) ** 2))
        if with_grads:
            _accumulate(grads, scorenet_backward(params, tape, (2.0 / bsz) * r))
    loss = loss_sum / bsz
    _check_loss_finite(loss, t)
    return loss, (grads if with_grads else None)


def mse_loss(
    params,
    net_cfg: ScoreNetConfig,
    x0,
    y,
    micro_batch: int = None,
    with_grads: bool = True,
):
    """Mean squared complex-spectrogram error of the direct mapping net(y)."""
    x0, y = _as_batch(x0, y)
    if net_cfg.mode != "discriminative":
        raise ConfigError("mse_loss needs a discriminative-mode network")
    bsz = x0.shape[0]
    chunk = micro_batch or bsz
    loss_sum = 0.0
    grads: dict = {}
    for lo in range(0, bsz, chunk):
        hi = min(lo + chunk, bsz)
        out, tape = scorenet_forward(params, net_cfg, y[lo:hi], y[lo:hi], 0.0)
        r = out - x0[lo:hi]
        loss_sum += float(np.sum(np.abs(r) ** 2))
        if with_grads:
            _accumulate(grads, scorenet_backward(params, tape, (2.0 / bsz) * r))
    loss = loss_sum / bsz
    _check_loss_finite(loss, None)
    return loss, (grads if with_grads else None)


def _check_loss_finite(loss: float, t):
    if np.isfinite(loss):
        return
    detail = ""
    if t is not None:
        detail = f" (t in [{np.min(t):.4f}, {np.max(t):.4f}])"
    raise NumericError(f"non-finite training loss {loss}{detail}")


def load_manifest(path) -> list:
    """JSONL manifest; each line needs at least clean and corrupted paths."""
    entries = []
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{ln}: invalid JSON ({e})") from e
            if "clean" not in entry or "corrupted" not in entry:
                raise ConfigError(f"{path}:{ln}: missing clean/corrupted keys")
            for key in ("clean", "corrupted"):
                p = Path(entry[key])
                if not p.is_absolute():
                    entry[key] = str(base / p)
            entries.append(entry)
    if not entries:
        raise ConfigError(f"manifest {path} is empty")
    return entries


def load_pairs(manifest_path, stft_cfg: StftConfig = StftConfig()):
    """Load, normalize, and analyze every manifest pair into memory.

    Returns ([(x0, y)] compressed corrupted-peak-normalized spectrograms,
    common sample rate).  Mixed sample rates are rejected.
    """
    pairs = []
    rate = None
    for entry in load_manifest(manifest_path):
        clean = read_wav(entry["clean"])
        corrupted = read_wav(entry["corrupted"])
        if rate is None:
            rate = clean.sample_rate_hz
        elif clean.sample_rate_hz != rate:
            raise ConfigError(
                f"{entry['clean']}: rate {clean.sample_rate_hz} Hz differs "
                f"from the manifest's {rate} Hz"
            )
        c, d, _ = normalize_pair(clean, corrupted)
        pairs.append((analyze(c, stft_cfg), analyze(d, stft_cfg)))
    return pairs, rate


def _crop_batch(pairs, idxs, frames: int, rng):
    xs, ys = [], []
    for i in idxs:
        x0_spec, y_spec = pairs[i]
        if x0_spec.n_frames > frames:
            offset = int(rng.integers(0, x0_spec.n_frames - frames + 1))
        else:
            offset = 0
        xs.append(take_patch(x0_spec, offset, frames).bins)
        ys.append(take_patch(y_spec, offset, frames).bins)
    return np.stack(xs), np.stack(ys)


def _batch_loss(params, net_cfg, x0b, yb, mode, sde, rng, micro, with_grads):
    if mode == "generative":
        return dsm_loss(
            params, net_cfg, x0b, yb, sde, rng,
            micro_batch=micro, with_grads=with_grads,
        )
    return mse_loss(
        params, net_cfg, x0b, yb, micro_batch=micro, with_grads=with_grads
    )


def _epoch_loss(params, net_cfg, pairs, idxs, mode, cfg, sde, rng) -> float:
    """Loss over idxs without gradients, batched, crops/draws from rng."""
    total = 0.0
    for lo in range(0, len(idxs), cfg.batch_size):
        batch = idxs[lo : lo + cfg.batch_size]
        x0b, yb = _crop_batch(pairs, batch, cfg.patch_frames, rng)
        loss, _ = _batch_loss(
            params, net_cfg, x0b, yb, mode, sde, rng, cfg.micro_batch, False
        )
        total += loss * len(batch)
    return total / len(idxs)


@dataclass
class TrainResult:
    params: ScoreNetParams
    ema_params: ScoreNetParams
    history: list
    best_epoch: int
    best_val_loss: float
    stopped_early: bool


def train_on_pairs(
    pairs: list,
    mode: str,
    train_cfg: TrainConfig = TrainConfig(),
    sde_cfg: SdeConfig = SdeConfig(),
    net_cfg: ScoreNetConfig = None,
    log=None,
) -> TrainResult:
    """Epoch loop over in-memory spectrogram pairs; keeps the best-val epoch.

    A single-pair dataset reuses that pair for validation, so toy runs still
    produce a curve.  Larger datasets get a seeded held-out split.
    """
    if mode not in ("generative", "discriminative"):
        raise ConfigError(f"unknown training mode {mode!r}")
    if net_cfg is None:
        net_cfg = ScoreNetConfig(mode=mode)
    if net_cfg.mode != mode:
        raise ConfigError(f"mode {mode!r} but network is {net_cfg.mode!r}")
    if not pairs:
        raise ConfigError("no training pairs")

    n = len(pairs)
    split_rng = np.random.default_rng([train_cfg.seed, 11])
    perm = split_rng.permutation(n)
    n_val = int(round(train_cfg.val_fraction * n))
    if n > 1:
        n_val = min(max(n_val, 1), n - 1)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
    else:
        val_idx = train_idx = perm

    params = init_params(net_cfg, np.random.default_rng([train_cfg.seed, 22]))
    ema = params.copy()
    opt = init_optimizer(params)

    history = []
    best_val = np.inf
    best_epoch = 0
    best_params = params.copy()
    best_ema = ema.copy()
    bad_epochs = 0
    stopped = False
    t_start = time.perf_counter()

    for epoch in range(1, train_cfg.max_epochs + 1):
        ep_rng = np.random.default_rng([train_cfg.seed, 33, epoch])
        order = ep_rng.permutation(train_idx)
        train_total = 0.0
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = order[lo : lo + train_cfg.batch_size]
            x0b, yb = _crop_batch(pairs, batch, train_cfg.patch_frames, ep_rng)
            try:
                loss, grads = _batch_loss(
                    params, net_cfg, x0b, yb, mode, sde_cfg, ep_rng,
                    train_cfg.micro_batch, True,
                )
            except NumericError as e:
                raise NumericError(f"epoch {epoch}: {e}") from e
            train_total += loss * len(batch)
            adam_step(params, grads, opt, train_cfg)
            ema_update(ema, params, train_cfg.ema_decay)
        train_loss = train_total / len(order)

        val_rng = np.random.default_rng([train_cfg.seed, 44])
        val_loss = _epoch_loss(
            params, net_cfg, pairs, val_idx, mode, train_cfg, sde_cfg, val_rng
        )
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "lr": train_cfg.lr,
            "wall_time_s": time.perf_counter() - t_start,
        }
        history.append(row)
        if log is not None:
            log(
                f"epoch {epoch}: train {train_loss:.6g} val {val_loss:.6g}"
            )

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = params.copy()
            best_ema = ema.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.patience:
                stopped = True
                break

    return TrainResult(
        params=best_params,
        ema_params=best_ema,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=float(best_val),
        stopped_early=stopped,
    )


def write_curve(path, history: list):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(CURVE_COLUMNS) + "\n")
        for row in history:
            f.write(",".join(str(row[c]) for c in CURVE_COLUMNS) + "\n")


def train(
    manifest_path,
    mode: str,
    checkpoint_path,
    curve_path,
    train_cfg: TrainConfig = TrainConfig(),
    sde_cfg: SdeConfig = SdeConfig(),
    stft_cfg: StftConfig = StftConfig(),
    net_cfg: ScoreNetConfig = None,
    log=None,
) -> str:
    """Full pipeline: manifest -> pairs -> loop -> curve CSV + checkpoint."""
    pairs, sample_rate_hz = load_pairs(manifest_path, stft_cfg)
    result = train_on_pairs(pairs, mode, train_cfg, sde_cfg, net_cfg, log=log)
    if net_cfg is None:
        net_cfg = ScoreNetConfig(mode=mode)
    write_curve(curve_path, result.history)
    config = {
        "mode": mode,
        "net": net_cfg.to_dict(),
        "sde": sde_cfg.to_dict(),
        "stft": asdict(stft_cfg),
        "train": train_cfg.to_dict(),
        "sample_rate_hz": sample_rate_hz,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "curve_csv": str(curve_path),
    }
    save_checkpoint(checkpoint_path, result.params, result.ema_params, config)
    return str(checkpoint_path)
