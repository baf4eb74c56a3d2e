"""Score estimators: a toy noise-conditional conv U-Net and its
discriminative twin, plus the analytic kernel score used for validation.

The network is a plain numpy implementation with a hand-written backward
pass.  Layout is channels-last (batch, freq, time, channel); a 3x3
convolution is computed as nine shifted matrix products, which keeps both
directions of the pass inside BLAS.

Generative mode takes 4 input channels (Re/Im of the state, Re/Im of the
conditioner), adds a per-channel projection of a sinusoidal embedding of
ln sigma(t) after every stage, and scales the output by 1/sigma(t) so the
weights learn an O(1) target.  Discriminative mode is the identical
network minus the embedding path: 2 input channels (Re/Im of the corrupted
spectrogram), time ignored, output interpreted as the clean estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, StateError
from .sde import SdeConfig, kernel_score, kernel_std

# ln sigma only spans ~3 nats at the default schedule; the top frequency is
# chosen so the fastest component still completes just a few periods over
# that range instead of degenerating into noise
EMBED_FREQ_MIN = 1.0
EMBED_FREQ_MAX = 20.0


@dataclass(frozen=True)
class ScoreNetConfig:
    levels: int = 3
    channels: tuple = (16, 32, 64)
    embed_dim: int = 64
    mode: str = "generative"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.levels < 1:
            raise ValueError("levels must be at least 1")
        if len(self.channels) != self.levels:
            raise ValueError("channels list length must equal levels")
        if self.mode not in ("generative", "discriminative"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "generative" and self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")

    @property
    def in_channels(self) -> int:
        return 4 if self.mode == "generative" else 2

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "channels": list(self.channels),
            "embed_dim": self.embed_dim,
            "mode": self.mode,
        }

    @staticmethod
    def from_dict(d: dict) -> "ScoreNetConfig":
        return ScoreNetConfig(
            levels=d["levels"],
            channels=tuple(d["channels"]),
            embed_dim=d["embed_dim"],
            mode=d["mode"],
        )


@dataclass
class ScoreNetParams:
    """Named tensors in a fixed order (the checkpoint serialization order)."""

    tensors: dict

    def names(self):
        return list(self.tensors.keys())

    def copy(self) -> "ScoreNetParams":
        return ScoreNetParams({k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name):
        return self.tensors[name]


def parameter_names(cfg: ScoreNetConfig):
    """Canonical tensor order: encoder stages, decoder stages, head."""
    names = []
    for i in range(cfg.levels):
        names += [f"enc{i}.w", f"enc{i}.b"]
        if cfg.mode == "generative":
            names.append(f"enc{i}.p")
    for i in reversed(range(cfg.levels)):
        names += [f"dec{i}.w", f"dec{i}.b"]
        if cfg.mode == "generative":
            names.append(f"dec{i}.p")
    names += ["out.w", "out.b"]
    return names


def _stage_io_channels(cfg: ScoreNetConfig):
    """(in, out) channels for every encoder and decoder stage."""
    enc, dec = [], []
    for i in range(cfg.levels):
        enc.append((cfg.in_channels if i == 0 else cfg.channels[i - 1],
                    cfg.channels[i]))
    for i in reversed(range(cfg.levels)):
        cin = cfg.channels[i] if i == cfg.levels - 1 else cfg.channels[i + 1]
        dec.append((cin, cfg.channels[i]))
    return enc, dec


def init_params(cfg: ScoreNetConfig, rng: np.random.Generator) -> ScoreNetParams:
    """He fan-in init for convs, zero biases, zero final layer.

    The zero head makes the untrained network output exactly zero, so the
    starting training loss equals the known pure-noise level.
    """
    enc, dec = _stage_io_channels(cfg)
    emb_width = 2 * cfg.embed_dim
    tensors = {}

    def conv(ci, co):
        return rng.standard_normal((3, 3, ci, co)) * np.sqrt(2.0 / (9 * ci))

    for i, (ci, co) in enumerate(enc):
        tensors[f"enc{i}.w"] = conv(ci, co)
        tensors[f"enc{i}.b"] = np.zeros(co)
        if cfg.mode == "generative":
            tensors[f"enc{i}.p"] = rng.standard_normal((emb_width, co)) / np.sqrt(
                emb_width
            )
    for k, (ci, co) in enumerate(dec):
        i = cfg.levels - 1 - k
        tensors[f"dec{i}.w"] = conv(ci, co)
        tensors[f"dec{i}.b"] = np.zeros(co)
        if cfg.mode == "generative":
            tensors[f"dec{i}.p"] = rng.standard_normal((emb_width, co)) / np.sqrt(
                emb_width
            )
    tensors["out.w"] = np.zeros((cfg.channels[0], 2))
    tensors["out.b"] = np.zeros(2)
    assert list(tensors.keys()) == parameter_names(cfg)
    return ScoreNetParams(tensors)


def noise_embedding(sigma, embed_dim: int) -> np.ndarray:
    """[sin(w_k u), cos(w_k u)] with u = ln sigma, w_k geometric."""
    u = np.log(np.atleast_1d(np.asarray(sigma, dtype=np.float64)))
    freqs = np.exp(
        np.linspace(np.log(EMBED_FREQ_MIN), np.log(EMBED_FREQ_MAX), embed_dim)
    )
    arg = u[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _conv3x3(x, w):
    b, h, t, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((b, h, t, w.shape[3]), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            out += xp[:, di : di + h, dj : dj + t, :] @ w[di, dj]
    return out


def _conv3x3_backward(x, w, gout):
    b, h, t, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for di in range(3):
        for dj in range(3):
            patch = xp[:, di : di + h, dj : dj + t, :]
            gw[di, dj] = np.tensordot(patch, gout, axes=([0, 1, 2], [0, 1, 2]))
            gxp[:, di : di + h, dj : dj + t, :] += gout @ w[di, dj].T
    return gxp[:, 1 : 1 + h, 1 : 1 + t, :], gw


def _upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample2_backward(g):
    b, h, t, c = g.shape
    return g.reshape(b, h // 2, 2, t // 2, 2, c).sum(axis=(2, 4))


@dataclass
class ForwardTape:
    """Everything the backward pass needs; single use."""

    cfg: ScoreNetConfig
    sigma: np.ndarray | None
    emb: np.ndarray | None
    stages: list
    head_in: np.ndarray
    orig_shape: tuple
    pad_shape: tuple
    consumed: bool = False


def _prepare_input(cfg: ScoreNetConfig, x_t, y):
    x_t = np.asarray(x_t)
    y = np.asarray(y)
    if x_t.shape != y.shape:
        raise ShapeError(f"state {x_t.shape} vs conditioner {y.shape}")
    squeeze = x_t.ndim == 2
    if squeeze:
        x_t, y = x_t[None], y[None]
    if x_t.ndim != 3:
        raise ShapeError("expected (F, T) or (batch, F, T) spectrograms")
    if cfg.mode == "generative":
        ch = np.stack([x_t.real, x_t.imag, y.real, y.imag], axis=-1)
    else:
        ch = np.stack([y.real, y.imag], axis=-1)
    return ch.astype(np.float64), squeeze


def scorenet_forward(
    params: ScoreNetParams, cfg: ScoreNetConfig, x_t, y, t,
    sde: SdeConfig = SdeConfig(),
) -> tuple:
    """Run the network; returns (complex output, tape for backward).

    Spectrogram heights/widths that are not multiples of 2^levels are
    zero-padded on the bottom/right and the output cropped back.
    """
    ch, squeeze = _prepare_input(cfg, x_t, y)
    bsz, f_orig, t_orig, _ = ch.shape
    block = 2**cfg.levels
    f_pad = -f_orig % block
    t_pad = -t_orig % block
    if f_pad or t_pad:
        ch = np.pad(ch, ((0, 0), (0, f_pad), (0, t_pad), (0, 0)))

    sigma = emb = None
    if cfg.mode == "generative":
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (bsz,)).copy()
        if np.any(t_arr < sde.t_eps - 1e-12) or np.any(t_arr > sde.t_max + 1e-12):
            raise NumericError(
                f"t outside [{sde.t_eps}, {sde.t_max}] in generative mode"
            )
        sigma = np.array([kernel_std(tv, sde) for tv in t_arr])
        emb = noise_embedding(sigma, cfg.embed_dim)

    stages = []
    h = ch
    for i in range(cfg.levels):
        conv_in = h
        pre = _conv3x3(conv_in, params[f"enc{i}.w"]) + params[f"enc{i}.b"]
        if cfg.mode == "generative":
            pre = pre + (emb @ params[f"enc{i}.p"])[:, None, None, :]
        act = np.maximum(pre, 0.0)
        stages.append(("enc", i, conv_in, pre > 0, act))
        h = act[:, ::2, ::2, :]

    for i in reversed(range(cfg.levels)):
        up = _upsample2(h)
        skip = stages[i][4]  # encoder activation at this resolution
        pre = _conv3x3(up, params[f"dec{i}.w"]) + params[f"dec{i}.b"]
        if cfg.mode == "generative":
            pre = pre + (emb @ params[f"dec{i}.p"])[:, None, None, :]
        pre = pre + skip
        stages.append(("dec", i, up, pre > 0, None))
        h = np.maximum(pre, 0.0)

    head_in = h
    out2 = head_in @ params["out.w"] + params["out.b"]
    out2 = out2[:, :f_orig, :t_orig, :]
    out = out2[..., 0] + 1j * out2[..., 1]
    if cfg.mode == "generative":
        out = out / sigma[:, None, None]
    if squeeze:
        out = out[0]
    tape = ForwardTape(
        cfg=cfg,
        sigma=sigma,
        emb=emb,
        stages=stages,
        head_in=head_in,
        orig_shape=(bsz, f_orig, t_orig),
        pad_shape=head_in.shape[1:3],
    )
    return out, tape


def scorenet_backward(params: ScoreNetParams, tape: ForwardTape, output_grad):
    """Parameter gradients for d loss / d output = output_grad.

    output_grad is complex, interpreted as dL/dRe(out) + i dL/dIm(out).
    Returns {name: gradient} over all tensors.  A tape can be used once.
    """
    if tape.consumed:
        raise StateError("backward tape already consumed")
    tape.consumed = True
    cfg = tape.cfg
    bsz, f_orig, t_orig = tape.orig_shape
    gout = np.asarray(output_grad)
    if gout.ndim == 2:
        gout = gout[None]
    if gout.shape != (bsz, f_orig, t_orig):
        raise ShapeError(f"output_grad shape {gout.shape} does not match tape")
    if cfg.mode == "generative":
        gout = gout / tape.sigma[:, None, None]

    fp, tp = tape.pad_shape
    g2 = np.zeros((bsz, fp, tp, 2))
    g2[:, :f_orig, :t_orig, 0] = gout.real
    g2[:, :f_orig, :t_orig, 1] = gout.imag

    grads = {}
    grads["out.w"] = np.tensordot(tape.head_in, g2, axes=([0, 1, 2], [0, 1, 2]))
    grads["out.b"] = g2.sum(axis=(0, 1, 2))
    g = g2 @ params["out.w"].T

    gskip = {}
    for kind, i, conv_in, mask, act in reversed(tape.stages):
        if kind == "dec":
            g = g * mask
            gskip[i] = g  # flows into the encoder activation too
            if cfg.mode == "generative":
                per_ch = g.sum(axis=(1, 2))
                grads[f"dec{i}.p"] = tape.emb.T @ per_ch
            grads[f"dec{i}.b"] = g.sum(axis=(0, 1, 2))
            gup, gw = _conv3x3_backward(conv_in, params[f"dec{i}.w"], g)
            grads[f"dec{i}.w"] = gw
            g = _upsample2_backward(gup)
        else:
            # gradient reaching the downsampled activation sits at even
            # positions; the skip branch contributes at full resolution
            gact = np.zeros_like(conv_in, shape=mask.shape)
            gact[:, ::2, ::2, :] = g
            gact = gact + gskip.pop(i)
            g = gact * mask
            if cfg.mode == "generative":
                per_ch = g.sum(axis=(1, 2))
                grads[f"enc{i}.p"] = tape.emb.T @ per_ch
            grads[f"enc{i}.b"] = g.sum(axis=(0, 1, 2))
            g, gw = _conv3x3_backward(conv_in, params[f"enc{i}.w"], g)
            grads[f"enc{i}.w"] = gw
    return grads


class AnalyticPointMassScore:
    """Exact kernel score for a known clean spectrogram; validation only."""

    def __init__(self, x0, sde: SdeConfig = SdeConfig()):
        self.x0 = np.asarray(x0)
        self.sde = sde

    def evaluate(self, x_t, y, t):
        return kernel_score(x_t, self.x0, y, t, self.sde)


class NetworkScore:
    """score_interface adapter around (params, cfg)."""

    def __init__(
        self,
        params: ScoreNetParams,
        cfg: ScoreNetConfig,
        sde: SdeConfig = SdeConfig(),
    ):
        self.params = params
        self.cfg = cfg
        self.sde = sde

    def evaluate(self, x_t, y, t):
        out, _ = scorenet_forward(self.params, self.cfg, x_t, y, t, self.sde)
        return out
