"""The forward diffusion process and its closed-form perturbation kernel.

An Ornstein-Uhlenbeck drift pulls the state toward the corrupted signal y
while an exponentially growing diffusion term injects complex noise:

    dx_t = gamma * (y - x_t) dt + g(t) dw_t
    g(t) = sigma_min * (sigma_max / sigma_min)^t * sqrt(2 ln(sigma_max / sigma_min))

Because drift and diffusion are affine, x_t given (x_0, y) is Gaussian with
a mean that interpolates x_0 -> y and a variance available in closed form,
which is what makes denoising score matching cheap.  All logs are natural:
that choice makes g(t)^2 exactly the inhomogeneous driver of the variance
ODE d sigma^2/dt = -2 gamma sigma^2 + g^2, and the Euler-Maruyama oracle
below checks it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError


@dataclass(frozen=True)
class SdeConfig:
    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    t_max: float = 1.0
    t_eps: float = 0.03

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not (0 < self.t_eps < self.t_max):
            raise ValueError("need 0 < t_eps < t_max")

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.sigma_max / self.sigma_min))

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "t_max": self.t_max,
            "t_eps": self.t_eps,
        }

    @staticmethod
    def from_dict(d: dict) -> "SdeConfig":
        return SdeConfig(**d)


def _check_shapes(x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def drift(x, y, cfg: SdeConfig = SdeConfig()):
    """f(x, y) = gamma * (y - x)."""
    x, y = _check_shapes(x, y)
    return cfg.gamma * (y - x)


def g(t: float, cfg: SdeConfig = SdeConfig()) -> float:
    """Diffusion coefficient at time t."""
    return float(
        cfg.sigma_min
        * (cfg.sigma_max / cfg.sigma_min) ** t
        * np.sqrt(2.0 * cfg.log_ratio)
    )


def kernel_mean(x0, y, t: float, cfg: SdeConfig = SdeConfig()):
    """mu(t) = e^{-gamma t} x_0 + (1 - e^{-gamma t}) y."""
    x0, y = _check_shapes(x0, y)
    w = np.exp(-cfg.gamma * t)
    return w * x0 + (1.0 - w) * y


def kernel_std(t: float, cfg: SdeConfig = SdeConfig()) -> float:
    """sigma(t), the closed-form standard deviation of the kernel."""
    lr = cfg.log_ratio
    ratio = cfg.sigma_max / cfg.sigma_min
    var = (
        cfg.sigma_min**2
        * (ratio ** (2.0 * t) - np.exp(-2.0 * cfg.gamma * t))
        * lr
        / (cfg.gamma + lr)
    )
    return float(np.sqrt(max(var, 0.0)))


def kernel_score(x_t, x0, y, t: float, cfg: SdeConfig = SdeConfig()):
    """Score of the perturbation kernel: -(x_t - mu) / sigma(t)^2."""
    if t < cfg.t_eps:
        raise NumericError(
            f"score evaluated at t={t} below the minimal time {cfg.t_eps}"
        )
    mu = kernel_mean(x0, y, t, cfg)
    sigma = kernel_std(t, cfg)
    return -(np.asarray(x_t) - mu) / sigma**2


def complex_normal(shape, rng: np.random.Generator) -> np.ndarray:
    """Circularly-symmetric unit complex normal: Re, Im each N(0, 1/2)."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return np.sqrt(0.5) * (re + 1j * im)


def sample_kernel(x0, y, t: float, cfg: SdeConfig, rng: np.random.Generator):
    """Draw x_t = mu + sigma(t) z from the perturbation kernel."""
    x0, y = _check_shapes(x0, y)
    if not (cfg.t_eps <= t <= cfg.t_max):
        raise NumericError(f"t={t} outside [{cfg.t_eps}, {cfg.t_max}]")
    mu = kernel_mean(x0, y, t, cfg)
    return mu + kernel_std(t, cfg) * complex_normal(np.shape(x0), rng)


def simulate_forward(
    x0,
    y,
    cfg: SdeConfig,
    n_steps: int,
    rng: np.random.Generator,
    zero_diffusion: bool = False,
):
    """Euler-Maruyama integration of the forward process from t=0 to T.

    Returns (times, states) with states[k] the state at times[k]; states[0]
    is x0 and there are n_steps+1 entries.  Used as the sampling-free
    oracle that the closed-form kernel must match.  zero_diffusion drops
    the noise term to expose the pure ODE relaxation toward y.
    """
    if n_steps < 100:
        raise ValueError("n_steps must be at least 100 for a usable oracle")
    x0, y = _check_shapes(x0, y)
    dt = cfg.t_max / n_steps
    times = np.linspace(0.0, cfg.t_max, n_steps + 1)
    x = np.array(x0, dtype=np.complex128)
    states = [x.copy()]
    for k in range(n_steps):
        t_k = times[k]
        x = x + drift(x, y, cfg) * dt
        if not zero_diffusion:
            x = x + g(t_k, cfg) * np.sqrt(dt) * complex_normal(x.shape, rng)
        states.append(x.copy())
    return times, np.array(states)


def sample_prior(y, cfg: SdeConfig, rng: np.random.Generator):
    """Terminal-time draw x_T ~ y + sigma(T) z used to start restoration."""
    y = np.asarray(y)
    if y.size and not np.isfinite(y).all():
        raise NumericError("conditioner contains non-finite values")
    return y + kernel_std(cfg.t_max, cfg) * complex_normal(y.shape, rng)
