"""Closed-form diffusion quantities.

Conventions used throughout:

* ``alpha(t)`` is the cumulative signal fraction of the forward marginal
  q(x_t | x_0) = N(sqrt(alpha_t) x_0, (1 - alpha_t) I), a strictly
  decreasing sequence over t = 0..T with alpha(0) = 1.
* ``beta(t) = 1 - alpha(t) / alpha(t-1)`` is the per-step variance.
* All schedule arrays are computed and stored in float64; callers may
  apply the resulting scalar coefficients to float32 tensors.

Randomness is never internal: noise tensors are always caller-supplied,
so every function here is pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete-time schedule: cumulative alphas plus derived betas."""

    T: int
    alpha: np.ndarray  # shape (T+1,), float64, alpha[0] == 1
    beta: np.ndarray   # shape (T+1,), float64, beta[0] == 0

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.shape != (self.T + 1,):
            raise ShapeError(f"alpha must have shape ({self.T + 1},), got {a.shape}")
        if a[0] != 1.0:
            raise ConfigError(f"alpha(0) must be 1, got {a[0]}")
        if not (np.diff(a) < 0).all():
            raise ConfigError("alpha must be strictly decreasing")
        if not ((a > 0) & (a <= 1)).all():
            raise ConfigError("alpha values must lie in (0, 1]")

    def alpha_at(self, t: int) -> float:
        self._check_t(t, lo=0)
        return float(self.alpha[t])

    def beta_at(self, t: int) -> float:
        self._check_t(t, lo=1)
        return float(self.beta[t])

    def _check_t(self, t: int, lo: int) -> None:
        if not (lo <= t <= self.T):
            raise IndexError(f"t={t} outside [{lo}, {self.T}]")


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Schedule whose per-step betas interpolate linearly from beta_start to beta_end."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got T={T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    if T == 1:
        steps = np.array([beta_start], dtype=np.float64)
    else:
        steps = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = np.ones(T + 1, dtype=np.float64)
    alpha[1:] = np.cumprod(1.0 - steps)
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = 1.0 - alpha[1:] / alpha[:-1]
    return NoiseSchedule(T=T, alpha=alpha, beta=beta)


def snr(schedule: NoiseSchedule, t: int) -> float:
    """Signal-to-noise ratio alpha_t / (1 - alpha_t)."""
    a = schedule.alpha_at(t)
    if a >= 1.0:
        raise ZeroDivisionError(f"snr undefined at t={t}: alpha(t)=1 is a zero-noise step")
    return a / (1.0 - a)


def _gather(values: np.ndarray, t, ref: torch.Tensor) -> torch.Tensor:
    """Look up per-example schedule coefficients and reshape for broadcasting.

    ``t`` may be a python int or a 1-D integer tensor aligned with the
    leading (batch) dimension of ``ref``.
    """
    if isinstance(t, torch.Tensor):
        coeff = torch.from_numpy(values).to(ref.device)[t.long()]
        coeff = coeff.reshape(t.shape[0], *([1] * (ref.ndim - 1)))
        return coeff.to(ref.dtype)
    return torch.tensor(float(values[t]), dtype=ref.dtype, device=ref.device)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward marginal sample: sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    a = _gather(schedule.alpha, t, x0)
    return a.sqrt() * x0 + (1.0 - a).sqrt() * eps


def posterior_params(
    x0: torch.Tensor,
    xt: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    t_prev: int | None = None,
) -> tuple[torch.Tensor, float]:
    """Mean and variance of the reverse conditional q(x_{t_prev} | x_t, x_0).

    ``t_prev`` defaults to t - 1; passing an earlier step evaluates the
    posterior of the sub-chain through the cumulative alphas, which is how
    strided sampling takes larger reverse jumps.
    """
    if t_prev is None:
        t_prev = t - 1
    schedule._check_t(t, lo=1)
    if not (0 <= t_prev < t):
        raise IndexError(f"t_prev={t_prev} must lie in [0, {t})")
    a_t = schedule.alpha_at(t)
    a_p = schedule.alpha_at(t_prev)
    step = 1.0 - a_t / a_p
    coef_x0 = math.sqrt(a_p) / (1.0 - a_t) * step
    coef_xt = (1.0 - a_p) * math.sqrt(a_t) / ((1.0 - a_t) * math.sqrt(a_p))
    var = (1.0 - a_p) / (1.0 - a_t) * step
    return coef_x0 * x0 + coef_xt * xt, var


def x0_from_eps(xt: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the forward marginal: x0 = xt / sqrt(alpha_t) - sqrt(1-alpha_t)/sqrt(alpha_t) eps."""
    a = _gather(schedule.alpha, t, xt)
    if (a <= 0).any():
        raise ValueError(f"alpha(t) must be positive, got {a.min().item()} at t={t}")
    return xt / a.sqrt() - ((1.0 - a).sqrt() / a.sqrt()) * eps_hat


def eps_from_x0(xt: torch.Tensor, x0_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Inverse of :func:`x0_from_eps`: recover the noise implied by an x0 estimate."""
    a = _gather(schedule.alpha, t, xt)
    one_minus = 1.0 - a
    if (one_minus <= 0).any():
        raise ZeroDivisionError(f"eps undefined at t={t}: alpha(t)=1 is a zero-noise step")
    return (xt - a.sqrt() * x0_hat) / one_minus.sqrt()


@dataclass(frozen=True)
class LossWeights:
    """Per-(t, k) loss weight policy.

    mode 'unit' weighs every term 1.0; 'snr-delta' uses (SNR_{t-1} - SNR_t)/2;
    'custom' looks up a caller-supplied {(t, k): weight} table.
    """

    mode: str = "unit"
    values: dict = field(default_factory=dict)

    _MODES = ("unit", "snr-delta", "custom")

    def __post_init__(self):
        if self.mode not in self._MODES:
            raise ConfigError(f"weights mode must be one of {self._MODES}, got {self.mode!r}")
        for key, w in self.values.items():
            if not (math.isfinite(w) and w > 0):
                raise ConfigError(f"weight {key} must be finite and positive, got {w}")


def loss_weight(weights: LossWeights, schedule: NoiseSchedule, t: int, k: int) -> float:
    if weights.mode == "unit":
        return 1.0
    if weights.mode == "snr-delta":
        # at t=1 this surfaces snr()'s zero-noise-step error for SNR_0
        return (snr(schedule, t - 1) - snr(schedule, t)) / 2.0
    try:
        return weights.values[(t, k)]
    except KeyError:
        raise ConfigError(f"no custom loss weight for (t={t}, k={k})") from None


@dataclass(frozen=True)
class EdmParams:
    """Preconditioning, sigma-grid, and training-noise hyperparameters."""

    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2   # ln(sigma) mean for training draws
    p_std: float = 1.2     # ln(sigma) std for training draws

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ConfigError(f"sigma_data must be positive, got {self.sigma_data}")
        if self.p_std <= 0:
            raise ConfigError(f"p_std must be positive, got {self.p_std}")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError(
                f"need 0 < sigma_min < sigma_max, got sigma_min={self.sigma_min}, sigma_max={self.sigma_max}"
            )
        if self.rho <= 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")

    def sigma_grid(self, steps: int) -> np.ndarray:
        """Strictly decreasing sigma ladder warped by rho, with a trailing 0."""
        if steps < 1:
            raise ConfigError(f"steps must be >= 1, got {steps}")
        if steps == 1:
            sigmas = np.array([self.sigma_max], dtype=np.float64)
        else:
            i = np.arange(steps, dtype=np.float64)
            inv = 1.0 / self.rho
            sigmas = (
                self.sigma_max**inv + i / (steps - 1) * (self.sigma_min**inv - self.sigma_max**inv)
            ) ** self.rho
        return np.append(sigmas, 0.0)


def edm_precondition(sigma: float, params: EdmParams) -> tuple[float, float, float, float]:
    """(c_skip, c_out, c_in, c_noise) for denoiser D(x; sigma) = c_skip x + c_out F(c_in x; c_noise)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    sd = params.sigma_data
    denom = sigma * sigma + sd * sd
    c_skip = sd * sd / denom
    c_out = sigma * sd / math.sqrt(denom)
    c_in = 1.0 / math.sqrt(denom)
    if sigma == 0.0:
        raise ValueError("c_noise = ln(sigma)/4 is undefined at sigma=0; evaluate only at sigma > 0")
    c_noise = math.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def edm_loss_weight(sigma: float, params: EdmParams) -> float:
    """lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    sd = params.sigma_data
    return (sigma * sigma + sd * sd) / (sigma * sd) ** 2
