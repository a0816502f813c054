"""Reverse-process generation with reconfigurable brick skipping.

Two samplers share one prediction helper: a strided ancestral sampler over
the discrete chain, and a stochastic 2nd-order Heun sampler over a warped
sigma grid. Classifier-free guidance is applied in noise-prediction space
for the ancestral sampler and directly on the denoiser output for Heun (the
two are affinely equivalent). Brick subsets come from a per-timestep skip
schedule: past the break point the stack's top brick is dropped for the
remainder of the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, NumericError, ShapeError
from .schedule import EdmParams, NoiseSchedule, eps_from_x0, posterior_params, x0_from_eps
from .stack import LegoStack, StackConfig, edm_denoise, stack_forward

SKIP_MODES = ("pg", "pr", "none")


@dataclass(frozen=True)
class SkipSchedule:
    """Per-timestep active brick sets parameterized by mode and break point.

    pg drops the top brick for t <= t_break (low-noise steps); pr drops it
    for t > T - t_break (high-noise steps); t_break = 0 never skips.
    """

    mode: str
    t_break: int
    T: int
    K: int

    def __post_init__(self):
        if self.mode not in SKIP_MODES:
            raise ConfigError(f"skip mode must be one of {SKIP_MODES}, got {self.mode!r}")
        if not (0 <= self.t_break <= self.T):
            raise ConfigError(f"t_break must lie in [0, {self.T}], got {self.t_break}")

    def active(self, t: int) -> frozenset[int]:
        """1-based brick positions active at timestep t."""
        full = frozenset(range(1, self.K + 1))
        if self.mode == "none" or self.t_break == 0:
            return full
        if self.mode == "pg":
            skip_top = t <= self.t_break
        else:
            skip_top = t > self.T - self.t_break
        return full - {self.K} if skip_top else full

    def active_at_noise_fraction(self, frac: float) -> frozenset[int]:
        """Active set at a continuous noise level, 1.0 = noisiest (t = T)."""
        t = max(1, min(self.T, round(frac * self.T)))
        return self.active(t)


def skip_schedule(mode: str, t_break: int, T: int, config: StackConfig) -> SkipSchedule:
    """Build the skip schedule for a stack, checking the top brick's identity."""
    mode = mode.lower()
    if mode not in SKIP_MODES:
        raise ConfigError(f"skip mode must be one of {SKIP_MODES}, got {mode!r}")
    if mode != "none" and mode != config.mode:
        raise ConfigError(
            f"skip mode {mode!r} incompatible with stack mode {config.mode!r}: "
            "the top brick to skip is defined by the stack ordering"
        )
    return SkipSchedule(mode=mode, t_break=t_break, T=T, K=config.K)


def cfg_combine(out_cond: torch.Tensor, out_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free extrapolation uncond + scale * (cond - uncond).

    scale 1 and 0 return the conditional/unconditional branch exactly rather
    than routing through the arithmetic.
    """
    if out_cond.shape != out_uncond.shape:
        raise ShapeError(
            f"cfg shapes differ: {tuple(out_cond.shape)} vs {tuple(out_uncond.shape)}"
        )
    if scale == 1.0:
        return out_cond
    if scale == 0.0:
        return out_uncond
    return out_uncond + scale * (out_cond - out_uncond)


@dataclass
class SampleStats:
    """Network-evaluation accounting for one sampling run."""

    nfe: int = 0
    steps: int = 0


def _cfg_active(cfg_scale, class_ids, model: LegoStack) -> bool:
    return cfg_scale is not None and class_ids is not None and model.config.num_classes > 0


def predict_eps(
    model: LegoStack,
    x: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    class_ids: torch.Tensor | None,
    cfg_scale: float | None,
    active,
    stats: SampleStats | None = None,
) -> torch.Tensor:
    """Noise prediction at timestep t, CFG-combined in noise space when enabled."""
    x0_c = stack_forward(model, x, t, class_ids, active=active, schedule=schedule)
    eps_c = eps_from_x0(x, x0_c, t, schedule)
    if stats is not None:
        stats.nfe += 1
    if not _cfg_active(cfg_scale, class_ids, model):
        return eps_c
    x0_u = stack_forward(model, x, t, None, active=active, schedule=schedule)
    eps_u = eps_from_x0(x, x0_u, t, schedule)
    if stats is not None:
        stats.nfe += 1
    return cfg_combine(eps_c, eps_u, cfg_scale)


def uniform_stride_steps(T: int, n_steps: int) -> list[int]:
    """Descending timesteps with a uniform stride over 1..T, always including T."""
    if not (1 <= n_steps <= T):
        raise ConfigError(f"n_steps must lie in [1, {T}], got {n_steps}")
    stride = T // n_steps
    return [T - i * stride for i in range(n_steps)]


@torch.no_grad()
def ddpm_sample(
    model: LegoStack,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    class_ids: torch.Tensor | None = None,
    batch_size: int | None = None,
    n_steps: int = 250,
    cfg_scale: float | None = None,
    skip: SkipSchedule | None = None,
    return_stats: bool = False,
):
    """Ancestral sampling over a uniformly strided sub-chain.

    Starts from standard normal noise, predicts x0 at each selected step,
    and draws the next state from the strided reverse conditional; the
    terminal step returns the posterior mean without added noise.
    """
    H, W, C = model.config.resolution
    if class_ids is not None:
        B = class_ids.shape[0]
    elif batch_size is not None:
        B = batch_size
    else:
        raise ConfigError("pass class_ids or batch_size")
    taus = uniform_stride_steps(schedule.T, n_steps)
    stats = SampleStats(steps=n_steps)
    x = torch.randn(B, C, H, W, generator=rng)
    for i, tau in enumerate(taus):
        active = skip.active(tau) if skip is not None else None
        eps_hat = predict_eps(model, x, tau, schedule, class_ids, cfg_scale, active, stats)
        x0_hat = x0_from_eps(x, eps_hat, tau, schedule)
        t_prev = taus[i + 1] if i + 1 < len(taus) else 0
        mean, var = posterior_params(x0_hat, x, tau, schedule, t_prev=t_prev)
        if i + 1 < len(taus):
            x = mean + math.sqrt(var) * torch.randn(mean.shape, generator=rng, dtype=mean.dtype)
        else:
            x = mean
        if not torch.isfinite(x).all():
            raise NumericError("non-finite sample state", step=i, t=tau)
    return (x, stats) if return_stats else x


@dataclass(frozen=True)
class EdmSamplerParams:
    """Step count and stochasticity knobs for the Heun sampler."""

    steps: int = 75
    s_churn: float = 0.0
    s_min: float = 0.0
    s_max: float = float("inf")
    s_noise: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.s_churn < 0:
            raise ConfigError(f"s_churn must be >= 0, got {self.s_churn}")
        if not (0 <= self.s_min <= self.s_max):
            raise ConfigError(f"need 0 <= s_min <= s_max, got {self.s_min}, {self.s_max}")


def _denoise_cfg(model, x, sigma, edm, class_ids, cfg_scale, active, stats):
    d_c = edm_denoise(model, x, sigma, edm, class_ids, active=active)
    if stats is not None:
        stats.nfe += 1
    if not _cfg_active(cfg_scale, class_ids, model):
        return d_c
    d_u = edm_denoise(model, x, sigma, edm, None, active=active)
    if stats is not None:
        stats.nfe += 1
    return cfg_combine(d_c, d_u, cfg_scale)


@torch.no_grad()
def edm_heun_sample(
    model: LegoStack | None,
    edm: EdmParams,
    sp: EdmSamplerParams,
    rng: torch.Generator,
    class_ids: torch.Tensor | None = None,
    batch_size: int | None = None,
    cfg_scale: float | None = None,
    skip: SkipSchedule | None = None,
    return_stats: bool = False,
    denoiser=None,
    shape: tuple[int, int, int] | None = None,
    dtype: torch.dtype = torch.float32,
):
    """Stochastic 2nd-order Heun integration of the probability-flow ODE.

    Per step: churn noise injection when sigma lies in [s_min, s_max], an
    Euler predictor, then a trapezoidal corrector (skipped on the final step
    where the target sigma is 0). ``denoiser`` overrides the stack-backed
    denoiser, for callers that already have a D(x, sigma, class_ids); the
    model may then be omitted if ``shape`` gives (H, W, C).
    """
    if model is not None:
        H, W, C = model.config.resolution
    elif shape is not None and denoiser is not None:
        H, W, C = shape
    else:
        raise ConfigError("pass a model, or a denoiser together with shape")
    if class_ids is not None:
        B = class_ids.shape[0]
    elif batch_size is not None:
        B = batch_size
    else:
        raise ConfigError("pass class_ids or batch_size")
    sigmas = edm.sigma_grid(sp.steps)
    N = sp.steps
    stats = SampleStats(steps=N)

    def denoise(x, sigma, frac):
        if denoiser is not None:
            stats.nfe += 1
            return denoiser(x, sigma, class_ids)
        active = skip.active_at_noise_fraction(frac) if skip is not None else None
        return _denoise_cfg(model, x, sigma, edm, class_ids, cfg_scale, active, stats)

    x = torch.randn(B, C, H, W, generator=rng, dtype=dtype) * sigmas[0]
    gamma_cap = math.sqrt(2.0) - 1.0
    for i in range(N):
        sig, sig_next = float(sigmas[i]), float(sigmas[i + 1])
        frac = (N - i) / N
        gamma = min(sp.s_churn / N, gamma_cap) if (sp.s_churn > 0 and sp.s_min <= sig <= sp.s_max) else 0.0
        sig_hat = sig * (1.0 + gamma)
        if gamma > 0:
            extra = math.sqrt(sig_hat**2 - sig**2) * sp.s_noise
            x = x + extra * torch.randn(x.shape, generator=rng, dtype=x.dtype)
        d = (x - denoise(x, sig_hat, frac)) / sig_hat
        x_next = x + (sig_next - sig_hat) * d
        if sig_next > 0:
            d2 = (x_next - denoise(x_next, sig_next, (N - i - 1) / N)) / sig_next
            x_next = x + (sig_next - sig_hat) * 0.5 * (d + d2)
        x = x_next
        if not torch.isfinite(x).all():
            raise NumericError("non-finite sample state", step=i, sigma=sig)
    return (x, stats) if return_stats else x
