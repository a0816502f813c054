"""Beyond-training-resolution generation via sliding windows.

A window plan sweeps the trained resolution across a larger canvas with a
fixed stride, clamping the final row/column window to the boundary. At every
reverse timestep the model predicts noise inside each window; overlapping
predictions are averaged by per-pixel coverage counts, and the global
reverse update is then applied once to the whole canvas. Regional class maps
assign each window the majority class of its pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .sampler import SampleStats, SkipSchedule, predict_eps, uniform_stride_steps
from .schedule import NoiseSchedule, posterior_params, x0_from_eps
from .stack import LegoStack


def _axis_offsets(target: int, window: int, stride: int) -> list[int]:
    offsets = list(range(0, target - window + 1, stride))
    if offsets[-1] != target - window:
        offsets.append(target - window)
    return offsets


@dataclass(frozen=True)
class WindowPlan:
    """Sliding-window coverage of an (H_t, W_t) canvas by w x w windows."""

    target: tuple[int, int]
    window: int
    stride: int
    windows: tuple[tuple[int, int], ...]   # (row, col) top-left offsets
    weight_map: np.ndarray                 # (H_t, W_t) integer coverage counts

    def coverage(self) -> np.ndarray:
        return self.weight_map


def window_plan(H_t: int, W_t: int, window: int, stride: int) -> WindowPlan:
    """Enumerate window offsets and accumulate the coverage weight map."""
    if window < 1 or stride < 1:
        raise ConfigError(f"window and stride must be >= 1, got window={window}, stride={stride}")
    if H_t < window or W_t < window:
        raise ConfigError(
            f"target {H_t} x {W_t} smaller than window {window}: nothing to slide over"
        )
    if stride > window and (H_t > window or W_t > window):
        raise ConfigError(
            f"stride {stride} > window {window} would leave coverage gaps on a {H_t} x {W_t} target"
        )
    rows = _axis_offsets(H_t, window, stride)
    cols = _axis_offsets(W_t, window, stride)
    windows = tuple((r, c) for r in rows for c in cols)
    weight = np.zeros((H_t, W_t), dtype=np.int64)
    for r, c in windows:
        weight[r : r + window, c : c + window] += 1
    assert (weight >= 1).all(), "window plan left uncovered pixels"
    return WindowPlan(target=(H_t, W_t), window=window, stride=stride, windows=windows, weight_map=weight)


@dataclass
class ClassMap:
    """Per-pixel class ids over a canvas, painted from region rectangles."""

    shape: tuple[int, int]
    ids: np.ndarray

    @classmethod
    def constant(cls, H: int, W: int, class_id: int) -> "ClassMap":
        return cls(shape=(H, W), ids=np.full((H, W), class_id, dtype=np.int64))

    @classmethod
    def from_regions(cls, H: int, W: int, regions: list[tuple[int, int, int, int, int]]) -> "ClassMap":
        """Paint rectangles (x0, y0, x1, y1, class) in order; later rectangles win.

        x spans columns [x0, x1), y spans rows [y0, y1). Every pixel must be
        painted by at least one rectangle.
        """
        ids = np.full((H, W), -1, dtype=np.int64)
        for x0, y0, x1, y1, cid in regions:
            if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
                raise ConfigError(f"region ({x0}, {y0}, {x1}, {y1}) outside canvas {W} x {H}")
            if cid < 0:
                raise ConfigError(f"negative class id {cid}")
            ids[y0:y1, x0:x1] = cid
        if (ids < 0).any():
            raise ConfigError("class map leaves pixels unassigned; cover the whole canvas")
        return cls(shape=(H, W), ids=ids)

    @classmethod
    def parse(cls, text: str, H: int, W: int) -> "ClassMap":
        """Parse the plain-text grid format: one `x0 y0 x1 y1 class` line per region."""
        regions = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ConfigError(f"class map line {lineno}: expected 'x0 y0 x1 y1 class', got {line!r}")
            regions.append(tuple(int(p) for p in parts))
        if not regions:
            raise ConfigError("class map defines no regions")
        return cls.from_regions(H, W, regions)

    def majority_class(self, r: int, c: int, window: int) -> int:
        patch = self.ids[r : r + window, c : c + window]
        vals, counts = np.unique(patch, return_counts=True)
        return int(vals[counts.argmax()])


def accumulate_window_eps(
    xt: torch.Tensor,
    plan: WindowPlan,
    predict_window,
) -> torch.Tensor:
    """Average per-window noise predictions into a canvas-sized field.

    ``predict_window(window_tensor, row, col) -> prediction`` is evaluated on
    every window; overlaps are averaged by the plan's coverage counts.
    """
    H_t, W_t = plan.target
    if xt.shape[-2:] != (H_t, W_t):
        raise ShapeError(f"canvas shape {tuple(xt.shape[-2:])} != plan target ({H_t}, {W_t})")
    w = plan.window
    accum = torch.zeros_like(xt)
    for r, c in plan.windows:
        win = xt[..., r : r + w, c : c + w]
        accum[..., r : r + w, c : c + w] += predict_window(win, r, c)
    weights = torch.from_numpy(plan.weight_map).to(dtype=xt.dtype, device=xt.device)
    return accum / weights


@torch.no_grad()
def panorama_sample(
    model: LegoStack,
    schedule: NoiseSchedule,
    plan: WindowPlan,
    class_map: ClassMap,
    rng: torch.Generator,
    n_steps: int = 250,
    cfg_scale: float | None = None,
    skip: SkipSchedule | None = None,
    noise_source=None,
    return_stats: bool = False,
):
    """Generate a canvas larger than the trained resolution.

    The canvas starts as standard normal noise. At each reverse step every
    window's noise prediction (conditioned on the window's majority class) is
    accumulated and count-averaged, then one global ancestral update advances
    the whole canvas; the per-step noise is drawn once for the canvas.
    ``noise_source(shape) -> tensor`` overrides the default generator draws.
    """
    H, W, C = model.config.resolution
    if plan.window != H or plan.window != W:
        raise ConfigError(f"plan window {plan.window} != trained resolution {H} x {W}")
    H_t, W_t = plan.target
    if class_map.shape != (H_t, W_t):
        raise ShapeError(f"class map shape {class_map.shape} != plan target ({H_t}, {W_t})")
    if class_map.ids.max() >= max(model.config.num_classes, 1):
        raise ConfigError(
            f"class map uses id {class_map.ids.max()} but the model has "
            f"{model.config.num_classes} classes"
        )
    window_class = {
        (r, c): torch.tensor([class_map.majority_class(r, c, plan.window)])
        for r, c in plan.windows
    }
    if noise_source is None:
        noise_source = lambda shape: torch.randn(shape, generator=rng)

    taus = uniform_stride_steps(schedule.T, n_steps)
    stats = SampleStats(steps=n_steps)
    x = noise_source((1, C, H_t, W_t))
    for i, tau in enumerate(taus):
        active = skip.active(tau) if skip is not None else None

        def predict(win, r, c):
            return predict_eps(
                model, win, tau, schedule, window_class[(r, c)], cfg_scale, active, stats
            )

        eps_bar = accumulate_window_eps(x, plan, predict)
        x0_hat = x0_from_eps(x, eps_bar, tau, schedule)
        t_prev = taus[i + 1] if i + 1 < len(taus) else 0
        mean, var = posterior_params(x0_hat, x, tau, schedule, t_prev=t_prev)
        if i + 1 < len(taus):
            x = mean + math.sqrt(var) * noise_source(mean.shape).to(mean.dtype)
        else:
            x = mean
    return (x, stats) if return_stats else x
