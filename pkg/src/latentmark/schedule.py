"""Diffusion variance schedule and the inference-time step grid.

The schedule owns the per-step noise fractions ``betas`` and their running
products ``alpha_bars`` on a dense training grid, plus a strictly increasing
subsequence of grid indices used at inference time.  Trajectory *positions*
0..T index the clean latent (position 0) and the T inference timesteps;
position 0 is pinned to the first grid index so that every position has a
noise level strictly below 1 and both sampler directions stay well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = ["NoiseSchedule", "linear_schedule", "subsample"]

# Stable Diffusion style defaults for the linear beta ramp.
DEFAULT_NUM_TRAIN_STEPS = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule plus the inference-time subsequence of the grid.

    Attributes
    ----------
    betas : (num_train_steps,) float64, each in (0, 1)
    alpha_bars : (num_train_steps,) float64, running product of (1 - beta)
    inference_timesteps : (T,) int64, strictly increasing grid indices,
        ending at the final grid index.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray
    inference_timesteps: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        bars = np.asarray(self.alpha_bars, dtype=np.float64)
        steps = np.asarray(self.inference_timesteps, dtype=np.int64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D vector")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if bars.shape != betas.shape:
            raise ValueError("alpha_bars must match betas in length")
        if np.any(bars <= 0.0) or np.any(bars > 1.0):
            raise ValueError("alpha_bars must lie in (0, 1]")
        if np.any(np.diff(bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if steps.ndim != 1 or steps.size < 1:
            raise ValueError("inference_timesteps must be a non-empty 1-D vector")
        if np.any(np.diff(steps) <= 0):
            raise ValueError("inference_timesteps must be strictly increasing")
        if steps[0] < 0 or steps[-1] != betas.size - 1:
            raise ValueError(
                "inference_timesteps must lie on the grid and end at its last index"
            )
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", bars)
        object.__setattr__(self, "inference_timesteps", steps)

    @property
    def num_train_steps(self) -> int:
        return int(self.betas.size)

    @property
    def num_inference_steps(self) -> int:
        return int(self.inference_timesteps.size)

    def grid_index(self, pos: int) -> int:
        """Training-grid index of trajectory position ``pos`` in 0..T.

        Position j >= 1 maps to ``inference_timesteps[j - 1]``.  Position 0
        (the clean latent) shares the first inference level, so the terminal
        sampler segment is flat: the analytic noise predictor is never
        queried at a noise level of zero, and the clean latent lives at the
        sampler's terminal noise floor.
        """
        if not 0 <= pos <= self.num_inference_steps:
            raise ValueError(
                f"position {pos} outside trajectory range 0..{self.num_inference_steps}"
            )
        if pos == 0:
            return int(self.inference_timesteps[0])
        return int(self.inference_timesteps[pos - 1])

    def alpha_bar_at(self, pos: int) -> float:
        """Cumulative alpha at trajectory position ``pos``."""
        return float(self.alpha_bars[self.grid_index(pos)])

    def to_dict(self) -> dict:
        return {
            "num_train_steps": self.num_train_steps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
            "num_inference_steps": self.num_inference_steps,
        }


def linear_schedule(
    num_train_steps: int = DEFAULT_NUM_TRAIN_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta ramp inclusive of both endpoints, full inference grid."""
    if num_train_steps < 2:
        raise ValueError("num_train_steps must be at least 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    steps = np.arange(num_train_steps, dtype=np.int64)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars, inference_timesteps=steps)


def subsample(schedule: NoiseSchedule, num_steps: int) -> NoiseSchedule:
    """Restrict inference to ``num_steps`` uniformly strided grid indices.

    The stride is ``num_train_steps // num_steps`` and the subsequence always
    ends at the final grid index, so the deterministic sampler and its
    inverse visit identical noise levels.
    """
    n = schedule.num_train_steps
    if num_steps < 1:
        raise ValueError("num_steps must be positive")
    if num_steps > n:
        raise ValueError(f"num_steps={num_steps} exceeds the grid size {n}")
    stride = n // num_steps
    last = n - 1
    steps = last - stride * np.arange(num_steps - 1, -1, -1, dtype=np.int64)
    return replace(schedule, inference_timesteps=steps)
