"""Progressive guided inversion-denoising: the three-stage noise extractor.

Stage I encodes the suspect image and precomputes its standard inversion
trajectory.  Stage II refines the clean latent through progressive cycles:
cycle ``i`` inverts ``i - s_skip`` steps (guiding each intermediate latent
away from the precomputed trajectory) and then denoises ``i`` steps, so
every cycle denoises more than it inverts and the perturbed latent is
progressively projected back toward the model's clean manifold.  Stage III
runs one standard full inversion from the refined latent.

The denoising loop always spans step indices ``i`` down to 1 even when fewer
inversion steps were taken in the cycle; that deliberate index mismatch is
the asymmetry doing the projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codec import LatentCodec, encode
from .diffusion import ScoreModel, Trajectory, denoise_step, inverse_step, invert_full
from .schedule import NoiseSchedule
from .watermarks import DetectionReport, WatermarkKey, detect

__all__ = [
    "PgidConfig",
    "PgidCounters",
    "PgidError",
    "PGID_REMOVAL",
    "PGID_FORGERY",
    "expected_stage2_counts",
    "precompute_trajectory",
    "refine_latent",
    "pgid_extract",
    "pgid_defend_removal",
    "pgid_defend_forgery",
]


class PgidError(RuntimeError):
    """Refinement produced a non-finite latent; carries the failing cycle."""

    def __init__(self, cycle: int):
        super().__init__(f"non-finite latent during refinement cycle {cycle}")
        self.cycle = cycle


@dataclass(frozen=True)
class PgidConfig:
    """Cycle depth, per-cycle inversion deficit, and guidance strength."""

    k_stop: int
    s_skip: int
    gamma: float

    def __post_init__(self):
        if self.k_stop < 0 or self.s_skip < 0:
            raise ValueError("k_stop and s_skip must be nonnegative")
        if self.s_skip > self.k_stop:
            raise ValueError("s_skip must not exceed k_stop")
        if self.gamma < 0.0:
            raise ValueError("gamma must be nonnegative")

    def validate_against(self, schedule: NoiseSchedule) -> None:
        if self.k_stop >= schedule.num_inference_steps:
            raise ValueError(
                f"k_stop={self.k_stop} must be below the inference depth "
                f"{schedule.num_inference_steps}"
            )


# Default profiles for the two defense directions.
PGID_REMOVAL = PgidConfig(k_stop=10, s_skip=1, gamma=0.045)
PGID_FORGERY = PgidConfig(k_stop=15, s_skip=3, gamma=0.001)


@dataclass
class PgidCounters:
    """Instrumented stage-II step counts."""

    inversions: int = 0
    denoisings: int = 0


def expected_stage2_counts(cfg: PgidConfig) -> tuple[int, int]:
    """Closed-form stage-II step counts: (inversions, denoisings)."""
    inversions = sum(max(i - cfg.s_skip, 0) for i in range(1, cfg.k_stop + 1))
    denoisings = cfg.k_stop * (cfg.k_stop + 1) // 2
    return inversions, denoisings


def precompute_trajectory(
    model: ScoreModel,
    codec: LatentCodec,
    x_suspect: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> Trajectory:
    """Stage I: encode the suspect image and invert it along the full grid."""
    z0 = encode(codec, np.asarray(x_suspect, dtype=np.float64), rng)
    return invert_full(model, z0, schedule)


def refine_latent(
    cfg: PgidConfig,
    model: ScoreModel,
    trajectory: Trajectory,
    schedule: NoiseSchedule,
    counters: PgidCounters | None = None,
) -> np.ndarray:
    """Stage II: progressive guided refinement of the trajectory's clean latent."""
    traj = trajectory.latents
    z = traj[0].copy()
    for i in range(1, cfg.k_stop + 1):
        for t in range(1, i - cfg.s_skip + 1):  # empty when i <= s_skip
            z = inverse_step(model, z, t - 1, schedule)
            z = z + cfg.gamma * (z - traj[t])
            if counters is not None:
                counters.inversions += 1
        for t in range(i, 0, -1):
            z = denoise_step(model, z, t, schedule)
            if counters is not None:
                counters.denoisings += 1
        if not np.all(np.isfinite(z)):
            raise PgidError(cycle=i)
    return z


def pgid_extract(
    cfg: PgidConfig,
    model: ScoreModel,
    codec: LatentCodec,
    x_suspect: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    counters: PgidCounters | None = None,
) -> np.ndarray:
    """Full three-stage extraction: returns the estimated initial noise."""
    cfg.validate_against(schedule)
    trajectory = precompute_trajectory(model, codec, x_suspect, schedule, rng)
    refined = refine_latent(cfg, model, trajectory, schedule, counters)
    return invert_full(model, refined, schedule).final


def pgid_defend_removal(
    key: WatermarkKey,
    model: ScoreModel,
    codec: LatentCodec,
    x_suspect: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    cfg: PgidConfig = PGID_REMOVAL,
) -> DetectionReport:
    """Extraction tuned to recover watermarks that a removal attack obscured."""
    return detect(key, pgid_extract(cfg, model, codec, x_suspect, schedule, rng))


def pgid_defend_forgery(
    key: WatermarkKey,
    model: ScoreModel,
    codec: LatentCodec,
    x_suspect: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    cfg: PgidConfig = PGID_FORGERY,
) -> DetectionReport:
    """Extraction tuned to strip forged signals while keeping authentic ones."""
    return detect(key, pgid_extract(cfg, model, codec, x_suspect, schedule, rng))
