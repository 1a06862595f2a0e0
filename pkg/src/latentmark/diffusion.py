"""Toy latent diffusion model with a closed-form noise predictor.

The data prior is an isotropic Gaussian mixture, so the minimum-MSE noise
predictor at any noise level has an exact expression through the posterior
over mixture components.  That gives a deterministic sampler step, an exact
inverse step, and full trajectory maps without any training, while keeping a
curved score so inversion error and latent-projection effects are visible.

Single-latent entry points are written against :mod:`latentmark.tensorgrad`
primitives and therefore run both on plain arrays and on taped variables.
``*_batch`` variants are plain-numpy fast paths over row-stacked latents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .schedule import NoiseSchedule

__all__ = [
    "ScoreModel",
    "Trajectory",
    "make_score_model",
    "predict_eps",
    "denoise_step",
    "inverse_step",
    "invert_final",
    "invert_full",
    "denoise_full",
    "predict_eps_batch",
    "denoise_step_batch",
    "inverse_step_batch",
    "invert_full_batch",
    "denoise_full_batch",
]


@dataclass(frozen=True)
class ScoreModel:
    """Isotropic Gaussian-mixture prior acting as the noise predictor.

    Attributes
    ----------
    means : (K, d) component means.
    weights : (K,) positive, summing to one.
    component_variance : shared isotropic variance of each component.
    """

    means: np.ndarray
    weights: np.ndarray
    component_variance: float

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 1:
            raise ValueError("means must be a (K, d) matrix with K >= 1")
        if not np.all(np.isfinite(means)):
            raise ValueError("means must be finite")
        if weights.shape != (means.shape[0],) or np.any(weights <= 0.0):
            raise ValueError("weights must be K positive reals")
        if not math.isclose(float(weights.sum()), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError("weights must sum to 1")
        if not self.component_variance > 0.0:
            raise ValueError("component_variance must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def n_components(self) -> int:
        return int(self.means.shape[0])


@dataclass(frozen=True)
class Trajectory:
    """Latents visited by a full inversion, positions 0..T."""

    latents: np.ndarray  # (T + 1, d)

    @property
    def initial(self) -> np.ndarray:
        return self.latents[0]

    @property
    def final(self) -> np.ndarray:
        return self.latents[-1]

    def __len__(self) -> int:
        return self.latents.shape[0]


def make_score_model(
    dim: int,
    n_components: int,
    means_scale: float,
    component_variance: float,
    seed: int,
) -> ScoreModel:
    """Seeded mixture with unit-norm random means scaled by ``means_scale``."""
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_components, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= means_scale
    weights = np.full(n_components, 1.0 / n_components)
    return ScoreModel(means=means, weights=weights, component_variance=component_variance)


# ---------------------------------------------------------------------------
# single-latent path (tensorgrad-generic)


def _predict_eps_at_level(model: ScoreModel, z, alpha_bar: float):
    """Noise estimate for a latent at cumulative alpha ``alpha_bar`` (< 1)."""
    a = float(alpha_bar)
    sa = math.sqrt(a)
    sigma2 = model.component_variance
    v = a * sigma2 + (1.0 - a)  # marginal per-coordinate variance given a component
    log_w = np.log(model.weights)

    logits = []
    for i in range(model.n_components):
        diff = tg.shift(z, -sa * model.means[i])
        logits.append(tg.shift(tg.scale(tg.sqnorm(diff), -0.5 / v), float(log_w[i])))
    lvec = tg.stack(logits)
    post = tg.vexp(tg.sub_scalar(lvec, tg.logsumexp(lvec)))

    mu_post = tg.matvec(model.means.T, post)
    c = sa * sigma2 / v
    mean_z0 = tg.add(tg.scale(mu_post, 1.0 - c * sa), tg.scale(z, c))
    return tg.scale(tg.sub(z, tg.scale(mean_z0, sa)), 1.0 / math.sqrt(1.0 - a))


def predict_eps(model: ScoreModel, z, t: int, schedule: NoiseSchedule):
    """Closed-form minimum-MSE noise estimate at training-grid index ``t``."""
    if not 0 <= t < schedule.num_train_steps:
        raise ValueError(f"timestep {t} outside the training grid")
    return _predict_eps_at_level(model, z, schedule.alpha_bars[t])


def _sampler_update(model: ScoreModel, z, a_cur: float, a_new: float):
    """Shared deterministic update: re-noise the clean estimate to ``a_new``."""
    eps = _predict_eps_at_level(model, z, a_cur)
    x0 = tg.scale(tg.sub(z, tg.scale(eps, math.sqrt(1.0 - a_cur))), 1.0 / math.sqrt(a_cur))
    return tg.add(tg.scale(x0, math.sqrt(a_new)), tg.scale(eps, math.sqrt(1.0 - a_new)))


def denoise_step(model: ScoreModel, z, pos: int, schedule: NoiseSchedule):
    """One deterministic sampler step from position ``pos`` down to ``pos - 1``."""
    if pos < 1:
        raise ValueError("denoise_step needs a position above the lower boundary")
    return _sampler_update(
        model, z, schedule.alpha_bar_at(pos), schedule.alpha_bar_at(pos - 1)
    )


def inverse_step(model: ScoreModel, z, pos: int, schedule: NoiseSchedule):
    """One inverse sampler step from position ``pos`` up to ``pos + 1``."""
    if pos >= schedule.num_inference_steps:
        raise ValueError("inverse_step needs a position below the upper boundary")
    if pos < 0:
        raise ValueError("position must be nonnegative")
    return _sampler_update(
        model, z, schedule.alpha_bar_at(pos), schedule.alpha_bar_at(pos + 1)
    )


def invert_final(model: ScoreModel, z0, schedule: NoiseSchedule):
    """Estimated initial noise: the last latent of the inversion chain.

    Generic over plain arrays and taped variables, so attack losses can
    differentiate through the whole chain.
    """
    z = z0
    for pos in range(schedule.num_inference_steps):
        z = inverse_step(model, z, pos, schedule)
    return z


def invert_full(model: ScoreModel, z0: np.ndarray, schedule: NoiseSchedule) -> Trajectory:
    """Full inversion trajectory from the clean latent to the initial noise."""
    z = np.asarray(z0, dtype=np.float64)
    out = np.empty((schedule.num_inference_steps + 1, z.size), dtype=np.float64)
    out[0] = z
    for pos in range(schedule.num_inference_steps):
        z = inverse_step(model, z, pos, schedule)
        out[pos + 1] = z
    return Trajectory(latents=out)


def denoise_full(model: ScoreModel, z_noise: np.ndarray, schedule: NoiseSchedule):
    """Deterministic sampling from the initial noise down to a clean latent."""
    z = np.asarray(z_noise, dtype=np.float64)
    for pos in range(schedule.num_inference_steps, 0, -1):
        z = denoise_step(model, z, pos, schedule)
    return z


# ---------------------------------------------------------------------------
# batched plain-numpy path (rows of Z are independent latents)


def predict_eps_batch(model: ScoreModel, Z: np.ndarray, t: int, schedule: NoiseSchedule):
    if not 0 <= t < schedule.num_train_steps:
        raise ValueError(f"timestep {t} outside the training grid")
    return _predict_eps_batch_at_level(model, Z, schedule.alpha_bars[t])


def _predict_eps_batch_at_level(model: ScoreModel, Z: np.ndarray, alpha_bar: float):
    a = float(alpha_bar)
    sa = math.sqrt(a)
    sigma2 = model.component_variance
    v = a * sigma2 + (1.0 - a)

    diff = Z[:, None, :] - sa * model.means[None, :, :]  # (n, K, d)
    logits = np.log(model.weights)[None, :] - 0.5 / v * np.einsum("nkd,nkd->nk", diff, diff)
    logits -= logits.max(axis=1, keepdims=True)
    post = np.exp(logits)
    post /= post.sum(axis=1, keepdims=True)

    mu_post = post @ model.means
    c = sa * sigma2 / v
    mean_z0 = (1.0 - c * sa) * mu_post + c * Z
    return (Z - sa * mean_z0) / math.sqrt(1.0 - a)


def _sampler_update_batch(model: ScoreModel, Z: np.ndarray, a_cur: float, a_new: float):
    eps = _predict_eps_batch_at_level(model, Z, a_cur)
    x0 = (Z - math.sqrt(1.0 - a_cur) * eps) / math.sqrt(a_cur)
    return math.sqrt(a_new) * x0 + math.sqrt(1.0 - a_new) * eps


def denoise_step_batch(model: ScoreModel, Z: np.ndarray, pos: int, schedule: NoiseSchedule):
    if pos < 1:
        raise ValueError("denoise_step needs a position above the lower boundary")
    return _sampler_update_batch(
        model, Z, schedule.alpha_bar_at(pos), schedule.alpha_bar_at(pos - 1)
    )


def inverse_step_batch(model: ScoreModel, Z: np.ndarray, pos: int, schedule: NoiseSchedule):
    if not 0 <= pos < schedule.num_inference_steps:
        raise ValueError("position outside the inversion range")
    return _sampler_update_batch(
        model, Z, schedule.alpha_bar_at(pos), schedule.alpha_bar_at(pos + 1)
    )


def invert_full_batch(model: ScoreModel, Z0: np.ndarray, schedule: NoiseSchedule):
    """Row-wise inversion; returns the final noise estimates, shape like Z0."""
    Z = np.asarray(Z0, dtype=np.float64)
    for pos in range(schedule.num_inference_steps):
        Z = inverse_step_batch(model, Z, pos, schedule)
    return Z


def denoise_full_batch(model: ScoreModel, Z_noise: np.ndarray, schedule: NoiseSchedule):
    """Row-wise deterministic sampling down to clean latents."""
    Z = np.asarray(Z_noise, dtype=np.float64)
    for pos in range(schedule.num_inference_steps, 0, -1):
        Z = denoise_step_batch(model, Z, pos, schedule)
    return Z
