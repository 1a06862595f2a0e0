"""Adversary suite against inversion-based watermark detection.

Gradient attacks optimize a latent (or pixel) perturbation by plain gradient
descent through the attacker's proxy pipeline, differentiating the whole
inversion chain with the tape engine:

* removal drives the inverted noise of a watermarked image onto the negated
  estimate of its own initial noise,
* forgery drives the inverted noise of a cover image onto the initial-noise
  estimate extracted from a watermarked image,
* the pixel-space forgery matches proxy-encoder latents under an L2 penalty
  on the perturbation,
* the averaging attack subtracts the mean residual between watermarked and
  clean image populations.

All attacks are deterministic functions of their inputs: the attacker's
encoder is used without reconstruction noise, and the initial-noise target
is precomputed once from the unperturbed latent and held constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorgrad as tg
from .codec import LatentCodec, decode, encode_clean
from .diffusion import ScoreModel, invert_final
from .schedule import NoiseSchedule

__all__ = [
    "AttackConfig",
    "AttackDivergenceError",
    "removal_attack",
    "forgery_attack",
    "averaging_attack",
    "vae_forgery_attack",
]

KINDS = ("removal", "forgery", "averaging", "vae_forgery")


class AttackDivergenceError(RuntimeError):
    """Attack loss became non-finite; carries the failing iteration."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"attack loss became non-finite at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass(frozen=True)
class AttackConfig:
    """Attack kind, optimizer budget, and the attacker's proxy pipeline."""

    kind: str
    proxy_model: ScoreModel
    proxy_codec: LatentCodec
    schedule: NoiseSchedule
    steps: int = 50
    learning_rate: float = 0.01
    lambda_reg: float = 5e4  # pixel-space forgery only
    avg_count: int = 1  # averaging only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_reg < 0.0:
            raise ValueError("lambda_reg must be nonnegative")


def _descend(loss_fn, dim: int, steps: int, lr: float, loss_history: list | None):
    """Plain gradient descent from delta = 0; returns the final perturbation."""
    delta = np.zeros(dim, dtype=np.float64)
    for it in range(steps):
        value, tape = tg.forward_record(loss_fn, delta)
        if not np.isfinite(value):
            raise AttackDivergenceError(it, value)
        if loss_history is not None:
            loss_history.append(float(value))
        delta = delta - lr * tg.backward(tape)
    return delta


def removal_attack(cfg: AttackConfig, x_w: np.ndarray, loss_history: list | None = None):
    """Strip the watermark from ``x_w`` by anti-aligning its inverted noise."""
    if cfg.kind != "removal":
        raise ValueError(f"config kind is {cfg.kind!r}, not 'removal'")
    z0 = encode_clean(cfg.proxy_codec, np.asarray(x_w, dtype=np.float64))
    z_noise = invert_final(cfg.proxy_model, z0, cfg.schedule)

    def loss(delta):
        inverted = invert_final(cfg.proxy_model, tg.shift(delta, z0), cfg.schedule)
        return tg.sqrt(tg.sqnorm(tg.shift(inverted, z_noise)))

    delta = _descend(loss, z0.size, cfg.steps, cfg.learning_rate, loss_history)
    return decode(cfg.proxy_codec, z0 + delta)


def forgery_attack(
    cfg: AttackConfig,
    x_c: np.ndarray,
    x_w: np.ndarray,
    loss_history: list | None = None,
):
    """Imprint the watermark of ``x_w`` onto the cover image ``x_c``."""
    if cfg.kind != "forgery":
        raise ValueError(f"config kind is {cfg.kind!r}, not 'forgery'")
    z0_cover = encode_clean(cfg.proxy_codec, np.asarray(x_c, dtype=np.float64))
    z0_marked = encode_clean(cfg.proxy_codec, np.asarray(x_w, dtype=np.float64))
    z_target = invert_final(cfg.proxy_model, z0_marked, cfg.schedule)

    def loss(delta):
        inverted = invert_final(cfg.proxy_model, tg.shift(delta, z0_cover), cfg.schedule)
        return tg.sqrt(tg.sqnorm(tg.shift(inverted, -z_target)))

    delta = _descend(loss, z0_cover.size, cfg.steps, cfg.learning_rate, loss_history)
    return decode(cfg.proxy_codec, z0_cover + delta)


def averaging_attack(
    cfg: AttackConfig,
    watermarked: list[np.ndarray],
    clean: list[np.ndarray],
    target: np.ndarray,
):
    """Subtract the mean watermarked-minus-clean residual from ``target``."""
    if cfg.kind != "averaging":
        raise ValueError(f"config kind is {cfg.kind!r}, not 'averaging'")
    if len(watermarked) == 0 or len(watermarked) != len(clean):
        raise ValueError("need equally sized, nonempty image lists")
    residual = np.mean(np.asarray(watermarked, dtype=np.float64), axis=0) - np.mean(
        np.asarray(clean, dtype=np.float64), axis=0
    )
    return np.asarray(target, dtype=np.float64) - residual


def vae_forgery_attack(
    cfg: AttackConfig,
    x_c: np.ndarray,
    x_w: np.ndarray,
    loss_history: list | None = None,
):
    """Pixel-space forgery: match proxy-encoder latents under an L2 penalty."""
    if cfg.kind != "vae_forgery":
        raise ValueError(f"config kind is {cfg.kind!r}, not 'vae_forgery'")
    x_c = np.asarray(x_c, dtype=np.float64)
    z_target = encode_clean(cfg.proxy_codec, np.asarray(x_w, dtype=np.float64))

    def loss(delta):
        latent = encode_clean(cfg.proxy_codec, tg.shift(delta, x_c))
        match = tg.sqrt(tg.sqnorm(tg.shift(latent, -z_target)))
        penalty = tg.scale(tg.sqrt(tg.sqnorm(delta)), cfg.lambda_reg)
        return tg.add(match, penalty)

    delta = _descend(loss, x_c.size, cfg.steps, cfg.learning_rate, loss_history)
    return x_c + delta
