"""Semantic watermark schemes over the initial latent noise.

Three schemes share one interface: key construction, watermarked-noise
sampling, and detection on an estimated initial noise.

* ``tree_ring`` plants ring-constant values in the centered 2-D Fourier
  plane of the noise; detection sums squared absolute differences between
  the observed and planted frequencies, and smaller is more watermark-like.
* ``gaussian_shading`` encrypts a bit message with a keyed XOR stream and
  uses the encrypted bits as coordinate signs over half-normal magnitudes;
  detection recovers bits by sign majority vote and thresholds the match
  count using the exact binomial tail.
* ``t2smark`` embeds encrypted bits only in keyed carrier coordinates whose
  magnitudes are sampled from the Gaussian tail beyond a truncation point;
  detection thresholds the L1 norm of the first-stage signed projections.

Detection thresholds for ``tree_ring`` and ``t2smark`` are calibrated
empirically from a null sampler; ``gaussian_shading`` uses the analytic
multi-user binomial threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import special

__all__ = [
    "DetectionReport",
    "TreeRingKey",
    "GaussianShadingKey",
    "T2SMarkKey",
    "make_tree_ring_key",
    "make_gaussian_shading_key",
    "make_t2smark_key",
    "sample_watermarked_noise",
    "detection_statistic",
    "detect",
    "gs_fpr",
    "gs_multi_fpr",
    "gs_threshold",
    "calibrate_threshold",
    "threshold_from_null_stats",
    "with_threshold",
    "keystream",
]


def keystream(seed: int, n_bits: int) -> np.ndarray:
    """Keyed pseudorandom bit stream; XOR with it is a keyed bijection."""
    return np.random.default_rng(seed).integers(0, 2, size=n_bits, dtype=np.uint8)


@dataclass(frozen=True)
class DetectionReport:
    """Scheme statistic, calibrated threshold, and the decision they imply."""

    scheme: str
    statistic: float
    threshold: float
    detected: bool
    direction: str  # "above": larger statistic is more watermark-like; "below": smaller
    bits: np.ndarray | None = None
    bit_accuracy: float | None = None
    p_value: float | None = None

    @property
    def oriented_score(self) -> float:
        """Statistic oriented so that larger always means more watermark-like."""
        return self.statistic if self.direction == "above" else -self.statistic

    def to_row(self) -> dict:
        return {
            "scheme": self.scheme,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "detected": self.detected,
            "bit_accuracy": "" if self.bit_accuracy is None else self.bit_accuracy,
            "p_value": "" if self.p_value is None else self.p_value,
        }


# ---------------------------------------------------------------------------
# tree ring


@dataclass(frozen=True)
class TreeRingKey:
    """Ring-constant complex targets inside a centered Fourier disk."""

    shape: tuple[int, int]
    radius: int
    mask: np.ndarray  # (n_mask, 2) indices into the fft-shifted plane
    targets: np.ndarray  # (n_mask,) complex
    threshold: float | None = None

    scheme: str = field(default="tree_ring", init=False)

    def __post_init__(self):
        h, w = self.shape
        mask = np.asarray(self.mask, dtype=np.int64)
        targets = np.asarray(self.targets, dtype=np.complex128)
        if mask.ndim != 2 or mask.shape[1] != 2 or mask.shape[0] != targets.size:
            raise ValueError("mask must be (n, 2) indices matching the targets")
        if np.any(mask < 0) or np.any(mask[:, 0] >= h) or np.any(mask[:, 1] >= w):
            raise ValueError("mask indices outside the Fourier plane")
        lookup = {(int(i), int(j)): targets[n] for n, (i, j) in enumerate(mask)}
        for (i, j), val in lookup.items():
            mirror = ((h - i) % h, (w - j) % w)
            if mirror not in lookup:
                raise ValueError(f"mask not conjugate-symmetric at {(i, j)}")
            if abs(lookup[mirror] - np.conj(val)) > 1e-9 * (1.0 + abs(val)):
                raise ValueError(f"targets not conjugate-symmetric at {(i, j)}")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "targets", targets)

    @property
    def dim(self) -> int:
        return int(self.shape[0] * self.shape[1])


def make_tree_ring_key(
    rng: np.random.Generator,
    shape: tuple[int, int] = (16, 16),
    radius: int = 3,
    threshold: float | None = None,
) -> TreeRingKey:
    """Draw ring targets from the spectrum of a random field.

    Points at integer ring index ``round(distance to center) <= radius`` get
    the circular average of the field's spectrum over their ring, which is
    real for full centro-symmetric rings, so the planted pattern stays
    conjugate-symmetric and the watermarked noise real.
    """
    h, w = shape
    center = (h // 2, w // 2)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ring_index = np.rint(np.hypot(ii - center[0], jj - center[1])).astype(int)

    spectrum = np.fft.fftshift(np.fft.fft2(rng.standard_normal(shape)))
    mask_points = []
    targets = []
    for r in range(radius + 1):
        sel = ring_index == r
        ring_value = complex(spectrum[sel].mean().real, 0.0)
        for i, j in zip(*np.nonzero(sel)):
            mask_points.append((int(i), int(j)))
            targets.append(ring_value)
    return TreeRingKey(
        shape=shape,
        radius=radius,
        mask=np.array(mask_points, dtype=np.int64),
        targets=np.array(targets, dtype=np.complex128),
        threshold=threshold,
    )


def _tree_ring_spectrum(key: TreeRingKey, z: np.ndarray) -> np.ndarray:
    plane = np.asarray(z, dtype=np.float64).reshape(key.shape)
    return np.fft.fftshift(np.fft.fft2(plane))


def _tree_ring_sample(key: TreeRingKey, rng: np.random.Generator) -> np.ndarray:
    spectrum = np.fft.fftshift(np.fft.fft2(rng.standard_normal(key.shape)))
    spectrum[key.mask[:, 0], key.mask[:, 1]] = key.targets
    field = np.fft.ifft2(np.fft.ifftshift(spectrum))
    return np.ascontiguousarray(field.real).ravel()


def _tree_ring_statistic(key: TreeRingKey, z_hat: np.ndarray) -> float:
    spectrum = _tree_ring_spectrum(key, z_hat)
    observed = spectrum[key.mask[:, 0], key.mask[:, 1]]
    return float(np.sum(np.abs(observed - key.targets) ** 2))


# ---------------------------------------------------------------------------
# gaussian shading


@dataclass(frozen=True)
class GaussianShadingKey:
    """Stream-cipher seed, bit message, replication factor, and user count."""

    seed: int
    message: np.ndarray  # (k_bits,) uint8
    rho: int
    dim: int
    n_users: int
    threshold: float  # bit-accuracy threshold tau = c_tau / k_bits

    scheme: str = field(default="gaussian_shading", init=False)

    def __post_init__(self):
        message = np.asarray(self.message, dtype=np.uint8)
        if message.ndim != 1 or message.size < 1 or np.any(message > 1):
            raise ValueError("message must be a 1-D bit vector")
        if self.rho < 1 or message.size * self.rho > self.dim:
            raise ValueError("need k_bits * rho <= dim")
        object.__setattr__(self, "message", message)

    @property
    def k_bits(self) -> int:
        return int(self.message.size)


def make_gaussian_shading_key(
    rng: np.random.Generator,
    dim: int = 256,
    k_bits: int = 256,
    rho: int = 1,
    n_users: int = 100_000,
    target_fpr: float = 1e-6,
) -> GaussianShadingKey:
    seed = int(rng.integers(0, 2**63 - 1))
    message = rng.integers(0, 2, size=k_bits, dtype=np.uint8)
    _, tau = gs_threshold(k_bits, n_users, target_fpr)
    return GaussianShadingKey(
        seed=seed, message=message, rho=rho, dim=dim, n_users=n_users, threshold=tau
    )


def _gs_encrypted(key: GaussianShadingKey) -> np.ndarray:
    repeated = np.repeat(key.message, key.rho)
    return repeated ^ keystream(key.seed, repeated.size)


def _gs_sample(key: GaussianShadingKey, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(key.dim)
    n_sign = key.k_bits * key.rho
    signs = _gs_encrypted(key).astype(np.float64) * 2.0 - 1.0
    z[:n_sign] = signs * np.abs(z[:n_sign])
    return z


def _gs_recover_bits(key: GaussianShadingKey, z_hat: np.ndarray) -> np.ndarray:
    n_sign = key.k_bits * key.rho
    raw = (z_hat[:n_sign] > 0).astype(np.uint8)
    votes = (raw ^ keystream(key.seed, n_sign)).reshape(key.k_bits, key.rho)
    return (2 * votes.sum(axis=1) > key.rho).astype(np.uint8)


# ---------------------------------------------------------------------------
# t2smark


@dataclass(frozen=True)
class T2SMarkKey:
    """Two-stage key: carrier/sign layout seed and message-encryption seed."""

    carrier_seed: int
    message_seed: int
    message: np.ndarray  # (k_bits,) uint8
    dim: int
    tau_tts: float = 0.674
    carriers_per_bit: int = 1
    threshold: float | None = None

    scheme: str = field(default="t2smark", init=False)

    def __post_init__(self):
        message = np.asarray(self.message, dtype=np.uint8)
        if message.ndim != 1 or message.size < 1 or np.any(message > 1):
            raise ValueError("message must be a 1-D bit vector")
        if message.size * self.carriers_per_bit > self.dim:
            raise ValueError("carrier sets exceed the latent dimension")
        if not self.tau_tts > 0.0:
            raise ValueError("tau_tts must be positive")
        object.__setattr__(self, "message", message)

    @property
    def k_bits(self) -> int:
        return int(self.message.size)

    @cached_property
    def carriers(self) -> np.ndarray:
        """(k_bits, m) disjoint carrier coordinates, keyed by carrier_seed."""
        crng = np.random.default_rng(self.carrier_seed)
        m = self.carriers_per_bit
        return crng.permutation(self.dim)[: self.k_bits * m].reshape(self.k_bits, m)

    @cached_property
    def carrier_signs(self) -> np.ndarray:
        """(k_bits, m) first-stage sign pattern over the carriers."""
        crng = np.random.default_rng(self.carrier_seed)
        crng.permutation(self.dim)  # advance past the carrier draw
        m = self.carriers_per_bit
        return crng.integers(0, 2, size=(self.k_bits, m)).astype(np.float64) * 2.0 - 1.0


def make_t2smark_key(
    rng: np.random.Generator,
    dim: int = 256,
    k_bits: int = 64,
    carriers_per_bit: int = 1,
    tau_tts: float = 0.674,
    threshold: float | None = None,
) -> T2SMarkKey:
    return T2SMarkKey(
        carrier_seed=int(rng.integers(0, 2**63 - 1)),
        message_seed=int(rng.integers(0, 2**63 - 1)),
        message=rng.integers(0, 2, size=k_bits, dtype=np.uint8),
        dim=dim,
        tau_tts=tau_tts,
        carriers_per_bit=carriers_per_bit,
        threshold=threshold,
    )


def _t2s_sample(key: T2SMarkKey, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(key.dim)
    enc = key.message ^ keystream(key.message_seed, key.k_bits)
    bit_signs = enc.astype(np.float64) * 2.0 - 1.0
    tail_base = special.ndtr(key.tau_tts)
    u = rng.random((key.k_bits, key.carriers_per_bit))
    magnitudes = special.ndtri(tail_base + u * (1.0 - tail_base))
    z[key.carriers] = key.carrier_signs * bit_signs[:, None] * magnitudes
    return z


def _t2s_projection(key: T2SMarkKey, z_hat: np.ndarray) -> np.ndarray:
    return (key.carrier_signs * z_hat[key.carriers]).sum(axis=1)


def _t2s_statistic(key: T2SMarkKey, z_hat: np.ndarray) -> float:
    return float(np.abs(_t2s_projection(key, z_hat)).sum())


def _t2s_recover_bits(key: T2SMarkKey, z_hat: np.ndarray) -> np.ndarray:
    enc_hat = (_t2s_projection(key, z_hat) > 0).astype(np.uint8)
    return enc_hat ^ keystream(key.message_seed, key.k_bits)


# ---------------------------------------------------------------------------
# shared interface

WatermarkKey = TreeRingKey | GaussianShadingKey | T2SMarkKey


def sample_watermarked_noise(key: WatermarkKey, rng: np.random.Generator) -> np.ndarray:
    """Draw one watermarked initial noise vector for the key."""
    if isinstance(key, TreeRingKey):
        return _tree_ring_sample(key, rng)
    if isinstance(key, GaussianShadingKey):
        return _gs_sample(key, rng)
    if isinstance(key, T2SMarkKey):
        return _t2s_sample(key, rng)
    raise TypeError(f"unknown watermark key type {type(key)!r}")


def detection_statistic(key: WatermarkKey, z_hat: np.ndarray) -> float:
    """Scheme test statistic on an estimated initial noise."""
    z_hat = np.asarray(z_hat, dtype=np.float64).ravel()
    if z_hat.size != key.dim:
        raise ValueError(f"latent length {z_hat.size} does not match key dim {key.dim}")
    if isinstance(key, TreeRingKey):
        return _tree_ring_statistic(key, z_hat)
    if isinstance(key, GaussianShadingKey):
        bits = _gs_recover_bits(key, z_hat)
        return float(np.mean(bits == key.message))
    if isinstance(key, T2SMarkKey):
        return _t2s_statistic(key, z_hat)
    raise TypeError(f"unknown watermark key type {type(key)!r}")


def detect(key: WatermarkKey, z_hat: np.ndarray) -> DetectionReport:
    """Full detection report for an estimated initial noise."""
    z_hat = np.asarray(z_hat, dtype=np.float64).ravel()
    if z_hat.size != key.dim:
        raise ValueError(f"latent length {z_hat.size} does not match key dim {key.dim}")

    if isinstance(key, TreeRingKey):
        if key.threshold is None:
            raise ValueError("tree_ring key has no calibrated threshold")
        stat = _tree_ring_statistic(key, z_hat)
        return DetectionReport(
            scheme=key.scheme,
            statistic=stat,
            threshold=key.threshold,
            detected=stat < key.threshold,
            direction="below",
        )

    if isinstance(key, GaussianShadingKey):
        bits = _gs_recover_bits(key, z_hat)
        acc = float(np.mean(bits == key.message))
        return DetectionReport(
            scheme=key.scheme,
            statistic=acc,
            threshold=key.threshold,
            detected=acc > key.threshold,
            direction="above",
            bits=bits,
            bit_accuracy=acc,
        )

    if isinstance(key, T2SMarkKey):
        if key.threshold is None:
            raise ValueError("t2smark key has no calibrated threshold")
        stat = _t2s_statistic(key, z_hat)
        bits = _t2s_recover_bits(key, z_hat)
        return DetectionReport(
            scheme=key.scheme,
            statistic=stat,
            threshold=key.threshold,
            detected=stat > key.threshold,
            direction="above",
            bits=bits,
            bit_accuracy=float(np.mean(bits == key.message)),
        )

    raise TypeError(f"unknown watermark key type {type(key)!r}")


def with_threshold(key: WatermarkKey, threshold: float) -> WatermarkKey:
    """Copy of the key with its detection threshold replaced."""
    return replace(key, threshold=float(threshold))


# ---------------------------------------------------------------------------
# thresholds


def gs_fpr(c_tau: int, k_bits: int) -> float:
    """Single-test false-positive rate P(c > c_tau) for c ~ Bin(k_bits, 1/2).

    Evaluated through the regularized incomplete beta function.
    """
    if not 0 <= c_tau <= k_bits:
        raise ValueError("need 0 <= c_tau <= k_bits")
    if c_tau == k_bits:
        return 0.0
    return float(special.betainc(c_tau + 1, k_bits - c_tau, 0.5))


def gs_multi_fpr(c_tau: int, k_bits: int, n_users: int) -> float:
    """False-positive rate after testing against n_users reference messages."""
    p = gs_fpr(c_tau, k_bits)
    if p == 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    return float(-np.expm1(n_users * np.log1p(-p)))


def gs_threshold(k_bits: int, n_users: int, target_fpr: float) -> tuple[int, float]:
    """Smallest match-count threshold meeting the multi-user FPR target.

    Returns ``(c_tau, tau)`` where ``tau = c_tau / k_bits`` is the
    bit-accuracy threshold.
    """
    if not 0.0 < target_fpr < 1.0:
        raise ValueError("target_fpr must lie in (0, 1)")
    if n_users < 1:
        raise ValueError("n_users must be positive")
    for c_tau in range(k_bits + 1):
        if gs_multi_fpr(c_tau, k_bits, n_users) <= target_fpr:
            return c_tau, c_tau / k_bits
    raise ValueError("no satisfiable threshold")  # unreachable: c_tau = k_bits gives 0


def threshold_from_null_stats(
    key: WatermarkKey, stats: np.ndarray, target_fpr: float
) -> float:
    """Detection threshold from precomputed null statistics.

    ``tree_ring`` takes the empirical ``target_fpr`` quantile (detection
    fires below it); ``t2smark`` fits a Gaussian and takes the critical value
    at the upper tail.
    """
    stats = np.asarray(stats, dtype=np.float64)
    if isinstance(key, TreeRingKey):
        rank = int(stats.size * target_fpr)
        if rank < 1:
            raise ValueError(
                f"{stats.size} samples cannot resolve the {target_fpr} quantile"
            )
        return float(np.sort(stats)[rank - 1])
    if isinstance(key, T2SMarkKey):
        mean = float(np.mean(stats))
        std = float(np.std(stats, ddof=1))
        return mean + float(special.ndtri(1.0 - target_fpr)) * std
    if isinstance(key, GaussianShadingKey):
        raise ValueError("gaussian_shading uses the analytic gs_threshold, not calibration")
    raise TypeError(f"unknown watermark key type {type(key)!r}")


def calibrate_threshold(
    key: WatermarkKey,
    null_sampler: Callable[[np.random.Generator], np.ndarray],
    n_samples: int,
    target_fpr: float,
    rng: np.random.Generator,
) -> float:
    """Empirical detection threshold from a null (unwatermarked) sampler."""
    if n_samples < 100:
        raise ValueError("need at least 100 null samples")
    if isinstance(key, GaussianShadingKey):
        raise ValueError("gaussian_shading uses the analytic gs_threshold, not calibration")
    stats = np.array(
        [detection_statistic(key, null_sampler(rng)) for _ in range(n_samples)]
    )
    return threshold_from_null_stats(key, stats, target_fpr)
