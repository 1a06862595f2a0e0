"""Linear stand-in for the encoder/decoder pair between image and latent space.

The decoder is multiplication by a seeded orthogonal matrix; the encoder is
its transpose plus additive Gaussian reconstruction noise.  The noise models
the round-trip degradation that makes inversion-based detection imperfect,
while the linear map keeps attack gradients exact.  A second instance with a
different seed serves as an attacker's mismatched proxy encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg

__all__ = [
    "LatentCodec",
    "make_codec",
    "decode",
    "encode",
    "encode_clean",
    "decode_batch",
    "encode_batch",
]


@dataclass(frozen=True)
class LatentCodec:
    """Orthogonal mixing matrix plus reconstruction-noise level."""

    mixing: np.ndarray  # (d, d), orthogonal
    noise_std: float = 0.01

    def __post_init__(self):
        m = np.asarray(self.mixing, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("mixing must be a square matrix")
        gram_err = np.max(np.abs(m.T @ m - np.eye(m.shape[0])))
        if gram_err >= 1e-10:
            raise ValueError(f"mixing must be orthogonal (max |A^T A - I| = {gram_err:.2e})")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be nonnegative")
        object.__setattr__(self, "mixing", m)

    @property
    def dim(self) -> int:
        return int(self.mixing.shape[0])


def make_codec(dim: int, seed: int, noise_std: float = 0.01) -> LatentCodec:
    """Seeded random orthogonal codec (QR with a fixed sign convention)."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    return LatentCodec(mixing=q, noise_std=noise_std)


def decode(codec: LatentCodec, z):
    """Map a clean latent to image space: x = A z."""
    return tg.matvec(codec.mixing, z)


def encode_clean(codec: LatentCodec, x):
    """Noiseless inverse of :func:`decode`: z = A^T x.

    This is the encoder the gradient attacks differentiate through.
    """
    return tg.matvec(codec.mixing.T, x)


def encode(codec: LatentCodec, x, rng: np.random.Generator):
    """Encode with reconstruction noise drawn from the supplied stream.

    The noise draw is taken from ``rng`` even when ``noise_std`` is 0, so a
    shared stream advances identically regardless of the noise level.
    """
    x = np.asarray(x, dtype=np.float64)
    noise = rng.standard_normal(x.shape[-1]) * codec.noise_std
    return codec.mixing.T @ x + noise


def decode_batch(codec: LatentCodec, Z: np.ndarray):
    """Row-wise :func:`decode`."""
    return np.asarray(Z, dtype=np.float64) @ codec.mixing.T


def encode_batch(codec: LatentCodec, X: np.ndarray, rng: np.random.Generator):
    """Row-wise :func:`encode` with an independent noise draw per row."""
    X = np.asarray(X, dtype=np.float64)
    noise = rng.standard_normal(X.shape) * codec.noise_std
    return X @ codec.mixing + noise
