"""Random image degradations for extended training.

A four-operation stand-in for a BSRGAN-style pipeline: Gaussian blur,
down-then-up resampling, additive Gaussian noise and block quantisation.
Images are float arrays of shape (H, W, C) in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .schedule import degradation_coefficient

OPERATIONS = ("blur", "resample", "noise", "quantize")


@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)
    downscale_factors: tuple[int, ...] = (2, 4)
    noise_sigma_range: tuple[float, float] = (2.0, 20.0)  # 8-bit units
    block_size: int = 4
    quant_step_range: tuple[float, float] = (8.0, 48.0)  # 8-bit units
    per_op_probability: float = 0.5
    seed: int = 0
    operations: tuple[str, ...] = field(default=OPERATIONS)

    def __post_init__(self):
        for name in ("blur_sigma_range", "noise_sigma_range", "quant_step_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ContractError(f"{name} must be ordered and non-negative, got {(lo, hi)}")
        if not self.downscale_factors or any(int(f) < 1 for f in self.downscale_factors):
            raise ContractError("downscale_factors must be a non-empty set of positive integers")
        if self.block_size < 1:
            raise ContractError("block_size must be positive")
        if not 0.0 <= self.per_op_probability <= 1.0:
            raise ContractError("per_op_probability must lie in [0, 1]")
        unknown = set(self.operations) - set(OPERATIONS)
        if unknown:
            raise ContractError(f"unknown degradation operations: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D kernel truncated at 3 sigma and renormalised."""
    radius = int(math.floor(3.0 * sigma))
    if radius == 0:
        return np.ones(1)
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def _filter_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    if r == 0:
        return x * kernel[0]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="reflect" if x.shape[axis] > r else "edge")
    out = np.zeros_like(x, dtype=np.float64)
    n = x.shape[axis]
    for i, w in enumerate(kernel):
        out += w * np.take(xp, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel(sigma)
    return _filter_axis(_filter_axis(x, kernel, 0), kernel, 1)


def _bilinear_axis(x: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    # pixel-centre alignment
    pos = (np.arange(out_len) + 0.5) * n / out_len - 0.5
    pos = np.clip(pos, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1] * x.ndim
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def resample(x: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downscale by ``factor`` then bilinear upscale back."""
    h, w = x.shape[:2]
    if factor == 1:
        return x.copy()
    hs, ws = -(-h // factor), -(-w // factor)
    xp = np.pad(x, ((0, hs * factor - h), (0, ws * factor - w), (0, 0)), mode="edge")
    small = xp.reshape(hs, factor, ws, factor, -1).mean(axis=(1, 3))
    up = _bilinear_axis(_bilinear_axis(small, hs * factor, 0), ws * factor, 1)
    return up[:h, :w]


def block_quantize(x: np.ndarray, block: int, step: float) -> np.ndarray:
    """Keep each block's mean, quantise deviations from it to ``step``."""
    h, w = x.shape[:2]
    hs, ws = -(-h // block), -(-w // block)
    xp = np.pad(x, ((0, hs * block - h), (0, ws * block - w), (0, 0)), mode="edge")
    blocks = xp.reshape(hs, block, ws, block, -1)
    mean = blocks.mean(axis=(1, 3), keepdims=True)
    q = mean + np.round((blocks - mean) / step) * step if step > 0 else blocks
    return q.reshape(xp.shape)[:h, :w]


def _apply(op: str, x: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator) -> np.ndarray:
    if op == "blur":
        return gaussian_blur(x, rng.uniform(*cfg.blur_sigma_range))
    if op == "resample":
        factors = sorted(int(f) for f in cfg.downscale_factors)
        return resample(x, factors[rng.integers(len(factors))])
    if op == "noise":
        sigma = rng.uniform(*cfg.noise_sigma_range) * 2.0 / 255.0
        return x + sigma * rng.standard_normal(x.shape)
    if op == "quantize":
        step = rng.uniform(*cfg.quant_step_range) * 2.0 / 255.0
        return block_quantize(x, cfg.block_size, step)
    raise ContractError(f"unknown degradation {op!r}")


def degrade(x: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply a random-order random subset of the configured degradations.

    Each operation is kept with ``cfg.per_op_probability``; the survivors run
    in a freshly shuffled order. Without an explicit ``rng`` the stream is
    seeded from ``cfg.seed``. Output is clamped to [-1, 1].
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError("degrade", f"expected an (H, W, C) image, got shape {x.shape}")
    largest = max(int(f) for f in cfg.downscale_factors)
    if "resample" in cfg.operations and min(x.shape[:2]) < largest:
        raise ContractError(f"image {x.shape[:2]} smaller than downscale factor {largest}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    ops = list(cfg.operations)
    order = rng.permutation(len(ops))
    keep = rng.random(len(ops)) < cfg.per_op_probability
    out = x.astype(np.float64)
    for i in order:
        if keep[i]:
            out = _apply(ops[i], out, cfg, rng)
    return np.clip(out, -1.0, 1.0).astype(x.dtype)


def mix_degraded(x0: np.ndarray, x_prime: np.ndarray, t: int, T: int) -> np.ndarray:
    """Convex blend of clean and degraded images, weight sin(t/T * pi/2) on the degraded one."""
    x0 = np.asarray(x0)
    x_prime = np.asarray(x_prime)
    if x0.shape != x_prime.shape:
        raise ShapeError("mix_degraded", f"clean {x0.shape} vs degraded {x_prime.shape}")
    a = degradation_coefficient(t, T)
    if a == 0.0:
        return x0.copy()
    if a == 1.0:
        return x_prime.copy()
    return ((1.0 - a) * x0 + a * x_prime).astype(x0.dtype)


SEVERITY_DOWNSCALE = (1, 1, 2, 2, 4)


def severity_config(level: int) -> DegradationConfig:
    """Deterministic-strength degradation used for controlled-severity sweeps.

    Level 0 is the identity. Level k blurs with sigma 0.75k, resamples by
    ``SEVERITY_DOWNSCALE[k]`` and adds noise of 20k (8-bit units).
    """
    if not 0 <= level < len(SEVERITY_DOWNSCALE):
        raise ContractError(f"severity level must lie in [0, {len(SEVERITY_DOWNSCALE) - 1}]")
    if level == 0:
        return DegradationConfig(per_op_probability=0.0)
    sigma = 0.75 * level
    noise = 20.0 * level
    return DegradationConfig(
        blur_sigma_range=(sigma, sigma),
        downscale_factors=(SEVERITY_DOWNSCALE[level],),
        noise_sigma_range=(noise, noise),
        per_op_probability=1.0,
        operations=("blur", "resample", "noise"),
    )
