"""Synthetic face-like images with identities, pose and illumination jitter.

Each identity fixes the face geometry (ellipse size, eye spacing and size,
mouth, brow and nose placement, tone). Each sample renders that identity with
a small random pose (yaw shifts inner features sideways and squashes one
side), a left-right illumination gradient and a global gain. Renders are supersampled
and then Gaussian-smoothed so the images are band-limited like a properly
downscaled photo. With zero yaw and zero gradient the render is exactly
left-right symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .degradations import gaussian_blur
from .errors import ContractError


@dataclass(frozen=True)
class ToyFaceConfig:
    size: int = 16
    n_identities: int = 20
    samples_per_identity: int = 4
    pose_jitter: float = 0.15
    illumination_jitter: float = 0.15
    gain_jitter: float = 0.1
    seed: int = 0
    supersample: int = 4
    antialias: float = 0.7  # Gaussian sigma in output pixels

    def __post_init__(self):
        if self.size < 4:
            raise ContractError("size must be at least 4")
        if self.samples_per_identity < 2:
            raise ContractError("each identity needs at least two samples")
        if self.n_identities < 1:
            raise ContractError("need at least one identity")


def identity_params(rng: np.random.Generator) -> dict[str, float]:
    return {
        "face_w": rng.uniform(0.55, 0.8),
        "face_h": rng.uniform(0.7, 0.92),
        "tone": rng.uniform(0.1, 0.7),
        "background": rng.uniform(-0.9, -0.4),
        "eye_y": rng.uniform(-0.35, -0.1),
        "eye_dx": rng.uniform(0.2, 0.42),
        "eye_r": rng.uniform(0.08, 0.16),
        "eye_dark": rng.uniform(-1.0, -0.4),
        "brow_y": rng.uniform(0.1, 0.2),
        "brow_strength": rng.uniform(0.0, 0.8),
        "nose_len": rng.uniform(0.1, 0.35),
        "mouth_y": rng.uniform(0.3, 0.55),
        "mouth_w": rng.uniform(0.15, 0.42),
        "mouth_h": rng.uniform(0.04, 0.1),
        "mouth_dark": rng.uniform(-0.8, -0.2),
    }


def _soft(d: np.ndarray, sharpness: float = 40.0) -> np.ndarray:
    # smooth indicator of d < 0
    return 0.5 * (1.0 - np.tanh(sharpness * d))


def render_face(p: dict[str, float], size: int, yaw: float = 0.0, light: float = 0.0,
                gain: float = 1.0, supersample: int = 4, antialias: float = 0.7) -> np.ndarray:
    """Render one grayscale face as (size, size, 1) in [-1, 1]."""
    n = size * supersample
    coords = (np.arange(n) + 0.5) * (2.0 / n) - 1.0
    v, u = np.meshgrid(coords, coords, indexing="ij")
    # yaw: features slide sideways, the far side of the face narrows
    squash = 1.0 + yaw * np.sign(u) * 0.6
    fu = u / np.where(squash > 0.2, squash, 0.2)
    face = _soft((fu / p["face_w"]) ** 2 + (v / p["face_h"]) ** 2 - 1.0, 6.0)
    img = p["background"] + (p["tone"] - p["background"]) * face
    cu = u - yaw * 0.5
    for side in (-1.0, 1.0):
        d = ((cu - side * p["eye_dx"]) ** 2 + (v - p["eye_y"]) ** 2) / p["eye_r"] ** 2 - 1.0
        img = img + (p["eye_dark"] - p["tone"]) * _soft(d, 4.0) * face
        bd = np.maximum(np.abs(cu - side * p["eye_dx"]) / (1.4 * p["eye_r"]),
                        np.abs(v - (p["eye_y"] - p["brow_y"])) / 0.035) - 1.0
        img = img - p["brow_strength"] * _soft(bd, 4.0) * face
    nd = np.maximum(np.abs(cu) / 0.05, np.abs(v - p["nose_len"] / 2) / (p["nose_len"] / 2 + 1e-6)) - 1.0
    img = img - 0.3 * _soft(nd, 4.0) * face
    md = np.maximum(np.abs(cu) / p["mouth_w"], np.abs(v - p["mouth_y"]) / p["mouth_h"]) - 1.0
    img = img + (p["mouth_dark"] - p["tone"]) * _soft(md, 4.0) * face
    img = gain * img + light * u
    img = img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    if antialias > 0:
        img = gaussian_blur(img, antialias)
    return np.clip(img, -1.0, 1.0)[:, :, None]


@dataclass
class ToyFaceDataset:
    images: np.ndarray  # (N, H, W, 1) float32
    identities: np.ndarray  # (N,) int
    poses: np.ndarray  # (N,) yaw per sample
    config: ToyFaceConfig

    def __len__(self) -> int:
        return len(self.images)

    def refs(self, prefix: str = "img") -> list[str]:
        return [f"{prefix}_{i:05d}" for i in range(len(self))]


def generate(cfg: ToyFaceConfig) -> ToyFaceDataset:
    """Deterministic for a given config; identities are drawn before samples."""
    rng = np.random.default_rng(cfg.seed)
    id_params = [identity_params(rng) for _ in range(cfg.n_identities)]
    images, ids, poses = [], [], []
    for k, p in enumerate(id_params):
        for _ in range(cfg.samples_per_identity):
            yaw = rng.uniform(-cfg.pose_jitter, cfg.pose_jitter) if cfg.pose_jitter else 0.0
            light = rng.uniform(-cfg.illumination_jitter, cfg.illumination_jitter) if cfg.illumination_jitter else 0.0
            gain = 1.0 + (rng.uniform(-cfg.gain_jitter, cfg.gain_jitter) if cfg.gain_jitter else 0.0)
            images.append(render_face(p, cfg.size, yaw, light, gain, cfg.supersample, cfg.antialias))
            ids.append(k)
            poses.append(yaw)
    return ToyFaceDataset(np.asarray(images, dtype=np.float32), np.asarray(ids), np.asarray(poses), cfg)


def symmetric_face(size: int = 16, seed: int = 0) -> np.ndarray:
    """A single exactly mirror-symmetric render."""
    p = identity_params(np.random.default_rng(seed))
    img = render_face(p, size).astype(np.float32)
    return ((img + img[:, ::-1]) * np.float32(0.5)).astype(np.float32)
