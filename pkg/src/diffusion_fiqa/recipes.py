"""Desk-scale setups shared by the command line, the tests and the acceptance suite.

Dataset seeds are kept apart so that denoiser training, embedder training and
evaluation never see the same synthetic identities.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .degradations import degrade, severity_config
from .denoiser import DenoiserModel, EpochStats, TrainConfig, fit
from .distill import RegressorConfig
from .embedder import ConvEmbedder, EmbedderTrainConfig, train_conv_embedder
from .evaluation import Pair, Protocol, all_pairs
from .toyfaces import ToyFaceConfig, ToyFaceDataset, generate

# The default Adam rate (8e-5) converges on the toy set but too slowly for
# 200 epochs of 4 batches; the desk recipe uses a larger one.
DESK_LR = 1e-3

DENOISER_DATA = ToyFaceConfig(size=16, n_identities=32, samples_per_identity=2, seed=1)
HELDOUT_DATA = ToyFaceConfig(size=16, n_identities=8, samples_per_identity=4, seed=99)
EMBEDDER_DATA = ToyFaceConfig(size=16, n_identities=150, samples_per_identity=6, seed=2)
EMBEDDER_TRAINING = EmbedderTrainConfig(epochs=20)
# wide yaw range; evaluation sets are seeded from POSE_SEED_BASE upward
POSE_JITTER = 0.5
POSE_SEED_BASE = 1000
# distillation: teacher-labelled training pool and a disjoint held-out set
DISTILL_TRAIN_SEEDS = (7, 17, 27)
DISTILL_TEST_SEED = 8
DISTILL_REGRESSOR = RegressorConfig(finetune=True, backbone_lr=3e-4, epochs=300)


@dataclass
class TrainedDenoiser:
    model: DenoiserModel
    history: list[EpochStats]
    seconds: float
    images: np.ndarray

    @property
    def losses(self) -> list[float]:
        return [h.mean_loss for h in self.history]


def train_toy_denoiser(epochs: int = 200, seed: int = 0, lr: float = DESK_LR,
                       data: ToyFaceConfig = DENOISER_DATA) -> TrainedDenoiser:
    images = generate(data).images
    model = DenoiserModel(image_size=data.size, seed=seed)
    start = time.perf_counter()
    history = fit(model, images, TrainConfig(lr=lr), epochs, np.random.default_rng(seed))
    return TrainedDenoiser(model, history, time.perf_counter() - start, images)


def train_toy_embedder(cfg: EmbedderTrainConfig = EMBEDDER_TRAINING,
                       data: ToyFaceConfig = EMBEDDER_DATA) -> tuple[ConvEmbedder, list[float]]:
    ds = generate(data)
    return train_conv_embedder(ds.images, ds.identities, cfg)


def pose_dataset(seed: int, n_identities: int = 40, samples_per_identity: int = 4) -> ToyFaceDataset:
    return generate(ToyFaceConfig(size=16, n_identities=n_identities, samples_per_identity=samples_per_identity,
                                  pose_jitter=POSE_JITTER, seed=POSE_SEED_BASE + seed))


def cross_pose_pairs(refs, identities, poses) -> list[Pair]:
    """All non-mated pairs, and only those mated pairs whose yaws have opposite sign."""
    yaw = dict(zip(refs, poses))
    return [p for p in all_pairs(refs, identities) if not p.mated or yaw[p.ref_a] * yaw[p.ref_b] < 0]


def embedded_protocol(ds: ToyFaceDataset, embedder, pairs: list[Pair] | None = None) -> Protocol:
    refs = ds.refs()
    table = dict(zip(refs, embedder.embed_batch(ds.images)))
    return Protocol(refs, ds.identities, table, pairs if pairs is not None else all_pairs(refs, ds.identities))


@dataclass
class QualitySet:
    """Toy faces, each degraded at a random severity level."""

    refs: list[str]
    images: np.ndarray
    levels: np.ndarray
    identities: np.ndarray

    def loader(self):
        index = {r: i for i, r in enumerate(self.refs)}
        return lambda ref: self.images[index[ref]]


def quality_set(seed: int, n_images: int = 500, prefix: str = "q") -> QualitySet:
    ds = generate(ToyFaceConfig(size=16, n_identities=n_images // 2, samples_per_identity=2, seed=seed))
    rng = np.random.default_rng(seed)
    levels = rng.integers(0, 5, len(ds))
    images = np.stack([degrade(x, severity_config(int(k)), rng) for x, k in zip(ds.images, levels)])
    return QualitySet(ds.refs(f"{prefix}{seed}"), images.astype(np.float32), levels, ds.identities)
