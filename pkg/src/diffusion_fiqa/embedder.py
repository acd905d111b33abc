"""Face-recognition embedders: the model M whose embedding stability is measured.

Three kinds share one interface (``embed_batch`` over NHWC images):

* ``projection`` - fixed Gaussian projection of block-averaged, mean-centred
  pixels. Linear, needs no training; used as a test fixture.
* ``trained`` - a small conv net trained with an additive cosine margin on toy
  identities.
* ``external`` - precomputed vectors keyed by image reference, so embeddings
  from a real recognition model can be evaluated without bundling it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from . import tensorfile
from .degradations import DegradationConfig, degrade
from .errors import ContractError, ParseError, ShapeError, TrainingError
from .nn import Conv2d, Linear, Module
from .optim import Adam

KINDS = ("projection", "trained", "external")


def _check_images(x: np.ndarray, shape: tuple[int, int, int]) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != shape:
        raise ShapeError("embed", f"embedder expects images of shape {shape}, got {x.shape[1:]}")
    return x, single


class ProjectionEmbedder:
    kind = "projection"

    def __init__(self, image_size: int = 16, channels: int = 1, dim: int = 64, pool: int = 2, seed: int = 0):
        if image_size % pool:
            raise ContractError(f"image_size {image_size} not divisible by pool {pool}")
        self.image_size, self.channels, self.dim, self.pool, self.seed = image_size, channels, dim, pool, seed
        n_in = (image_size // pool) ** 2 * channels
        self.matrix = np.random.default_rng(seed).standard_normal((n_in, dim)) / math.sqrt(n_in)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Block-mean pooled, per-image mean-centred pixels (linear in x)."""
        n, s, p = x.shape[0], self.image_size // self.pool, self.pool
        pooled = np.asarray(x, dtype=np.float64).reshape(n, s, p, s, p, self.channels).mean(axis=(2, 4))
        flat = pooled.reshape(n, -1)
        return flat - flat.mean(axis=1, keepdims=True)

    def embed_batch(self, x: np.ndarray) -> np.ndarray:
        x, single = _check_images(x, self.image_shape)
        out = self.features(x) @ self.matrix
        return out[0] if single else out

    def config(self) -> dict:
        return {"kind": self.kind, "image_size": self.image_size, "channels": self.channels,
                "dim": self.dim, "pool": self.pool, "seed": self.seed}


class ConvNet(Module):
    """conv -> two stride-2 convs -> dense projection, SiLU between.

    No per-sample normalisation: feature magnitude is left free to track how
    much facial structure survives in the input.
    """

    def __init__(self, image_size: int, channels: int, width: int, dim: int, seed: int):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(channels, width, 3, rng=rng)
        self.conv2 = Conv2d(width, 2 * width, 3, stride=2, rng=rng)
        self.conv3 = Conv2d(2 * width, 2 * width, 3, stride=2, rng=rng)
        self.flat = (image_size // 4) ** 2 * 2 * width
        self.proj = Linear(self.flat, dim, rng=rng)

    def __call__(self, x):
        h = ag.silu(self.conv1(x))
        h = ag.silu(self.conv2(h))
        h = ag.silu(self.conv3(h))
        return self.proj(ag.reshape(h, (h.shape[0], self.flat)))


class ConvEmbedder:
    kind = "trained"

    def __init__(self, image_size: int = 16, channels: int = 1, dim: int = 32, width: int = 16, seed: int = 0):
        if image_size % 4:
            raise ContractError("conv embedder needs image_size divisible by 4")
        self.image_size, self.channels, self.dim, self.width, self.seed = image_size, channels, dim, width, seed
        self.net = ConvNet(image_size, channels, width, dim, seed)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def embed_batch(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        x, single = _check_images(x, self.image_shape)
        parts = []
        with ag.no_grad():
            for i in range(0, len(x), chunk):
                parts.append(self.net(ag.Tensor(x[i:i + chunk].astype(np.float32))).data.astype(np.float64))
        out = np.concatenate(parts) if parts else np.zeros((0, self.dim))
        return out[0] if single else out

    def config(self) -> dict:
        return {"kind": self.kind, "image_size": self.image_size, "channels": self.channels,
                "dim": self.dim, "width": self.width, "seed": self.seed}


class ExternalEmbedder:
    """Serves precomputed vectors by reference; cannot embed new pixels."""

    kind = "external"

    def __init__(self, table: Mapping[str, np.ndarray], source: str = ""):
        if not table:
            raise ContractError("external embedding table is empty")
        dims = {np.asarray(v).shape for v in table.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ContractError(f"external embeddings must be equal-length vectors, got shapes {sorted(dims)}")
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.dim = next(iter(dims))[0]
        self.source = source

    def lookup(self, ref: str) -> np.ndarray:
        try:
            return self.table[ref]
        except KeyError:
            raise ContractError(f"no embedding for reference {ref!r}") from None

    def embed_batch(self, x):
        raise ContractError("external embeddings are keyed by reference; use lookup()")

    def config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "source": self.source}


Embedder = ProjectionEmbedder | ConvEmbedder | ExternalEmbedder


def embed(embedder: Embedder, x: np.ndarray) -> np.ndarray:
    return embedder.embed_batch(x)


# ---------------------------------------------------------------------------
# similarity


def _pow2_rescale(v: np.ndarray) -> np.ndarray:
    # exact rescaling so that squared norms neither overflow nor underflow
    peak = np.max(np.abs(v), axis=-1, keepdims=True)
    _, exponent = np.frexp(np.where(peak > 0, peak, 1.0))
    return np.ldexp(v, -exponent)


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two (N, d) arrays.

    Computed as a.b / sqrt(|a|^2 |b|^2) so that identical rows give exactly 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError("cosine_rows", f"arrays of shape {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ContractError("non-finite embedding")
    a, b = _pow2_rescale(a), _pow2_rescale(b)
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    if np.any(aa == 0) or np.any(bb == 0):
        raise ContractError("zero-norm embedding (degenerate embedder output)")
    return np.clip(np.einsum("ij,ij->i", a, b) / np.sqrt(aa * bb), -1.0, 1.0)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("cosine_similarity", f"vectors of shape {a.shape} and {b.shape}")
    return float(cosine_rows(a[None], b[None])[0])


# ---------------------------------------------------------------------------
# training the conv embedder


@dataclass
class EmbedderTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    scale: float = 16.0
    margin: float = 0.2
    seed: int = 0
    # probability of replacing a training image by a randomly degraded copy
    augment_probability: float = 0.0
    augment: DegradationConfig = field(default_factory=DegradationConfig)


def margin_loss(emb, class_weights, labels: np.ndarray, scale: float, margin: float):
    """Additive cosine margin softmax loss over normalised embeddings and class centres."""
    cos = ag.matmul(ag.l2_normalize(emb, axis=1), ag.l2_normalize(class_weights, axis=0))
    onehot = np.zeros(cos.shape, dtype=cos.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    logits = (cos - onehot * margin) * scale
    return -ag.tsum(ag.log_softmax(logits, axis=1) * onehot) / float(len(labels))


def train_conv_embedder(images: np.ndarray, labels: np.ndarray, cfg: EmbedderTrainConfig | None = None,
                        dim: int = 32, width: int = 16) -> tuple[ConvEmbedder, list[float]]:
    cfg = cfg or EmbedderTrainConfig()
    images = np.asarray(images, dtype=np.float32)
    labels = np.unique(np.asarray(labels), return_inverse=True)[1]
    model = ConvEmbedder(images.shape[1], images.shape[3], dim, width, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    centres = ag.parameter(rng.standard_normal((dim, labels.max() + 1)).astype(np.float32))
    params = dict(model.net.parameters(), centres=centres)
    opt = Adam(params, lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(images), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            # mirrored copies are the same identity
            batch = images[idx]
            flip = rng.random(len(idx)) < 0.5
            batch = np.where(flip[:, None, None, None], batch[:, :, ::-1], batch)
            if cfg.augment_probability > 0:
                hit = rng.random(len(idx)) < cfg.augment_probability
                batch = np.stack([degrade(b, cfg.augment, rng) if h else b for b, h in zip(batch, hit)])
            opt.zero_grad()
            loss = margin_loss(model.net(ag.Tensor(batch)), centres, labels[idx], cfg.scale, cfg.margin)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"embedder loss became {value} in epoch {epoch}")
            ag.backward(loss)
            opt.step()
            total += value * len(idx)
        history.append(total / len(images))
    return model, history


# ---------------------------------------------------------------------------
# persistence


def save_embedder(embedder: Embedder, path) -> None:
    meta = {"kind": "embedder", "embedder": embedder.config()}
    if isinstance(embedder, ConvEmbedder):
        tensors = embedder.net.state_dict()
    elif isinstance(embedder, ExternalEmbedder):
        tensors = dict(embedder.table)
    else:
        tensors = {}
    tensorfile.save(path, tensors, meta)


def load_embedder(path) -> Embedder:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return ExternalEmbedder(read_embedding_csv(path), str(path))
    tensors, meta = tensorfile.load(path)
    if meta.get("kind") != "embedder":
        # a bare table of vectors keyed by reference
        return ExternalEmbedder(tensors, str(path))
    cfg = dict(meta["embedder"])
    kind = cfg.pop("kind")
    if kind == "projection":
        return ProjectionEmbedder(**cfg)
    if kind == "trained":
        model = ConvEmbedder(**cfg)
        model.net.load_state_dict(tensors)
        return model
    if kind == "external":
        return ExternalEmbedder(tensors, str(path))
    raise ContractError(f"{path}: unknown embedder kind {kind!r}")


def read_embedding_csv(path) -> dict[str, np.ndarray]:
    """Rows of ``path,v0,v1,...`` with a header line."""
    table: dict[str, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError(f"{path}: empty embedding file", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                table[row[0]] = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
            if len(row) != len(header):
                raise ParseError(f"{path}: expected {len(header)} fields, got {len(row)}", line=lineno)
    return table


def write_embedding_csv(path, refs: Sequence[str], vectors: Iterable[np.ndarray]) -> None:
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    dim = len(vectors[0]) if vectors else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path"] + [f"e{i}" for i in range(dim)])
        for ref, v in zip(refs, vectors):
            writer.writerow([ref] + [repr(float(x)) for x in v])
