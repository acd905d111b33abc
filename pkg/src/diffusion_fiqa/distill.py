"""Distilling the diffusion scorer into a one-pass regressor.

Teacher scores are min-max normalised on the training split and regressed by a
small head on top of the recognition backbone. With a frozen backbone (the
default) features are computed once and only the head is trained.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import tensorfile
from .denoiser import DenoiserModel
from .embedder import ConvEmbedder, Embedder, ProjectionEmbedder, _check_images
from .errors import ContractError, ParseError, TrainingError
from .nn import Linear, Module
from .optim import Adam
from .scorer import ScorerConfig, score_batch

TRAIN, VAL = "train", "val"


def split_of(ref: str, val_fraction: float = 0.1) -> str:
    """Stable assignment from a hash of the reference string."""
    h = int.from_bytes(hashlib.sha1(ref.encode("utf-8")).digest()[:8], "big")
    return VAL if h / 2**64 < val_fraction else TRAIN


@dataclass
class LabelSet:
    refs: list[str]
    raw: np.ndarray
    normalized: np.ndarray
    splits: list[str]
    lo: float
    hi: float

    def __len__(self) -> int:
        return len(self.refs)

    def mask(self, split: str) -> np.ndarray:
        return np.array([s == split for s in self.splits], dtype=bool)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "raw", "normalized", "split"])
            for row in zip(self.refs, self.raw, self.normalized, self.splits):
                writer.writerow([row[0], repr(float(row[1])), repr(float(row[2])), row[3]])

    @classmethod
    def from_csv(cls, path) -> "LabelSet":
        refs, raw, splits = [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != ["path", "raw", "normalized", "split"]:
                raise ParseError(f"{path}: expected header path,raw,normalized,split", line=1)
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4 or row[3] not in (TRAIN, VAL):
                    raise ParseError(f"{path}: bad label row {row!r}", line=lineno)
                try:
                    raw.append(float(row[1]))
                except ValueError:
                    raise ParseError(f"{path}: bad raw score {row[1]!r}", line=lineno) from None
                refs.append(row[0])
                splits.append(row[3])
        return normalize_labels(refs, raw, splits)


def normalize_labels(refs: Sequence[str], raw, splits: Sequence[str] | None = None,
                     val_fraction: float = 0.1) -> LabelSet:
    """Min-max normalisation with the range taken from the training split only."""
    raw = np.asarray(raw, dtype=np.float64)
    if len(refs) != raw.size:
        raise ContractError(f"{len(refs)} references but {raw.size} scores")
    if not np.all(np.isfinite(raw)):
        raise ContractError("teacher scores must be finite")
    splits = list(splits) if splits is not None else [split_of(r, val_fraction) for r in refs]
    train = np.array([s == TRAIN for s in splits], dtype=bool)
    if not train.any():
        raise ContractError("no image fell in the training split")
    lo, hi = float(raw[train].min()), float(raw[train].max())
    if hi == lo:
        raise ContractError(f"degenerate labels: every training score equals {lo}")
    norm = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    return LabelSet(list(refs), raw, norm, splits, lo, hi)


def generate_labels(refs: Sequence[str], loader: Callable[[str], np.ndarray], model: DenoiserModel,
                    embedder: Embedder, cfg: ScorerConfig, val_fraction: float = 0.1) -> LabelSet:
    records = score_batch(refs, model, embedder, cfg, loader)
    failed = [r for r in records if r.quality is None]
    if failed:
        raise ContractError(f"{len(failed)} images could not be scored, first {failed[0].ref}: {failed[0].error}")
    return normalize_labels(refs, [r.quality for r in records], val_fraction=val_fraction)


# ---------------------------------------------------------------------------
# regressor


@dataclass
class RegressorConfig:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 3e-3
    hidden: int = 32
    patience: int = 40
    finetune: bool = False
    backbone_lr: float = 1e-4
    # mirrored training images keep their label (the teacher treats both orientations alike)
    flip_augment: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class Head(Module):
    """Standardised features -> SiLU MLP, plus a linear shortcut."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, 1, rng=rng)
        self.skip = Linear(dim, 1, rng=rng)

    def __call__(self, f):
        return self.fc2(ag.silu(self.fc1(f))) + self.skip(f)


def backbone_features(backbone: Embedder, x):
    """Graph-building features for the conv backbone; constant arrays otherwise."""
    if isinstance(backbone, ConvEmbedder):
        return backbone.net(x if isinstance(x, ag.Tensor) else ag.Tensor(np.asarray(x, np.float32)))
    return ag.as_tensor(backbone.embed_batch(np.asarray(x)).astype(np.float32))


@dataclass
class Regressor:
    backbone: Embedder
    head: Head
    mean: np.ndarray
    scale: np.ndarray
    config: RegressorConfig = field(default_factory=RegressorConfig)

    def raw_output(self, x):
        f = (backbone_features(self.backbone, x) - self.mean) / self.scale
        return ag.reshape(self.head(f), (-1,))

    def predict(self, x: np.ndarray) -> np.ndarray:
        x, single = _check_images(x, self.backbone.image_shape)
        with ag.no_grad():
            out = self.raw_output(x).data.astype(np.float64)
        out = np.clip(out, 0.0, 1.0)
        return out[0] if single else out


@dataclass
class RegressorHistory:
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int


def _features(backbone: Embedder, images: np.ndarray) -> np.ndarray:
    with ag.no_grad():
        return np.concatenate([backbone_features(backbone, images[i:i + 256]).data
                               for i in range(0, len(images), 256)]).astype(np.float32)


def train_regressor(labels: LabelSet, images: np.ndarray, backbone: Embedder,
                    cfg: RegressorConfig | None = None) -> tuple[Regressor, RegressorHistory]:
    """Fit the head to ``labels.normalized`` (rows of ``images`` align with ``labels.refs``).

    Keeps the parameters of the epoch with the lowest validation loss and stops
    after ``patience`` epochs without improvement. Without a validation split the
    training loss is monitored instead.
    """
    cfg = cfg or RegressorConfig()
    images = np.asarray(images, dtype=np.float32)
    if len(images) != len(labels):
        raise ContractError(f"{len(images)} images for {len(labels)} labels")
    if isinstance(backbone, ProjectionEmbedder) and cfg.finetune:
        raise ContractError("the projection backbone has no trainable parameters")
    if cfg.finetune:
        backbone = copy.deepcopy(backbone)  # the caller's embedder stays untouched
    train, val = labels.mask(TRAIN), labels.mask(VAL)
    y = labels.normalized.astype(np.float32)
    feats = _features(backbone, images)
    feats_flipped = _features(backbone, images[:, :, ::-1]) if cfg.flip_augment and not cfg.finetune else None
    mean = feats[train].mean(axis=0)
    scale = feats[train].std(axis=0) + np.float32(1e-6)
    rng = np.random.default_rng(cfg.seed)
    head = Head(feats.shape[1], cfg.hidden, rng)
    model = Regressor(backbone, head, mean, scale, cfg)

    params = dict(head.parameters())
    opt = Adam(params, lr=cfg.lr)
    bb_opt = Adam(dict(backbone.net.parameters()), lr=cfg.backbone_lr) if cfg.finetune else None

    def loss_on(idx, flip=None):
        if cfg.finetune:
            batch = images[idx]
            if flip is not None:
                batch = np.where(flip[:, None, None, None], batch[:, :, ::-1], batch)
            out = model.raw_output(batch)
        else:
            f = feats[idx] if flip is None else np.where(flip[:, None], feats_flipped[idx], feats[idx])
            out = ag.reshape(head((ag.as_tensor(f) - mean) / scale), (-1,))
        return ag.mse(out, ag.as_tensor(y[idx]))

    def evaluate_split(mask):
        with ag.no_grad():
            return float(loss_on(np.flatnonzero(mask)).data)

    monitor = val if val.any() else train
    train_idx = np.flatnonzero(train)
    history = RegressorHistory([], [], -1)
    best, best_state, waited = math.inf, None, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            if bb_opt:
                bb_opt.zero_grad()
            flip = rng.random(len(idx)) < 0.5 if cfg.flip_augment else None
            loss = loss_on(idx, flip)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"regressor loss became {value} in epoch {epoch}, batch at {start}")
            ag.backward(loss)
            opt.step()
            if bb_opt:
                bb_opt.step()
            total += value * len(idx)
        history.train_loss.append(total / len(order))
        current = evaluate_split(monitor)
        history.val_loss.append(current)
        if current < best:
            best, waited, history.best_epoch = current, 0, epoch
            best_state = _snapshot(model)
        else:
            waited += 1
            if waited >= cfg.patience:
                break
    _restore(model, best_state)
    return model, history


def _snapshot(model: Regressor) -> dict[str, np.ndarray]:
    state = {f"head.{k}": v.copy() for k, v in model.head.state_dict().items()}
    if isinstance(model.backbone, ConvEmbedder):
        state.update({f"backbone.{k}": v.copy() for k, v in model.backbone.net.state_dict().items()})
    return state


def _restore(model: Regressor, state: dict[str, np.ndarray] | None) -> None:
    if state is None:
        return
    model.head.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("head.")})
    if isinstance(model.backbone, ConvEmbedder):
        model.backbone.net.load_state_dict({k[9:]: v for k, v in state.items() if k.startswith("backbone.")})


def score_distilled(model: Regressor, x: np.ndarray) -> float | np.ndarray:
    """Quality in [0, 1] from one forward pass; a batch gives one score per image."""
    return model.predict(x)


def save_regressor(model: Regressor, path, extra: dict | None = None) -> None:
    tensors = _snapshot(model)
    tensors["feature_mean"] = model.mean
    tensors["feature_scale"] = model.scale
    meta = {"kind": "regressor", "backbone": model.backbone.config(), "head_in": int(model.mean.size),
            "config": model.config.to_dict(), **(extra or {})}
    tensorfile.save(path, tensors, meta)


def load_regressor(path) -> tuple[Regressor, dict]:
    tensors, meta = tensorfile.load(path)
    if meta.get("kind") != "regressor":
        raise ContractError(f"{path} is not a regressor checkpoint")
    cfg = RegressorConfig(**meta["config"])
    bb = dict(meta["backbone"])
    kind = bb.pop("kind")
    backbone = ConvEmbedder(**bb) if kind == "trained" else ProjectionEmbedder(**bb)
    head = Head(meta["head_in"], cfg.hidden, np.random.default_rng(0))
    model = Regressor(backbone, head, tensors["feature_mean"], tensors["feature_scale"], cfg)
    _restore(model, tensors)
    return model, meta
