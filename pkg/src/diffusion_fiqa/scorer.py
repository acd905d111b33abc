"""Embedding-stability quality score.

An image x and its mirror x^f are noised for ``t_infer`` forward steps and
restored by the denoiser, ``n`` times each. The quality is the mean cosine
similarity between the embedding of x and the embeddings of the perturbed
variants::

    x_t      noisy image            (forward term)
    x_hat    restored image         (backward term)
    x_f      mirrored image         (flip)
    x_f_t    noisy mirror           (flip + forward)
    x_hat_f  restored mirror        (flip + backward)

The plain and mirrored branches draw from independent noise streams, both
derived from ``(seed, index)``. The plain stream does not depend on the flip
flag, so toggling it only adds or removes terms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .denoiser import DenoiserModel, NoiseFn, backward_restore, forward_noise
from .embedder import Embedder, cosine_rows
from .errors import ContractError

TERMS = ("x_t", "x_hat", "x_f", "x_f_t", "x_hat_f")


@dataclass(frozen=True)
class ScorerConfig:
    t_infer: int = 5
    n: int = 10
    use_flip: bool = True
    use_forward_term: bool = True
    use_backward_term: bool = True
    seed: int = 0

    def terms(self) -> tuple[str, ...]:
        keep = []
        if self.use_forward_term:
            keep.append("x_t")
        if self.use_backward_term:
            keep.append("x_hat")
        if self.use_flip:
            keep.append("x_f")
            if self.use_forward_term:
                keep.append("x_f_t")
            if self.use_backward_term:
                keep.append("x_hat_f")
        return tuple(keep)

    def validate(self, model: DenoiserModel | None = None) -> None:
        if self.n < 1:
            raise ContractError(f"n must be at least 1, got {self.n}")
        upper = model.T_prime if model is not None else None
        if self.t_infer < 1 or (upper is not None and self.t_infer > upper):
            raise ContractError(f"t_infer={self.t_infer} outside [1, {upper}]")
        if not (self.use_forward_term or self.use_backward_term or self.use_flip):
            raise ContractError("all score terms disabled; the embedding set would be empty")

    def to_dict(self) -> dict:
        return asdict(self)


def branch_rngs(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (plain, mirrored) generators for image ``index``."""
    plain, mirrored = np.random.SeedSequence(seed, spawn_key=(index,)).spawn(2)
    return np.random.default_rng(plain), np.random.default_rng(mirrored)


def _perturb(x: np.ndarray, model: DenoiserModel, cfg: ScorerConfig, rng: np.random.Generator,
             noise_fn: NoiseFn | None, restore: bool) -> tuple[np.ndarray, np.ndarray | None]:
    batch = np.repeat(x[None].astype(np.float32), cfg.n, axis=0)
    eps = np.asarray(noise_fn(batch.shape), dtype=np.float32) if noise_fn else None
    x_t, _ = forward_noise(batch, cfg.t_infer, model.schedule, rng, eps=eps)
    x_hat = backward_restore(model, x_t, cfg.t_infer, rng, noise_fn=noise_fn) if restore else None
    return x_t, x_hat


def score_terms(x: np.ndarray, model: DenoiserModel, embedder: Embedder, cfg: ScorerConfig,
                index: int = 0, noise_fn: NoiseFn | None = None) -> dict[str, np.ndarray]:
    """Per-repetition similarities cos(e_x, e_y) for every enabled term, each of length n.

    ``noise_fn(shape)`` replaces every Gaussian draw in both branches.
    """
    cfg.validate(model)
    x = np.asarray(x, dtype=np.float32)
    model.check_images(x[None])
    rng_plain, rng_flip = branch_rngs(cfg.seed, index)
    restore = cfg.use_backward_term
    # every embedding is taken in a batch of n so that identical images get
    # bit-identical vectors regardless of how the backend blocks the batch
    ref = embedder.embed_batch(np.repeat(x[None], cfg.n, axis=0))
    out: dict[str, np.ndarray] = {}

    def compare(images: np.ndarray) -> np.ndarray:
        return cosine_rows(ref, embedder.embed_batch(images))

    if cfg.use_forward_term or cfg.use_backward_term:
        x_t, x_hat = _perturb(x, model, cfg, rng_plain, noise_fn, restore)
        if cfg.use_forward_term:
            out["x_t"] = compare(x_t)
        if restore:
            out["x_hat"] = compare(x_hat)
    if cfg.use_flip:
        x_f = x[:, ::-1]
        out["x_f"] = compare(np.repeat(x_f[None], cfg.n, axis=0))
        if cfg.use_forward_term or cfg.use_backward_term:
            xf_t, xf_hat = _perturb(x_f, model, cfg, rng_flip, noise_fn, restore)
            if cfg.use_forward_term:
                out["x_f_t"] = compare(xf_t)
            if restore:
                out["x_hat_f"] = compare(xf_hat)
    return {k: out[k] for k in TERMS if k in out}


def quality_from_terms(terms: dict[str, np.ndarray], cfg: ScorerConfig) -> float:
    """Mean over repetitions and set members, restricted to the terms ``cfg`` enables."""
    keep = cfg.terms()
    missing = [k for k in keep if k not in terms]
    if missing:
        raise ContractError(f"terms {missing} were not computed")
    return float(np.mean(np.stack([terms[k] for k in keep])))


def score_image(x: np.ndarray, model: DenoiserModel, embedder: Embedder, cfg: ScorerConfig,
                index: int = 0, noise_fn: NoiseFn | None = None) -> float:
    return quality_from_terms(score_terms(x, model, embedder, cfg, index, noise_fn), cfg)


@dataclass
class ScoreRecord:
    ref: str
    quality: float | None
    error: str | None = None


def score_batch(refs: Sequence[str], model: DenoiserModel, embedder: Embedder, cfg: ScorerConfig,
                loader: Callable[[str], np.ndarray], start_index: int = 0,
                noise_fn: NoiseFn | None = None) -> list[ScoreRecord]:
    """Score images in order; item i uses seed stream (cfg.seed, start_index + i).

    A failure to load or score one image is recorded and the batch continues.
    Contract violations of the configuration itself are raised immediately.
    """
    cfg.validate(model)
    records = []
    for i, ref in enumerate(refs):
        try:
            q = score_image(loader(ref), model, embedder, cfg, start_index + i, noise_fn)
        except (OSError, ValueError) as exc:
            records.append(ScoreRecord(ref, None, f"{type(exc).__name__}: {exc}"))
            continue
        records.append(ScoreRecord(ref, q))
    return records


def format_quality(q: float) -> str:
    return f"{q:.9g}"


def write_quality_csv(path, records: Iterable[ScoreRecord]) -> int:
    """Write ``path,quality`` rows for successful records; returns the number written."""
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "quality"])
        for r in records:
            if r.quality is not None and math.isfinite(r.quality):
                writer.writerow([r.ref, format_quality(r.quality)])
                count += 1
    return count


def write_error_csv(path, records: Iterable[ScoreRecord]) -> int:
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "error"])
        for r in records:
            if r.error is not None:
                writer.writerow([r.ref, r.error])
                count += 1
    return count
