"""Command-line entry point: ``diffusion-fiqa <command> [--config F] [--set k=v] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .denoiser import DenoiserModel, TrainConfig, load_checkpoint, save_checkpoint, train_epoch
from .distill import (LabelSet, RegressorConfig, TRAIN, VAL, generate_labels, load_regressor, normalize_labels,
                      save_regressor, score_distilled, train_regressor)
from .embedder import (EmbedderTrainConfig, ProjectionEmbedder, load_embedder, save_embedder, train_conv_embedder,
                       write_embedding_csv)
from .errors import ContractError, ParseError, TrainingError
from .evaluation import ProtocolConfig, all_pairs, run_protocol, write_pairs_csv
from .imageio import load_image, save_image
from .scorer import ScoreRecord, ScorerConfig, score_batch, write_error_csv, write_quality_csv
from .toyfaces import ToyFaceConfig, generate

log = logging.getLogger("diffusion_fiqa")

MANIFEST = "manifest.csv"


# ---------------------------------------------------------------------------
# image lists


@dataclass
class ImageList:
    refs: list[str]
    root: Path
    identities: list[str]

    def path(self, ref: str) -> Path:
        return self.root / ref

    def load(self, ref: str) -> np.ndarray:
        return load_image(self.path(ref))

    def load_all(self) -> np.ndarray:
        return np.stack([self.load(r) for r in self.refs])


def read_image_list(source: str) -> ImageList:
    """A manifest CSV (``path,identity,...``) or a directory of .pgm/.ppm files."""
    src = Path(source)
    if src.is_dir():
        manifest = src / MANIFEST
        if not manifest.exists():
            refs = sorted(p.name for p in src.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
            if not refs:
                raise ContractError(f"{src}: no .pgm/.ppm images and no {MANIFEST}")
            return ImageList(refs, src, [""] * len(refs))
        src = manifest
    if not src.exists():
        raise ContractError(f"image list {src} does not exist")
    refs, ids = [], []
    with open(src, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "path":
            raise ParseError(f"{src}: expected a header starting with 'path'", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{src}: expected {len(header)} fields, got {len(row)}", line=lineno)
            refs.append(row[0])
            ids.append(row[1] if len(row) > 1 else "")
    if not refs:
        raise ContractError(f"{src}: empty image list")
    return ImageList(refs, src.parent, ids)


def resolve_embedder(spec: str, image_size: int = 16):
    if spec == "projection":
        return ProjectionEmbedder(image_size=image_size)
    if not Path(spec).exists():
        raise ContractError(f"embedder {spec!r} is neither 'projection' nor an existing file")
    return load_embedder(spec)


def _out(settings) -> Path:
    out = Path(settings.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.echo(settings, out)
    return out


# ---------------------------------------------------------------------------
# toy-dataset


@dataclass
class ToyDatasetSettings:
    out: str = "toy"
    seed: int = 0
    size: int = 16
    n_identities: int = 20
    samples_per_identity: int = 4
    pose_jitter: float = 0.15
    illumination_jitter: float = 0.15
    gain_jitter: float = 0.1
    # degrade each image at a random severity level 0..4
    degrade: bool = False
    max_nonmated: int | None = None


def cmd_toy_dataset(s: ToyDatasetSettings) -> int:
    from .degradations import degrade, severity_config

    out = _out(s)
    ds = generate(ToyFaceConfig(size=s.size, n_identities=s.n_identities, samples_per_identity=s.samples_per_identity,
                                pose_jitter=s.pose_jitter, illumination_jitter=s.illumination_jitter,
                                gain_jitter=s.gain_jitter, seed=s.seed))
    rng = np.random.default_rng(s.seed)
    levels = rng.integers(0, 5, len(ds)) if s.degrade else np.zeros(len(ds), dtype=int)
    (out / "images").mkdir(exist_ok=True)
    refs = [f"images/{r}.pgm" for r in ds.refs()]
    with open(out / MANIFEST, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "identity", "pose", "level"])
        for ref, x, ident, pose, level in zip(refs, ds.images, ds.identities, ds.poses, levels):
            if level:
                x = degrade(x, severity_config(int(level)), rng)
            save_image(out / ref, x)
            writer.writerow([ref, int(ident), f"{pose:.6f}", int(level)])
    pair_rng = np.random.default_rng([s.seed, 1])
    write_pairs_csv(out / "pairs.csv", all_pairs(refs, ds.identities, s.max_nonmated, pair_rng))
    log.info("wrote %d images of %d identities to %s", len(refs), s.n_identities, out)
    return 0


# ---------------------------------------------------------------------------
# train (denoiser)


@dataclass
class TrainSettings:
    out: str = "run"
    seed: int = 0
    # image list; empty means a generated toy set
    dataset: str | None = None
    toy_identities: int = 32
    toy_samples: int = 2
    toy_seed: int = 1
    epochs: int = 200
    lr: float = 8e-5
    batch_size: int = 16
    ema_decay: float = 0.995
    T: int = 1000
    T_prime: int = 100
    base_channels: int = 16
    depth: int = 2
    skip: bool = True
    save_every: int = 10
    resume: bool = True


def _training_images(s) -> np.ndarray:
    if s.dataset:
        return read_image_list(s.dataset).load_all()
    return generate(ToyFaceConfig(n_identities=s.toy_identities, samples_per_identity=s.toy_samples,
                                  seed=s.toy_seed)).images


def _read_loss_log(path: Path, keep: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return rows[:keep]


def cmd_train(s: TrainSettings) -> int:
    if s.lr == 0:
        log.warning("lr=0: training runs but leaves the weights unchanged")
    out = _out(s)
    images = _training_images(s)
    ckpt = out / "checkpoint.bin"
    tcfg = TrainConfig(lr=s.lr, ema_decay=s.ema_decay, batch_size=s.batch_size, T=s.T, T_prime=s.T_prime)
    rng = np.random.default_rng(s.seed)
    if s.resume and ckpt.exists():
        model, meta = load_checkpoint(ckpt)
        rng.bit_generator.state = meta["rng"]
        log.info("resuming from epoch %d", model.epochs_trained)
    else:
        model = DenoiserModel(image_size=images.shape[1], channels=images.shape[3], base_channels=s.base_channels,
                              depth=s.depth, T=s.T, T_prime=s.T_prime, seed=s.seed, skip=s.skip)
    rows = _read_loss_log(out / "loss_log.csv", model.epochs_trained)

    def write_log():
        with open(out / "loss_log.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "mean_loss"])
            writer.writerows(rows)

    start = time.perf_counter()
    while model.epochs_trained < s.epochs:
        model, stats = train_epoch(model, images, tcfg, rng)
        rows.append([str(model.epochs_trained), repr(stats.mean_loss)])
        if model.epochs_trained % s.save_every == 0 or model.epochs_trained == s.epochs:
            save_checkpoint(model, ckpt, {"rng": rng.bit_generator.state})
            write_log()
        log.info("epoch %d loss %.5f", model.epochs_trained, stats.mean_loss)
    save_checkpoint(model, ckpt, {"rng": rng.bit_generator.state})
    write_log()
    log.info("trained to epoch %d in %.1fs", model.epochs_trained, time.perf_counter() - start)
    return 0


# ---------------------------------------------------------------------------
# train-embedder


@dataclass
class TrainEmbedderSettings:
    out: str = "embedder"
    seed: int = 0
    dataset: str | None = None
    toy_identities: int = 150
    toy_samples: int = 6
    toy_seed: int = 2
    epochs: int = 20
    lr: float = 2e-3
    batch_size: int = 64
    dim: int = 32
    width: int = 16
    margin: float = 0.2
    scale: float = 16.0
    augment_probability: float = 0.0


def cmd_train_embedder(s: TrainEmbedderSettings) -> int:
    out = _out(s)
    if s.dataset:
        lst = read_image_list(s.dataset)
        images, labels = lst.load_all(), np.array(lst.identities)
        if any(i == "" for i in lst.identities):
            raise ContractError("embedder training needs an identity column in the image list")
    else:
        ds = generate(ToyFaceConfig(n_identities=s.toy_identities, samples_per_identity=s.toy_samples,
                                    seed=s.toy_seed))
        images, labels = ds.images, ds.identities
    ecfg = EmbedderTrainConfig(epochs=s.epochs, batch_size=s.batch_size, lr=s.lr, scale=s.scale, margin=s.margin,
                               seed=s.seed, augment_probability=s.augment_probability)
    model, history = train_conv_embedder(images, labels, ecfg, dim=s.dim, width=s.width)
    save_embedder(model, out / "embedder.bin")
    with open(out / "loss_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        writer.writerows([[i + 1, repr(v)] for i, v in enumerate(history)])
    return 0


# ---------------------------------------------------------------------------
# embed


@dataclass
class EmbedSettings:
    out: str = "embeddings"
    seed: int = 0
    embedder: str = "projection"
    images: str = ""


def cmd_embed(s: EmbedSettings) -> int:
    out = _out(s)
    lst = read_image_list(s.images)
    images = lst.load_all()
    emb = resolve_embedder(s.embedder, images.shape[1])
    write_embedding_csv(out / "embeddings.csv", lst.refs, emb.embed_batch(images))
    return 0


# ---------------------------------------------------------------------------
# score


@dataclass
class ScoreSettings:
    out: str = "scores"
    seed: int = 0
    checkpoint: str = ""
    embedder: str = "projection"
    images: str = ""
    t_infer: int = 5
    n: int = 10
    use_flip: bool = True
    use_forward_term: bool = True
    use_backward_term: bool = True
    # score with a distilled regressor instead of the diffusion scorer
    regressor: str | None = None


def cmd_score(s: ScoreSettings) -> int:
    out = _out(s)
    lst = read_image_list(s.images)
    start = time.perf_counter()
    if s.regressor:
        model, _ = load_regressor(s.regressor)
        records = []
        for ref in lst.refs:
            try:
                records.append(ScoreRecord(ref, float(score_distilled(model, lst.load(ref)))))
            except (OSError, ValueError) as exc:
                records.append(ScoreRecord(ref, None, f"{type(exc).__name__}: {exc}"))
    else:
        if not s.checkpoint:
            raise ContractError("score needs checkpoint=<denoiser checkpoint> (or regressor=<file>)")
        model, _ = load_checkpoint(s.checkpoint)
        emb = resolve_embedder(s.embedder, model.image_size)
        cfg = ScorerConfig(t_infer=s.t_infer, n=s.n, use_flip=s.use_flip, use_forward_term=s.use_forward_term,
                           use_backward_term=s.use_backward_term, seed=s.seed)
        records = score_batch(lst.refs, model, emb, cfg, lst.load)
    elapsed = time.perf_counter() - start
    ok = write_quality_csv(out / "quality.csv", records)
    failed = write_error_csv(out / "errors.csv", records)
    log.info("scored %d images (%.2f ms each), %d failed", ok, 1000 * elapsed / max(1, len(records)), failed)
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# distill


@dataclass
class DistillSettings:
    out: str = "distill"
    seed: int = 0
    checkpoint: str = ""
    embedder: str = ""
    images: str = ""
    # reuse an existing label CSV instead of running the teacher
    labels: str | None = None
    t_infer: int = 5
    n: int = 10
    val_fraction: float = 0.1
    epochs: int = 300
    lr: float = 3e-3
    hidden: int = 32
    patience: int = 40
    finetune: bool = True
    backbone_lr: float = 3e-4
    flip_augment: bool = True


def fidelity(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    from scipy.stats import pearsonr, spearmanr

    if len(pred) < 3:
        return float("nan"), float("nan")
    return float(pearsonr(pred, target)[0]), float(spearmanr(pred, target)[0])


def cmd_distill(s: DistillSettings) -> int:
    out = _out(s)
    lst = read_image_list(s.images)
    backbone = resolve_embedder(s.embedder) if s.embedder else None
    if backbone is None or isinstance(backbone, ProjectionEmbedder) and s.finetune:
        raise ContractError("distill needs embedder=<trained embedder file> as teacher model and student backbone")
    if s.labels:
        labels = LabelSet.from_csv(s.labels)
        if labels.refs != lst.refs:
            raise ContractError(f"{s.labels} does not list the same images as {s.images}")
    else:
        model, _ = load_checkpoint(s.checkpoint)
        cfg = ScorerConfig(t_infer=s.t_infer, n=s.n, seed=s.seed)
        labels = generate_labels(lst.refs, lst.load, model, backbone, cfg, s.val_fraction)
    labels.to_csv(out / "labels.csv")
    images = lst.load_all()
    rcfg = RegressorConfig(epochs=s.epochs, lr=s.lr, hidden=s.hidden, patience=s.patience, finetune=s.finetune,
                           backbone_lr=s.backbone_lr, flip_augment=s.flip_augment, seed=s.seed)
    reg, history = train_regressor(labels, images, backbone, rcfg)
    save_regressor(reg, out / "regressor.bin", {"best_epoch": history.best_epoch})
    with open(out / "fidelity.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["split", "n", "pearson", "spearman"])
        for split in (TRAIN, VAL):
            mask = labels.mask(split)
            pearson, spearman = fidelity(reg.predict(images[mask]), labels.normalized[mask]) if mask.any() \
                else (float("nan"), float("nan"))
            writer.writerow([split, int(mask.sum()), repr(pearson), repr(spearman)])
            log.info("%s: n=%d pearson %.3f spearman %.3f", split, mask.sum(), pearson, spearman)
    return 0


# ---------------------------------------------------------------------------
# edc


@dataclass
class EdcSettings:
    out: str = "edc"
    seed: int = 0
    embeddings: str = ""
    pairs: str = ""
    # method=path entries, comma separated
    qualities: str = ""
    fmr: float = 1e-3
    discard_limits: tuple[float, ...] = (0.3,)
    plot: bool = False


def cmd_edc(s: EdcSettings) -> int:
    out = _out(s)
    methods = {}
    for item in filter(None, (p.strip() for p in s.qualities.split(","))):
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        methods[name] = path
    if not methods:
        raise ContractError("edc needs qualities=<method=path,...>")
    report = run_protocol(ProtocolConfig(s.embeddings, s.pairs, methods, str(out), s.fmr, s.discard_limits, s.plot))
    for method, r in report.paucs:
        log.info("%s: pAUC@%g raw %.5f normalized %.4f", method, r.discard_limit, r.raw_pauc, r.normalized_pauc)
    return 0


COMMANDS = {
    "toy-dataset": (ToyDatasetSettings, cmd_toy_dataset, "generate a toy face set with manifest and pairs"),
    "train": (TrainSettings, cmd_train, "train the denoiser (resumable)"),
    "train-embedder": (TrainEmbedderSettings, cmd_train_embedder, "train the toy recognition embedder"),
    "embed": (EmbedSettings, cmd_embed, "write an embeddings CSV for an image list"),
    "score": (ScoreSettings, cmd_score, "quality scores for an image list"),
    "distill": (DistillSettings, cmd_distill, "teacher labels and a one-pass regressor"),
    "edc": (EdcSettings, cmd_edc, "EDC curves and pAUC for quality files"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffusion-fiqa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (settings_cls, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text + ". Settings: " + ", ".join(
            f.name for f in dataclasses.fields(settings_cls)))
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    settings_cls, run, _ = COMMANDS[args.command]
    try:
        settings = cfgmod.resolve(settings_cls(), args.config, args.set, seed=args.seed, out=args.out)
        return run(settings)
    except (ContractError, ParseError, TrainingError, OSError) as exc:
        print(f"diffusion-fiqa {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
