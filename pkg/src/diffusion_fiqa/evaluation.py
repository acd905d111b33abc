"""Verification error versus discard: thresholds, EDC curves and partial areas.

Conventions:

* Non-mated scores fix a threshold at the target false-match rate before any
  discarding; it is held constant through the sweep.
* A pair's quality is the lower of its two image qualities.
* The discard axis counts mated pairs. Pairs are dropped one distinct quality
  value at a time, so tied pairs leave together.
* FNMR is the share of surviving mated pairs scoring below the threshold.
* The curve is a step function; the partial area uses left rectangles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .embedder import ExternalEmbedder, cosine_rows
from .errors import ContractError, ParseError

MATED, NON_MATED = "mated", "non-mated"


@dataclass(frozen=True)
class Pair:
    ref_a: str
    ref_b: str
    mated: bool


def _lookup_fn(embeddings) -> Callable[[str], np.ndarray]:
    if isinstance(embeddings, ExternalEmbedder):
        return embeddings.lookup

    def get(ref: str) -> np.ndarray:
        try:
            return embeddings[ref]
        except KeyError:
            raise ContractError(f"no embedding for reference {ref!r}") from None

    return get


def compute_similarities(pairs: Sequence[Pair], embeddings: Mapping[str, np.ndarray] | ExternalEmbedder,
                         chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Cosine score per pair, split into (mated, non-mated), each in input order."""
    get = _lookup_fn(embeddings)
    scores = np.empty(len(pairs))
    for start in range(0, len(pairs), chunk):
        part = pairs[start:start + chunk]
        a = np.stack([get(p.ref_a) for p in part])
        b = np.stack([get(p.ref_b) for p in part])
        scores[start:start + len(part)] = cosine_rows(a, b)
    mated = np.array([p.mated for p in pairs], dtype=bool)
    return scores[mated], scores[~mated]


@dataclass(frozen=True)
class Threshold:
    value: float
    achieved_fmr: float
    fmr_target: float


def solve_threshold(nonmated_scores, fmr_target: float = 1e-3) -> Threshold:
    """Smallest candidate tau with share(non-mated >= tau) <= fmr_target.

    Candidates are the distinct observed scores plus the float just above the
    maximum, which always achieves FMR 0.
    """
    s = np.sort(np.asarray(nonmated_scores, dtype=np.float64))
    if s.size == 0:
        raise ContractError("no non-mated scores")
    if not 0.0 < fmr_target < 1.0:
        raise ContractError(f"fmr_target must lie in (0, 1), got {fmr_target}")
    n = s.size
    candidates = np.append(np.unique(s), np.nextafter(s[-1], np.inf))
    at_or_above = n - np.searchsorted(s, candidates, side="left")
    ok = np.flatnonzero(at_or_above / n <= fmr_target)
    i = ok[0]
    return Threshold(float(candidates[i]), float(at_or_above[i] / n), fmr_target)


@dataclass
class EDCCurve:
    discard: np.ndarray  # strictly increasing, starts at 0
    fnmr: np.ndarray
    threshold: float
    fmr_target: float
    n_pairs: int
    surviving: np.ndarray = field(repr=False, default=None)

    @property
    def fnmr_at_zero(self) -> float:
        return float(self.fnmr[0])

    def value_at(self, fraction: float) -> float:
        """Step-function value: the FNMR of the last point at or left of ``fraction``."""
        return float(self.fnmr[np.searchsorted(self.discard, fraction, side="right") - 1])


def pair_qualities(pairs: Sequence[Pair], qualities: Mapping[str, float]) -> np.ndarray:
    out = np.empty(len(pairs))
    for i, p in enumerate(pairs):
        try:
            out[i] = min(qualities[p.ref_a], qualities[p.ref_b])
        except KeyError as exc:
            raise ContractError(f"no quality for image {exc.args[0]!r}") from None
    return out


def edc_curve(mated_scores, pair_quality, threshold: float, discard_limit: float = 0.3,
              fmr_target: float = float("nan")) -> EDCCurve:
    """Non-interpolated EDC for mated pairs with given scores and pair qualities."""
    scores = np.asarray(mated_scores, dtype=np.float64)
    q = np.asarray(pair_quality, dtype=np.float64)
    if scores.shape != q.shape or scores.ndim != 1:
        raise ContractError(f"{scores.shape[0] if scores.ndim else 0} scores vs {q.shape} qualities")
    m = scores.size
    if m == 0:
        raise ContractError("no mated pairs; every pair is discarded before the first point")
    if not 0.0 <= discard_limit <= 1.0:
        raise ContractError(f"discard_limit must lie in [0, 1], got {discard_limit}")
    if np.any(~np.isfinite(q)):
        raise ContractError("pair qualities must be finite")
    order = np.argsort(q, kind="stable")
    q_sorted = q[order]
    fails_sorted = (scores[order] < threshold).astype(np.int64)
    total_fail = int(fails_sorted.sum())
    # last index of each distinct quality value
    ends = np.flatnonzero(np.append(q_sorted[1:] != q_sorted[:-1], True))
    discarded = ends + 1
    failed_gone = np.cumsum(fails_sorted)[ends]
    keep = (discarded < m) & (discarded / m <= discard_limit)
    discarded, failed_gone = discarded[keep], failed_gone[keep]
    survivors = np.concatenate([[m], m - discarded])
    fails = np.concatenate([[total_fail], total_fail - failed_gone])
    fractions = np.concatenate([[0.0], discarded / m])
    return EDCCurve(fractions, fails / survivors, float(threshold), fmr_target, m, survivors)


def edc_for_pairs(mated_pairs: Sequence[Pair], mated_scores, qualities: Mapping[str, float], threshold: float,
                  discard_limit: float = 0.3, fmr_target: float = float("nan")) -> EDCCurve:
    if any(not p.mated for p in mated_pairs):
        raise ContractError("edc_for_pairs takes mated pairs only")
    return edc_curve(mated_scores, pair_qualities(mated_pairs, qualities), threshold, discard_limit, fmr_target)


@dataclass(frozen=True)
class PAUCResult:
    discard_limit: float
    raw_pauc: float
    normalized_pauc: float  # NaN when fnmr_at_zero == 0
    fnmr_at_zero: float

    @property
    def normalized_defined(self) -> bool:
        return self.fnmr_at_zero > 0


def pauc(curve: EDCCurve, discard_limit: float) -> PAUCResult:
    if curve.discard.size == 0:
        raise ContractError("empty EDC curve")
    if not 0.0 < discard_limit <= 1.0:
        raise ContractError(f"discard_limit must lie in (0, 1], got {discard_limit}")
    x = curve.discard
    inside = x < discard_limit
    right = np.append(x[1:], discard_limit)[inside]
    widths = np.minimum(right, discard_limit) - x[inside]
    raw = float(np.sum(curve.fnmr[inside] * widths))
    f0 = curve.fnmr_at_zero
    norm = raw / (discard_limit * f0) if f0 > 0 else float("nan")
    return PAUCResult(discard_limit, raw, norm, f0)


# ---------------------------------------------------------------------------
# protocols


@dataclass
class Protocol:
    refs: list[str]
    identities: np.ndarray
    embeddings: dict[str, np.ndarray]
    pairs: list[Pair]

    def mated_pairs(self) -> list[Pair]:
        return [p for p in self.pairs if p.mated]


def all_pairs(refs: Sequence[str], identities: Sequence[int], max_nonmated: int | None = None,
              rng: np.random.Generator | None = None) -> list[Pair]:
    """Every mated pair plus all (or a random subset of) non-mated pairs, i < j."""
    ids = np.asarray(identities)
    ii, jj = np.triu_indices(len(refs), k=1)
    same = ids[ii] == ids[jj]
    mated = [Pair(refs[i], refs[j], True) for i, j in zip(ii[same], jj[same])]
    ni, nj = ii[~same], jj[~same]
    if max_nonmated is not None and len(ni) > max_nonmated:
        rng = rng or np.random.default_rng(0)
        pick = np.sort(rng.choice(len(ni), max_nonmated, replace=False))
        ni, nj = ni[pick], nj[pick]
    return mated + [Pair(refs[i], refs[j], False) for i, j in zip(ni, nj)]


def synthetic_protocol(n_identities: int = 40, per_identity: int = 5, dim: int = 32, seed: int = 0,
                       noise_range: tuple[float, float] = (0.2, 1.6)) -> Protocol:
    """Embeddings scattered around random identity centres.

    Each image has its own noise scale, drawn from ``noise_range``; larger
    scales mean poorer images, so mated scores vary in a quality-dependent way.
    """
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((n_identities, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    ids = np.repeat(np.arange(n_identities), per_identity)
    scale = rng.uniform(*noise_range, size=ids.size)
    emb = centres[ids] + scale[:, None] * rng.standard_normal((ids.size, dim)) / math.sqrt(dim)
    refs = [f"id{k:04d}/img{i:05d}" for i, k in enumerate(ids)]
    return Protocol(refs, ids, dict(zip(refs, emb)), all_pairs(refs, ids))


def oracle_qualities(protocol: Protocol, threshold: float) -> dict[str, float]:
    """Per image: the smallest margin (score - threshold) over its mated pairs."""
    mated = protocol.mated_pairs()
    scores, _ = compute_similarities(mated, protocol.embeddings)
    best = {ref: math.inf for ref in protocol.refs}
    for p, s in zip(mated, scores):
        for ref in (p.ref_a, p.ref_b):
            best[ref] = min(best[ref], s - threshold)
    return {ref: (v if math.isfinite(v) else 0.0) for ref, v in best.items()}


def evaluate(protocol: Protocol, qualities: Mapping[str, float], fmr_target: float = 1e-3,
             discard_limit: float = 0.3) -> tuple[EDCCurve, PAUCResult]:
    mated = protocol.mated_pairs()
    mated_scores, nonmated_scores = compute_similarities(protocol.pairs, protocol.embeddings)
    tau = solve_threshold(nonmated_scores, fmr_target)
    curve = edc_for_pairs(mated, mated_scores, qualities, tau.value, discard_limit, fmr_target)
    return curve, pauc(curve, discard_limit)


# ---------------------------------------------------------------------------
# files


def read_pairs_csv(path) -> list[Pair]:
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["ref_a", "ref_b", "label"]:
            raise ParseError(f"{path}: expected header ref_a,ref_b,label, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 or row[2] not in (MATED, NON_MATED):
                raise ParseError(f"{path}: bad pair row {row!r}", line=lineno)
            pairs.append(Pair(row[0], row[1], row[2] == MATED))
    return pairs


def write_pairs_csv(path, pairs: Sequence[Pair]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ref_a", "ref_b", "label"])
        for p in pairs:
            writer.writerow([p.ref_a, p.ref_b, MATED if p.mated else NON_MATED])


def read_quality_csv(path) -> dict[str, float]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["path", "quality"]:
            raise ParseError(f"{path}: expected header path,quality, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                value = float(row[1])
            except (IndexError, ValueError):
                raise ParseError(f"{path}: bad quality row {row!r}", line=lineno) from None
            if not math.isfinite(value):
                raise ParseError(f"{path}: non-finite quality for {row[0]!r}", line=lineno)
            out[row[0]] = value
    return out


def write_quality_map(path, qualities: Mapping[str, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "quality"])
        for ref, q in qualities.items():
            writer.writerow([ref, f"{q:.9g}"])


def write_edc_csv(path, curve: EDCCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["discard_fraction", "fnmr"])
        for x, y in zip(curve.discard, curve.fnmr):
            writer.writerow([repr(float(x)), repr(float(y))])


PAUC_HEADER = ["method", "fmr", "discard_limit", "raw_pauc", "normalized_pauc", "fnmr_at_zero"]


@dataclass
class ProtocolConfig:
    embeddings: str
    pairs: str
    qualities: dict[str, str]  # method name -> qualities CSV
    out_dir: str
    fmr: float = 1e-3
    discard_limits: tuple[float, ...] = (0.3,)
    plot: bool = False


@dataclass
class ProtocolReport:
    threshold: Threshold
    curves: dict[str, EDCCurve]
    paucs: list[tuple[str, PAUCResult]]
    files: list[Path]


def run_protocol(cfg: ProtocolConfig) -> ProtocolReport:
    from .embedder import load_embedder

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    embedder = load_embedder(cfg.embeddings)
    if not isinstance(embedder, ExternalEmbedder):
        raise ContractError(f"{cfg.embeddings}: evaluation needs a table of precomputed embeddings")
    pairs = read_pairs_csv(cfg.pairs)
    mated = [p for p in pairs if p.mated]
    if not mated or len(mated) == len(pairs):
        raise ContractError("the pair list needs both mated and non-mated pairs")
    mated_scores, nonmated_scores = compute_similarities(pairs, embedder)
    tau = solve_threshold(nonmated_scores, cfg.fmr)
    limit = max(cfg.discard_limits)
    curves, rows, files = {}, [], []
    for method, qpath in cfg.qualities.items():
        q = read_quality_csv(qpath)
        curve = edc_for_pairs(mated, mated_scores, q, tau.value, limit, cfg.fmr)
        curves[method] = curve
        path = out / f"edc_{method}.csv"
        write_edc_csv(path, curve)
        files.append(path)
        rows.extend((method, pauc(curve, d)) for d in cfg.discard_limits)
    table = out / "pauc.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PAUC_HEADER)
        for method, r in rows:
            writer.writerow([method, repr(cfg.fmr), repr(r.discard_limit), repr(r.raw_pauc),
                             repr(r.normalized_pauc), repr(r.fnmr_at_zero)])
    files.append(table)
    if cfg.plot:
        files.append(plot_edc(curves, out / "edc.svg", limit))
    return ProtocolReport(tau, curves, rows, files)


def plot_edc(curves: Mapping[str, EDCCurve], path, discard_limit: float) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "edc"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, c in curves.items():
        xs = np.append(c.discard, discard_limit)
        ys = np.append(c.fnmr, c.fnmr[-1])
        ax.step(xs, ys, where="post", label=method)
    ax.set_xlabel("discard fraction")
    ax.set_ylabel("FNMR")
    ax.set_xlim(0, discard_limit)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
