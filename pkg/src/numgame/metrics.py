"""Analysis of emergent codes.

Precision is measured as the conditional entropy H(N|M) of numerosity given
message, in bits, with the plug-in estimator. Sketches are first discretised
by k-means on downsampled pixels so the same machinery applies to both
channels.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import kernels
from .errors import (
    EmptySelection,
    EmptyTable,
    MissingClass,
    MissingTranscript,
    TooFewSketches,
    WrongChannel,
)
from .transcript import Transcript

EMPTY_KEY = "<eos>"
DOWNSAMPLE_SIDE = 16


def accuracy(t: Transcript, classes: Optional[Sequence[int]] = None) -> float:
    records = t.records if classes is None else t.select(classes).records
    if not records:
        raise EmptySelection("no records left after filtering")
    return sum(bool(r["correct"]) for r in records) / len(records)


def message_key(tokens: Sequence[int], use_terminator: bool = True, terminator: int = 0) -> str:
    """Canonical id of a message: its tokens up to (excluding) the first terminator.

    >>> message_key([2, 1, 0, 1, 2])
    '2,1'
    """
    toks = [int(x) for x in tokens]
    if use_terminator and terminator in toks:
        toks = toks[: toks.index(terminator)]
    return ",".join(str(x) for x in toks) if toks else EMPTY_KEY


# --------------------------------------------------------------------------
# joint tables


@dataclass
class CodeTable:
    """Joint counts of (numerosity, message key).

    Rows follow ``classes`` (ascending); columns follow ``keys`` in order of
    first occurrence.
    """

    classes: List[int]
    keys: List[str]
    counts: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[int, object]]) -> "CodeTable":
        pairs = [(int(n), str(m)) for n, m in pairs]
        classes = sorted({n for n, _ in pairs})
        keys: List[str] = []
        seen = set()
        for _, m in pairs:
            if m not in seen:
                seen.add(m)
                keys.append(m)
        row = {c: i for i, c in enumerate(classes)}
        col = {k: j for j, k in enumerate(keys)}
        counts = np.zeros((len(classes), len(keys)), dtype=np.int64)
        for n, m in pairs:
            counts[row[n], col[m]] += 1
        return cls(classes, keys, counts)

    @classmethod
    def from_transcript(cls, t: Transcript, key: str = "key") -> "CodeTable":
        return cls.from_pairs((r["sender_n"], r[key]) for r in t.records)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge_columns(self, a: str, b: str) -> "CodeTable":
        """Table with column ``b`` folded into column ``a``."""
        ia, ib = self.keys.index(a), self.keys.index(b)
        counts = self.counts.copy()
        counts[:, ia] += counts[:, ib]
        keep = [j for j in range(len(self.keys)) if j != ib]
        return CodeTable(list(self.classes), [self.keys[j] for j in keep], counts[:, keep])


def _plogp_bits(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p, dtype=np.float64)
    nz = p > 0
    out[nz] = p[nz] * np.log2(p[nz])
    return out


def conditional_entropy(table: CodeTable) -> float:
    """H(N|M) in bits: -sum_m P(m) sum_n P(n|m) log2 P(n|m)."""
    counts = np.asarray(table.counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise EmptyTable("code table has no counts")
    col = counts.sum(axis=0)
    used = col > 0
    cond = counts[:, used] / col[used]
    # + 0.0 turns a negative zero into 0.0
    return float(-(col[used] / total * _plogp_bits(cond).sum(axis=0)).sum()) + 0.0


def class_entropy(table: CodeTable) -> float:
    """H(N) in bits from the table's row marginal."""
    counts = np.asarray(table.counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise EmptyTable("code table has no counts")
    return float(-_plogp_bits(counts.sum(axis=1) / total).sum())


def mapping_matrix(table: CodeTable) -> Tuple[np.ndarray, List[int], List[str]]:
    """Counts with rows = numerosities and columns = keys by first occurrence."""
    return table.counts.copy(), list(table.classes), list(table.keys)


def mean_length(t: Transcript) -> float:
    if not t.records:
        raise EmptySelection("empty transcript")
    return float(np.mean([r["eff_len"] for r in t.records]))


def length_by_class(t: Transcript) -> Dict[int, float]:
    out: Dict[int, List[int]] = {}
    for r in t.records:
        out.setdefault(r["sender_n"], []).append(r["eff_len"])
    return {c: float(np.mean(v)) for c, v in sorted(out.items())}


# --------------------------------------------------------------------------
# sketches


def downsample(canvases, side: int = DOWNSAMPLE_SIDE) -> np.ndarray:
    """Area-average rasters to ``side x side`` and flatten: (N, side*side)."""
    x = torch.as_tensor(np.asarray(canvases, dtype=np.float64))
    if x.dim() == 2:
        x = x[None]
    pooled = torch.nn.functional.adaptive_avg_pool2d(x[:, None], side)
    return pooled.reshape(x.shape[0], -1).numpy()


def sketch_canvases(t: Transcript, side: Optional[int] = None) -> np.ndarray:
    """Re-render the stroke records of a sketch-channel transcript."""
    from .agents import rasterize

    if t.channel != "sketch":
        raise WrongChannel("transcript carries no strokes")
    side = t.side if side is None else side
    strokes = torch.tensor([r["strokes"] for r in t.records], dtype=torch.float64)
    with torch.no_grad():
        return rasterize(strokes, side).numpy()


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, D)
    labels: np.ndarray  # (N,)
    inertia: float
    feature_side: int = DOWNSAMPLE_SIDE

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    def predict_features(self, feats: np.ndarray) -> np.ndarray:
        return kernels.nearest_centroid(feats, self.centroids)[0]

    def predict(self, canvases) -> np.ndarray:
        return self.predict_features(downsample(canvases, self.feature_side))


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = kernels.nearest_centroid(x, np.asarray(centers))[1]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, kernels.nearest_centroid(x, x[idx][None])[1])
    return np.asarray(centers)


def _lloyd(x, centers, max_iter=100):
    labels, d2 = kernels.nearest_centroid(x, centers)
    for _ in range(max_iter):
        new = centers.copy()
        for c in range(centers.shape[0]):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-fit point
                far = int(np.argmax(d2))
                new[c] = x[far]
                d2[far] = 0.0
        new_labels, d2 = kernels.nearest_centroid(x, new)
        centers = new
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels, float(d2.sum())


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, restarts: int = 10) -> ClusterModel:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise TooFewSketches(f"{x.shape[0]} points for k={k}")
    if k < 1:
        raise ValueError("k must be >= 1")
    best = None
    for _ in range(restarts):
        centers, labels, inertia = _lloyd(x, _kmeans_pp(x, k, rng))
        if best is None or inertia < best.inertia:
            best = ClusterModel(centers, labels, inertia)
    return best


def cluster_sketches(sketches, k: int, rng: np.random.Generator, restarts: int = 10,
                     feature_side: int = DOWNSAMPLE_SIDE) -> ClusterModel:
    """k-means (k-means++ seeding, best of ``restarts``) on downsampled pixels."""
    feats = downsample(sketches, feature_side)
    if feats.shape[0] < k:
        raise TooFewSketches(f"{feats.shape[0]} sketches for k={k}")
    model = kmeans(feats, k, rng, restarts)
    model.feature_side = feature_side
    return model


def silhouette(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient (0 when fewer than two clusters)."""
    x = np.asarray(x, dtype=np.float64)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        return 0.0
    d = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1), 0.0))
    s = np.zeros(len(x))
    for i in range(len(x)):
        own = labels == labels[i]
        n_own = own.sum() - 1
        if n_own == 0:
            continue
        a = d[i, own].sum() / n_own
        b = min(d[i, labels == c].mean() for c in uniq if c != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


def select_k(sketches, k_range: Iterable[int], rng: np.random.Generator, restarts: int = 10) -> ClusterModel:
    """Pick the k with the highest silhouette score."""
    feats = downsample(sketches)
    best, best_s = None, -np.inf
    for k in k_range:
        if k > len(feats):
            break
        m = kmeans(feats, k, rng, restarts)
        s = silhouette(feats, m.labels)
        if s > best_s:
            best, best_s = m, s
    if best is None:
        raise TooFewSketches("no admissible k")
    return best


def cluster_purity(labels: Sequence[int], classes: Sequence[int]) -> float:
    """Fraction of items whose cluster's majority class equals their own class."""
    labels = np.asarray(labels)
    classes = np.asarray(classes)
    if labels.size == 0:
        raise EmptySelection("no items")
    hit = 0
    for c in np.unique(labels):
        members = classes[labels == c]
        hit += Counter(members.tolist()).most_common(1)[0][1]
    return hit / labels.size


def attach_cluster_keys(t: Transcript, model: ClusterModel, key: str = "key") -> Transcript:
    """Copy of a sketch transcript whose records carry ``key = "c<cluster>"``."""
    labels = model.predict(sketch_canvases(t))
    records = [dict(r, **{key: f"c{int(l)}"}) for r, l in zip(t.records, labels)]
    return Transcript(t.channel, records, t.use_terminator, t.side)


def pairwise_dissimilarity(groups: Dict[int, np.ndarray]) -> Tuple[np.ndarray, List[int]]:
    """Mean Euclidean distance between downsampled sketches of each class pair.

    The diagonal is the mean over distinct intra-class pairs (0 for a single sketch).
    """
    classes = sorted(groups)
    if not classes:
        raise MissingClass("no classes given")
    feats = {}
    for c in classes:
        arr = np.asarray(groups[c])
        if arr.shape[0] == 0:
            raise MissingClass(f"class {c} has no sketches")
        feats[c] = downsample(arr)
    m = np.zeros((len(classes), len(classes)))
    for i, a in enumerate(classes):
        for j in range(i, len(classes)):
            b = classes[j]
            if i == j:
                n = feats[a].shape[0]
                v = 0.0 if n < 2 else kernels.mean_pair_distance(feats[a], feats[a]) * n / (n - 1)
            else:
                v = kernels.mean_pair_distance(feats[a], feats[b])
            m[i, j] = m[j, i] = v
    return m, classes


def stroke_span(strokes, side: int = 64) -> float:
    """Bounding-box diagonal of all stroke endpoints, in pixels."""
    s = np.asarray(strokes, dtype=np.float64).reshape(-1, 4)
    xs = np.concatenate([s[:, 0], s[:, 2]]) * side
    ys = np.concatenate([s[:, 1], s[:, 3]]) * side
    return float(math.hypot(xs.max() - xs.min(), ys.max() - ys.min()))


def pearson(x: Sequence[float], y: Sequence[float]) -> Tuple[float, bool]:
    """Pearson r and a flag that is True when either variance is zero (r := 0)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if denom <= 1e-300:
        return 0.0, True
    return float((dx * dy).sum() / denom), False


def span_correlation(t: Transcript, dataset) -> Tuple[float, bool]:
    """Pearson r between the sender image's dot span and its sketch's stroke span.

    Returns ``(r, degenerate)``; ``degenerate`` flags a zero-variance input.
    """
    from .stimuli import dot_span

    if t.channel != "sketch":
        raise WrongChannel("span correlation needs a sketch-channel transcript")
    if not t.records:
        raise EmptySelection("empty transcript")
    dots, strokes = [], []
    for r in t.records:
        img = dataset.images[r["sender_n"]][r["sender_i"]]
        dots.append(dot_span(img))
        strokes.append(stroke_span(r["strokes"], img.side))
    return pearson(dots, strokes)


# --------------------------------------------------------------------------
# generalisation


@dataclass
class GeneralisationCell:
    novel: int
    accuracy: float
    in_dist_accuracy: float
    novel_accuracy: float
    novel_mapping: Dict[str, float]
    reuse_fraction: float
    ceiling_key: str
    ceiling_reuse: bool
    cond_entropy: float
    episodes: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def modal_key(t: Transcript, cls: int, key: str = "key") -> str:
    keys = [r[key] for r in t.records if r["sender_n"] == cls]
    if not keys:
        raise MissingClass(f"no records for class {cls}")
    counts = Counter(keys)
    top = max(counts.values())
    return next(k for k in keys if counts[k] == top)


def generalisation_report(train_classes: Sequence[int], transcripts: Dict[int, Transcript],
                          key: str = "key") -> Dict[int, GeneralisationCell]:
    """Per novel class: accuracy split, where its messages land, and ceiling reuse.

    ``transcripts`` maps each novel numerosity to the transcript of its test
    set (train classes plus that one class). Records must carry ``key``.
    """
    train_classes = sorted(int(c) for c in train_classes)
    top = train_classes[-1]
    out: Dict[int, GeneralisationCell] = {}
    for novel, t in sorted(transcripts.items()):
        if t is None or not len(t):
            raise MissingTranscript(f"no transcript for test set with class {novel}")
        nov = t.select([novel])
        if not len(nov):
            raise MissingTranscript(f"transcript for class {novel} has no novel-class episodes")
        ceiling = modal_key(t, top, key)
        keys = Counter(r[key] for r in nov.records)
        reuse = keys.get(ceiling, 0) / len(nov)
        out[novel] = GeneralisationCell(
            novel=int(novel),
            accuracy=accuracy(t),
            in_dist_accuracy=accuracy(t, train_classes),
            novel_accuracy=accuracy(nov),
            novel_mapping={k: v / len(nov) for k, v in keys.most_common()},
            reuse_fraction=reuse,
            ceiling_key=ceiling,
            ceiling_reuse=reuse > 0.5,
            cond_entropy=conditional_entropy(CodeTable.from_transcript(t, key)),
            episodes=len(t),
        )
    return out
