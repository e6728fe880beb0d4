"""Numerosity stimuli: dot images whose black area is held in a fixed band.

Each image shows ``n`` non-overlapping black disks on a white canvas. The total
black area is drawn independently of ``n`` so that area carries no numerosity
information.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import kernels
from .errors import InfeasibleConstraint, InvalidNumerosity

DEFAULT_SIDE = 64
DEFAULT_AREA = (0.05, 0.10)
MIN_RADIUS = 3.0
DIRICHLET_CONCENTRATION = 5.0
RETRY_BUDGET = 10_000
AREA_REDRAW_EVERY = 200
# bumped whenever the sampling procedure changes, so cached datasets are not reused
GENERATOR_VERSION = 2
EDGE_MARGIN = 1.0
# free space kept between disks so their rasters never touch
DOT_GAP = 2.0
# ranges narrower than twice this are treated as a target value with slack
QUANTISATION_SLACK = 0.002

FREQUENCY_PROFILES = {
    "uniform": (700, 700, 700, 700, 700),
    "increase": (100, 200, 300, 400, 700),
    "decrease": (700, 400, 300, 200, 100),
}


@dataclass
class DotImage:
    canvas: np.ndarray  # (S, S) float64, 1 = white, 0 = black
    dots: np.ndarray  # (n, 3): centre x, centre y, radius (pixels)
    numerosity: int
    black_fraction: float
    instance: int = -1  # index within its class, -1 when standalone

    @property
    def side(self) -> int:
        return int(self.canvas.shape[0])


def count_components(canvas: np.ndarray, threshold: float = 0.5) -> int:
    """Number of 4-connected components of pixels darker than ``threshold``."""
    return kernels.label_components(np.asarray(canvas) < threshold)[1]


def dot_span(image: DotImage) -> float:
    """Diagonal of the bounding box enclosing every dot's extent."""
    d = image.dots
    x_lo = np.min(d[:, 0] - d[:, 2])
    x_hi = np.max(d[:, 0] + d[:, 2])
    y_lo = np.min(d[:, 1] - d[:, 2])
    y_hi = np.max(d[:, 1] + d[:, 2])
    return float(math.hypot(x_hi - x_lo, y_hi - y_lo))


def _place(radii, side, rng, max_draws):
    """Sequential placement, largest disk first. None if any disk fails."""
    order = np.argsort(-radii, kind="stable")
    centers = np.zeros((len(radii), 2))
    placed: List[int] = []
    for idx in order:
        r = radii[idx]
        lo = r + EDGE_MARGIN
        hi = side - r - EDGE_MARGIN
        if hi <= lo:
            return None
        for _ in range(max_draws):
            c = rng.uniform(lo, hi, size=2)
            ok = True
            for j in placed:
                if math.hypot(c[0] - centers[j, 0], c[1] - centers[j, 1]) < r + radii[j] + DOT_GAP:
                    ok = False
                    break
            if ok:
                centers[idx] = c
                placed.append(idx)
                break
        else:
            return None
    return centers


def generate_dot_image(
    n: int,
    canvas_side: int = DEFAULT_SIDE,
    area_range: Tuple[float, float] = DEFAULT_AREA,
    rng: Optional[np.random.Generator] = None,
    min_radius: float = MIN_RADIUS,
    retry_budget: int = RETRY_BUDGET,
) -> DotImage:
    """Draw one image with ``n`` dots covering a fraction of the canvas in ``area_range``.

    Total area is uniform in ``area_range`` (kept across up to
    ``AREA_REDRAW_EVERY`` failed attempts); it is split across the
    dots by a symmetric Dirichlet draw (redrawn until every radius is at least
    ``min_radius``), then centres are placed uniformly with overlap rejection.
    The black fraction is measured on the raster and must itself lie in
    ``area_range``. Each full attempt counts against ``retry_budget``.

    Raises:
        InvalidNumerosity: ``n < 1``.
        InfeasibleConstraint: the constraints cannot be met, or the budget ran out.
    """
    if int(n) != n or n < 1:
        raise InvalidNumerosity(f"numerosity must be a positive integer, got {n!r}")
    n = int(n)
    lo, hi = float(area_range[0]), float(area_range[1])
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"area_range must lie inside (0, 1), got {area_range}")
    if rng is None:
        rng = np.random.default_rng()
    side = int(canvas_side)
    total_px = side * side
    if n * math.pi * min_radius**2 > hi * total_px:
        raise InfeasibleConstraint(
            f"{n} dots of radius >= {min_radius}px exceed {hi:.0%} of a {side}px canvas",
            numerosity=n,
        )
    if hi - lo < 2 * QUANTISATION_SLACK:
        accept = (lo - QUANTISATION_SLACK, hi + QUANTISATION_SLACK)
    else:
        accept = (lo, hi)

    alpha = np.full(n, DIRICHLET_CONCENTRATION)
    # Redrawing the target area after every failed split would favour large
    # totals for large n and tie area to numerosity, so it is kept for a block
    # of attempts and only redrawn when it looks infeasible.
    for attempt in range(retry_budget):
        if attempt % AREA_REDRAW_EVERY == 0:
            frac = rng.uniform(lo, hi) if hi > lo else lo
        shares = rng.dirichlet(alpha) if n > 1 else np.ones(1)
        radii = np.sqrt(frac * total_px * shares / math.pi)
        if radii.min() < min_radius:
            continue
        centers = _place(radii, side, rng, max_draws=50)
        if centers is None:
            continue
        canvas = kernels.paint_disks(side, centers, radii)
        measured = 1.0 - float(canvas.mean())
        if not (accept[0] <= measured <= accept[1]):
            continue
        if count_components(canvas) != n:
            continue
        dots = np.column_stack([centers, radii])
        return DotImage(canvas=canvas, dots=dots, numerosity=n, black_fraction=measured)
    raise InfeasibleConstraint(
        f"no valid placement for n={n} on a {side}px canvas within {retry_budget} attempts",
        numerosity=n,
    )


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    classes: List[int]
    counts: List[int]
    canvas_side: int = DEFAULT_SIDE
    area_range: Tuple[float, float] = DEFAULT_AREA
    seed: int = 0
    split: float = 0.85
    min_radius: float = MIN_RADIUS

    def __post_init__(self):
        self.classes = [int(c) for c in self.classes]
        self.counts = [int(c) for c in self.counts]
        self.area_range = (float(self.area_range[0]), float(self.area_range[1]))
        if len(self.classes) != len(self.counts):
            raise ValueError("classes and counts must have equal length")
        if not self.classes:
            raise ValueError("at least one class is required")
        if any(b <= a for a, b in zip(self.classes, self.classes[1:])):
            raise ValueError(f"classes must be strictly increasing: {self.classes}")
        if min(self.classes) < 1:
            raise InvalidNumerosity(f"classes must be >= 1: {self.classes}")
        if min(self.counts) < 1:
            raise ValueError(f"every count must be >= 1: {self.counts}")
        lo, hi = self.area_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"area_range must lie inside (0, 1): {self.area_range}")
        if not (0.0 < self.split <= 1.0):
            raise ValueError(f"split must be in (0, 1]: {self.split}")

    @classmethod
    def from_profile(cls, profile: str, classes: Sequence[int] = (1, 2, 3, 4, 5), scale: float = 1.0, **kw):
        """Uniform / Increase / Decrease frequency profiles, optionally scaled down.

        ``scale=0.2`` gives the desk-scale counts 140/class and [20, 40, 60, 80, 140].
        """
        base = FREQUENCY_PROFILES[profile.lower()]
        if profile.lower() == "uniform":
            base = (base[0],) * len(classes)
        elif len(classes) != len(base):
            raise ValueError(f"profile {profile!r} is defined for {len(base)} classes")
        counts = [max(1, int(round(c * scale))) for c in base]
        return cls(classes=list(classes), counts=counts, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["area_range"] = list(self.area_range)
        return d

    def digest(self) -> str:
        blob = json.dumps({**self.to_dict(), "generator": GENERATOR_VERSION}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_counts(text: str, classes: Sequence[int]) -> List[int]:
    """Parse ``uniform:700``, ``increase[:scale]``, ``decrease[:scale]``, ``140`` or ``100,200,...``."""
    text = text.strip()
    name, _, arg = text.partition(":")
    name = name.lower()
    if name == "uniform":
        return [int(arg or 700)] * len(classes)
    if name in FREQUENCY_PROFILES:
        scale = float(arg) if arg else 1.0
        return DatasetSpec.from_profile(name, classes, scale=scale).counts
    counts = [int(c) for c in text.split(",")]
    if len(counts) == 1:
        return counts * len(classes)
    if len(counts) != len(classes):
        raise ValueError(f"{len(counts)} counts given for {len(classes)} classes")
    return counts


def parse_classes(text: str) -> List[int]:
    """``1..5`` or ``1,2,4,5`` (ranges and lists may be mixed)."""
    out: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


_SPLIT_STREAM = 2**31 - 1


def _substream(digest: str, seed: int, cls: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(digest, 16) & 0xFFFFFFFF, int(seed), int(cls), int(index)])


@dataclass
class Dataset:
    spec: DatasetSpec
    images: Dict[int, List[DotImage]]
    train_idx: Dict[int, np.ndarray]
    test_idx: Dict[int, np.ndarray]
    digest: str = field(default="")

    @property
    def classes(self) -> List[int]:
        return list(self.spec.classes)

    def pool(self, cls: int, split: str = "test") -> List[DotImage]:
        """Images of one class from ``train``, ``test`` or ``all``."""
        imgs = self.images[cls]
        if split == "all":
            return imgs
        idx = self.train_idx[cls] if split == "train" else self.test_idx[cls]
        return [imgs[i] for i in idx]

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "spec": self.spec.to_dict(),
            "digest": self.digest,
            "seed": self.spec.seed,
            "counts": {str(c): len(self.images[c]) for c in self.spec.classes},
            "split": {
                str(c): {"train": self.train_idx[c].tolist(), "test": self.test_idx[c].tolist()}
                for c in self.spec.classes
            },
            "dots": {
                str(c): [img.dots.tolist() for img in self.images[c]] for c in self.spec.classes
            },
        }
        for c in self.spec.classes:
            for i, img in enumerate(self.images[c]):
                px = np.round(img.canvas * 255).astype(np.uint8)
                Image.fromarray(px, mode="L").save(out / f"n{c}_i{i}.png")
        tmp = out / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=1))
        os.replace(tmp, out / "manifest.json")
        return out

    @classmethod
    def load(cls, in_dir) -> "Dataset":
        src = Path(in_dir)
        manifest = json.loads((src / "manifest.json").read_text())
        spec = DatasetSpec(**manifest["spec"])
        images: Dict[int, List[DotImage]] = {}
        train, test = {}, {}
        for c in spec.classes:
            imgs = []
            for i, dots in enumerate(manifest["dots"][str(c)]):
                canvas = np.asarray(Image.open(src / f"n{c}_i{i}.png"), dtype=np.float64) / 255.0
                imgs.append(
                    DotImage(
                        canvas=canvas,
                        dots=np.asarray(dots, dtype=np.float64),
                        numerosity=c,
                        black_fraction=1.0 - float(canvas.mean()),
                        instance=i,
                    )
                )
            images[c] = imgs
            train[c] = np.asarray(manifest["split"][str(c)]["train"], dtype=np.int64)
            test[c] = np.asarray(manifest["split"][str(c)]["test"], dtype=np.int64)
        return cls(spec=spec, images=images, train_idx=train, test_idx=test, digest=manifest["digest"])


def build_dataset(spec: DatasetSpec) -> Dataset:
    """Generate every image of ``spec`` and split each class into train/test.

    Image ``i`` of class ``c`` draws from its own stream derived from the
    digest, so the result is bit-identical for a given spec.
    """
    digest = spec.digest()
    images: Dict[int, List[DotImage]] = {}
    train, test = {}, {}
    for c, count in zip(spec.classes, spec.counts):
        imgs = []
        for i in range(count):
            rng = _substream(digest, spec.seed, c, i)
            try:
                img = generate_dot_image(c, spec.canvas_side, spec.area_range, rng, min_radius=spec.min_radius)
            except InfeasibleConstraint as exc:
                raise InfeasibleConstraint(f"class {c}: {exc}", numerosity=c) from exc
            img.instance = i
            imgs.append(img)
        images[c] = imgs
        perm = _substream(digest, spec.seed, c, _SPLIT_STREAM).permutation(count)
        if count == 1 or spec.split >= 1.0:
            n_train = 1
        else:
            n_train = min(max(1, int(round(spec.split * count))), count - 1)
        train[c] = np.sort(perm[:n_train])
        test[c] = np.sort(perm[n_train:])
    return Dataset(spec=spec, images=images, train_idx=train, test_idx=test, digest=digest)
