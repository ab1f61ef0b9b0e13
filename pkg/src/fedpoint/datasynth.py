"""Synthetic multi-site slide generation, subsampling, and slide file I/O.

Each simulated site holds slides drawn from a Gaussian feature background
around a shared unit mean vector (a site-specific mean shift models
preparation differences); positive slides additionally carry a small
fraction of "signal" points whose positions form 1-3 tight spatial
clusters and whose features are shifted along one fixed direction,
orthogonal to the background mean and shared by all sites.  Around a unit
background mean the background is tight in cosine geometry while the
signal cluster sits far away, which is the regime that feature-space
sampling is meant to exploit; noise is scaled by 1/sqrt(d) so
``noise_scale`` is the typical noise vector length, directly comparable
to the unit signal shift, in any dimension.

Generation is a pure function of :class:`SiteSpec`: all randomness comes
from Philox streams keyed on the spec's seed, and arrays are rounded
through 32-bit floats (the storage precision) before use, so in-memory
datasets and datasets round-tripped through slide files are bit-identical.

Slide file format (little-endian): magic ``PTWS``, u16 version=1, u32 N,
u32 D, u8 label, then N rows of (3+D) IEEE-754 32-bit floats, positions
first.  Manifests are UTF-8 text, one ``id<TAB>label<TAB>path`` line per
slide; ``#`` lines are comments.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sampling import PointSet
from .seeding import rng_for

SLIDE_MAGIC = b"PTWS"
SLIDE_VERSION = 1

SIGNAL_SHIFT = 1.0  # feature-space offset of signal points along the signal direction
SITE_MEAN_SCALE = 0.1  # length scale of the per-site background mean shift

SPLIT_NAMES = ("train", "val", "test")


class DataError(Exception):
    """Dataset files are missing, malformed, or inconsistent."""


class SlideFormatError(DataError):
    """A slide file failed magic/version/size validation."""


@dataclass(frozen=True)
class SiteSpec:
    """Recipe for one simulated site's slide collection."""

    site_id: str
    n_slides: int
    positive_fraction: float
    points_per_slide: int = 2048
    feature_dim: int = 256
    signal_fraction: float = 0.03
    cluster_spread: float = 0.02
    noise_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_slides < 1:
            raise ValueError("n_slides must be positive")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError(f"positive_fraction must be in (0, 1), got {self.positive_fraction}")
        if self.points_per_slide < 1024:
            raise ValueError("points_per_slide must be at least 1024")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be at least 1")
        if not 0.0 < self.signal_fraction <= 0.2:
            raise ValueError(f"signal_fraction must be in (0, 0.2], got {self.signal_fraction}")
        if self.cluster_spread <= 0 or self.noise_scale < 0:
            raise ValueError("cluster_spread must be positive, noise_scale non-negative")


@dataclass
class GeneratedSite:
    """Slides for one site plus the 60/10/30 split assignment."""

    spec: SiteSpec
    slides: list[PointSet]
    splits: dict[str, list[int]]  # split name -> slide indices
    signal_counts: dict[str, int]  # slide uid -> number of signal points

    def split_slides(self, split: str) -> list[PointSet]:
        return [self.slides[i] for i in self.splits[split]]


def background_mean(feature_dim: int) -> np.ndarray:
    """Unit background mean vector shared by every site (fixed per dimension)."""
    v = rng_for("background-mean", feature_dim).standard_normal(feature_dim)
    return v / np.linalg.norm(v)


def signal_direction(feature_dim: int) -> np.ndarray:
    """Unit direction of the positive-class feature shift (shared across sites).

    Orthogonalized against the background mean so the shift changes the
    direction of signal features, not just their length.
    """
    mu = background_mean(feature_dim)
    v = rng_for("signal-direction", feature_dim).standard_normal(feature_dim)
    v = v - (v @ mu) * mu
    return v / np.linalg.norm(v)


def _storage_round(arr: np.ndarray) -> np.ndarray:
    # round through the 32-bit storage precision so memory == file round trip
    return arr.astype(np.float32).astype(np.float64)


def _clustered_points(rng: np.random.Generator, n_signal: int, cluster_spread: float):
    """Positions for signal points: 1-3 tight clusters inside the unit square."""
    n_clusters = int(rng.integers(1, 4))
    centers = rng.uniform(0.1, 0.9, size=(n_clusters, 2))
    assign = rng.integers(0, n_clusters, size=n_signal)
    return centers[assign] + cluster_spread * rng.standard_normal((n_signal, 2))


def make_slide_points(
    rng: np.random.Generator,
    n_points: int,
    feature_dim: int,
    label: int,
    signal_fraction: float,
    cluster_spread: float,
    noise_scale: float,
    site_mean: np.ndarray,
    direction: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Raw (positions, features, n_signal) for one slide; signal points first."""
    n_signal = int(round(signal_fraction * n_points)) if label == 1 else 0
    xy = np.empty((n_points, 2))
    if n_signal:
        xy[:n_signal] = _clustered_points(rng, n_signal, cluster_spread)
    xy[n_signal:] = rng.uniform(0.0, 1.0, size=(n_points - n_signal, 2))
    positions = np.concatenate([xy, np.ones((n_points, 1))], axis=1)

    # 1/sqrt(d) keeps the typical noise vector length at noise_scale
    noise = (noise_scale / np.sqrt(feature_dim)) * rng.standard_normal((n_points, feature_dim))
    features = background_mean(feature_dim) + site_mean + noise
    if n_signal:
        features[:n_signal] += SIGNAL_SHIFT * direction
    return positions, features, n_signal


def _largest_remainder(count: int, split_sizes: list[int], total: int) -> list[int]:
    """Allocate `count` items across splits proportionally to split sizes."""
    ideal = [count * s / total for s in split_sizes]
    alloc = [math.floor(v) for v in ideal]
    remainder = count - sum(alloc)
    order = sorted(range(len(split_sizes)), key=lambda i: (-(ideal[i] - alloc[i]), i))
    for i in order[:remainder]:
        alloc[i] += 1
    return alloc


def _fix_class_presence(alloc_pos: list[int], sizes: list[int]) -> None:
    """Move single slides between splits so every split of size >= 2 keeps
    at least one slide of each class, whenever the class totals allow."""

    def donor_for_pos(skip):
        best = None
        for d in range(len(sizes)):
            if d == skip:
                continue
            floor = 1 if sizes[d] >= 2 else 0
            if alloc_pos[d] - 1 >= floor and (best is None or alloc_pos[d] > alloc_pos[best]):
                best = d
        return best

    def donor_for_neg(skip):
        best = None
        for d in range(len(sizes)):
            if d == skip:
                continue
            neg = sizes[d] - alloc_pos[d]
            floor = 1 if sizes[d] >= 2 else 0
            if neg - 1 >= floor and (best is None or neg > sizes[best] - alloc_pos[best]):
                best = d
        return best

    for _ in range(2):  # two passes settle all transfers
        for s in range(len(sizes)):
            if sizes[s] < 2:
                continue
            if alloc_pos[s] == 0:
                d = donor_for_pos(s)
                if d is not None:
                    alloc_pos[s] += 1
                    alloc_pos[d] -= 1
            if sizes[s] - alloc_pos[s] == 0:
                d = donor_for_neg(s)
                if d is not None:
                    alloc_pos[s] -= 1
                    alloc_pos[d] += 1


def split_indices(labels: list[int], rng: np.random.Generator) -> dict[str, list[int]]:
    """Disjoint 60/10/30 split, shuffled within each label class.

    Split sizes are floor(0.6 n) / floor(0.1 n) / remainder; each class is
    spread across splits by largest remainder, then nudged so every split
    of two or more slides keeps both classes whenever arithmetic allows
    (AUC is undefined on single-class splits).
    """
    n = len(labels)
    sizes = [math.floor(0.6 * n), math.floor(0.1 * n)]
    sizes.append(n - sum(sizes))

    by_class = {c: [i for i, y in enumerate(labels) if y == c] for c in (0, 1)}
    for c in (0, 1):
        by_class[c] = [by_class[c][j] for j in rng.permutation(len(by_class[c]))]

    alloc_pos = _largest_remainder(len(by_class[1]), sizes, n)
    # cap positive quotas at split capacity, pushing overflow to later splits
    for i in range(len(sizes)):
        if alloc_pos[i] > sizes[i]:
            overflow = alloc_pos[i] - sizes[i]
            alloc_pos[i] = sizes[i]
            alloc_pos[(i + 1) % len(sizes)] += overflow
    _fix_class_presence(alloc_pos, sizes)
    alloc_neg = [sizes[i] - alloc_pos[i] for i in range(len(sizes))]

    splits: dict[str, list[int]] = {}
    pos_at = neg_at = 0
    for name, npos, nneg in zip(SPLIT_NAMES, alloc_pos, alloc_neg):
        chosen = by_class[1][pos_at : pos_at + npos] + by_class[0][neg_at : neg_at + nneg]
        pos_at += npos
        neg_at += nneg
        splits[name] = sorted(chosen)
    return splits


def generate_site(spec: SiteSpec) -> GeneratedSite:
    """All slides for one site, with exact label quota and 60/10/30 split."""
    direction = signal_direction(spec.feature_dim)
    site_mean = (SITE_MEAN_SCALE / np.sqrt(spec.feature_dim)) * rng_for(
        spec.seed, "site-mean", spec.site_id
    ).standard_normal(spec.feature_dim)

    n_pos = int(round(spec.positive_fraction * spec.n_slides))
    if not 0 < n_pos < spec.n_slides:
        raise ValueError("positive_fraction quota leaves a single-class site")
    labels = [1] * n_pos + [0] * (spec.n_slides - n_pos)

    slides: list[PointSet] = []
    signal_counts: dict[str, int] = {}
    for idx, label in enumerate(labels):
        uid = f"{spec.site_id}-{idx:04d}"
        rng = rng_for(spec.seed, "slide", spec.site_id, idx)
        positions, features, n_signal = make_slide_points(
            rng,
            spec.points_per_slide,
            spec.feature_dim,
            label,
            spec.signal_fraction,
            spec.cluster_spread,
            spec.noise_scale,
            site_mean,
            direction,
        )
        slides.append(
            PointSet(
                positions=_storage_round(positions),
                features=_storage_round(features),
                label=label,
                uid=uid,
            )
        )
        signal_counts[uid] = n_signal

    splits = split_indices(labels, rng_for(spec.seed, "split", spec.site_id))
    return GeneratedSite(spec=spec, slides=slides, splits=splits, signal_counts=signal_counts)


def subsample_points(slide: PointSet, n: int, rng: np.random.Generator) -> PointSet:
    """Uniform sample of n points without replacement (indices kept sorted)."""
    if slide.n < n:
        raise ValueError(f"slide has {slide.n} points, cannot subsample {n}")
    if slide.n == n:
        return slide
    idx = np.sort(rng.choice(slide.n, size=n, replace=False))
    return PointSet(
        positions=slide.positions[idx],
        features=slide.features[idx],
        label=slide.label,
        uid=slide.uid,
    )


# ---------------------------------------------------------------------------
# slide files and manifests
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHIIB")


def save_slide(path, slide: PointSet) -> None:
    if slide.label is None:
        raise ValueError("cannot save a slide without a label")
    rows = np.concatenate([slide.positions, slide.features], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SLIDE_MAGIC, SLIDE_VERSION, slide.n, slide.feature_dim, slide.label))
        fh.write(rows.tobytes(order="C"))


def load_slide(path, uid: str = "") -> PointSet:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise SlideFormatError(f"{path}: truncated header at byte {len(blob)} (need {_HEADER.size})")
    magic, version, n, d, label = _HEADER.unpack_from(blob, 0)
    if magic != SLIDE_MAGIC:
        raise SlideFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != SLIDE_VERSION:
        raise SlideFormatError(f"{path}: unsupported version {version} at byte 4")
    if label not in (0, 1):
        raise SlideFormatError(f"{path}: bad label byte {label} at byte {_HEADER.size - 1}")
    expected = _HEADER.size + n * (3 + d) * 4
    if len(blob) != expected:
        raise SlideFormatError(
            f"{path}: truncated payload at byte {len(blob)} (expected {expected} bytes)"
        )
    rows = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(n, 3 + d)
    return PointSet(
        positions=rows[:, :3].astype(np.float64),
        features=rows[:, 3:].astype(np.float64),
        label=int(label),
        uid=uid or Path(path).stem,
    )


def write_manifest(path, entries: list[tuple[str, int, str]], comments: list[str] = ()) -> None:
    lines = [f"# {c}" for c in comments]
    lines += [f"{uid}\t{label}\t{rel}" for uid, label, rel in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[tuple[str, int, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries = []
    for ln, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{ln}: expected 'id<TAB>label<TAB>path'")
        uid, label, rel = parts
        if label not in ("0", "1"):
            raise DataError(f"{path}:{ln}: label must be 0 or 1, got {label!r}")
        entries.append((uid, int(label), rel))
    ids = [e[0] for e in entries]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate slide ids")
    return entries


def save_site(site_dir, generated: GeneratedSite) -> None:
    """Write a site's slides plus one manifest per split."""
    site_dir = Path(site_dir)
    (site_dir / "slides").mkdir(parents=True, exist_ok=True)
    spec = generated.spec
    comments = [
        f"site={spec.site_id} n_slides={spec.n_slides} positive_fraction={spec.positive_fraction}",
        f"points_per_slide={spec.points_per_slide} feature_dim={spec.feature_dim}",
        f"signal_fraction={spec.signal_fraction} cluster_spread={spec.cluster_spread} "
        f"noise_scale={spec.noise_scale} seed={spec.seed}",
    ]
    for idx, slide in enumerate(generated.slides):
        save_slide(site_dir / "slides" / f"{slide.uid}.ptws", slide)
    for split, indices in generated.splits.items():
        entries = [
            (generated.slides[i].uid, generated.slides[i].label, f"slides/{generated.slides[i].uid}.ptws")
            for i in indices
        ]
        write_manifest(site_dir / f"{split}.manifest", entries, comments=comments)


def load_split(site_dir, split: str) -> list[PointSet]:
    site_dir = Path(site_dir)
    slides = []
    for uid, label, rel in read_manifest(site_dir / f"{split}.manifest"):
        slide_path = site_dir / rel
        if not slide_path.exists():
            raise DataError(f"slide file missing: {slide_path}")
        slide = load_slide(slide_path, uid=uid)
        if slide.label != label:
            raise DataError(f"{slide_path}: label {slide.label} disagrees with manifest ({label})")
        slides.append(slide)
    return slides
