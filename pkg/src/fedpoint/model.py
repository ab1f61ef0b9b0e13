"""The point-transformer classifier.

Architecture: a linear embedding of the (position, feature) rows, then a
sequence of stages, each a vector-attention transformer block followed by
an abstraction block that keeps a quarter of the points (farthest cosine
sampling in feature space by default, farthest point sampling on positions
for the baseline variant) and max-pools an MLP over each kept point's
neighborhood.  Global average pooling over the final abstract points feeds
a two-layer head producing the slide feature vector, a softmax classifier,
and a site-local auxiliary classifier whose logits are offset by the log
of the site's label prior.  The auxiliary head (every ``aux.*`` parameter)
is excluded from federated weight synchronization.

All trainable parameters live in a :class:`ParameterStore` keyed by path
strings; gradients flow through the :mod:`fedpoint.autodiff` tape.
Neighbor/sampling index selection happens on forward values and is treated
as constant by the backward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import sampling as samp
from .sampling import PointSet
from .seeding import rng_for


class AllMaskedBatch(Exception):
    """Every sample in a batch was masked out; skip the update."""


@dataclass(frozen=True)
class StageConfig:
    in_points: int
    out_points: int
    in_channels: int
    out_channels: int
    k_attention: int
    k_grouping: int

    def __post_init__(self):
        if self.in_points < 4 or self.in_points % 4 != 0:
            raise ValueError(f"stage input must be a positive multiple of 4, got {self.in_points}")
        if self.out_points * 4 != self.in_points:
            raise ValueError("stage must keep exactly a quarter of its points")


@dataclass(frozen=True)
class ModelConfig:
    """Shape schedule of the network; defaults are the full-size model."""

    n_points: int = 1024
    feature_dim: int = 256
    embed_channels: int = 64
    stage_channels: tuple[int, ...] = (128, 256, 512, 512)
    k_attention: int = 16
    k_grouping: int = 16
    head_hidden: int = 256
    slide_feature_dim: int = 64
    n_classes: int = 2
    sampling: str = "fcs"  # "fcs" | "fps"
    cosine_denominator: str = "max"

    def __post_init__(self):
        shrink = 4 ** len(self.stage_channels)
        if self.n_points % shrink != 0 or self.n_points // shrink < 1:
            raise ValueError(
                f"n_points={self.n_points} must be a positive multiple of {shrink} "
                f"for {len(self.stage_channels)} stages"
            )
        if self.sampling not in ("fcs", "fps"):
            raise ValueError(f"sampling must be 'fcs' or 'fps', got {self.sampling!r}")

    @property
    def final_points(self) -> int:
        return self.n_points // 4 ** len(self.stage_channels)

    @property
    def final_channels(self) -> int:
        return self.stage_channels[-1]

    def stage_configs(self) -> list[StageConfig]:
        stages = []
        pts = self.n_points
        channels = self.embed_channels
        for out_ch in self.stage_channels:
            stages.append(
                StageConfig(
                    in_points=pts,
                    out_points=pts // 4,
                    in_channels=channels,
                    out_channels=out_ch,
                    k_attention=min(self.k_attention, pts),
                    k_grouping=min(self.k_grouping, pts),
                )
            )
            pts //= 4
            channels = out_ch
        return stages


class ParameterStore:
    """Named trainable tensors, partitioned into backbone and aux-head sets."""

    AUX_PREFIX = "aux."

    def __init__(self, tensors: dict[str, ad.Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, path: str) -> ad.Tensor:
        return self._tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def paths(self) -> list[str]:
        return sorted(self._tensors)

    def backbone_paths(self) -> list[str]:
        return [p for p in self.paths() if not p.startswith(self.AUX_PREFIX)]

    def aux_paths(self) -> list[str]:
        return [p for p in self.paths() if p.startswith(self.AUX_PREFIX)]

    def tensors(self) -> dict[str, ad.Tensor]:
        return self._tensors

    def arrays(self, paths: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        keys = self.paths() if paths is None else paths
        return {p: self._tensors[p].data.copy() for p in keys}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for path, arr in arrays.items():
            t = self._tensors[path]
            if arr.shape != t.shape:
                raise ad.ShapeError(f"{path}: cannot load shape {arr.shape} into {t.shape}")
            t.data = np.array(arr, dtype=np.float64)

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {p: ad.parameter(t.data.copy()) for p, t in self._tensors.items()}
        )


# init gains: without normalization layers, plain uniform(+-1/sqrt(fan_in))
# shrinks activation variance by 1/3 per linear layer and the ~11-layer
# stack collapses to zero output (loss pinned at ln 2).  Weights therefore
# use variance-preserving uniform bounds: sqrt(6/fan_in) into a ReLU,
# sqrt(3/fan_in) elsewhere; biases keep the plain 1/sqrt(fan_in) bound.
_GAIN_RELU = np.sqrt(6.0)
_GAIN_LINEAR = np.sqrt(3.0)
_GAIN_BIAS = 1.0


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int, float]]:
    """(path, shape, fan_in, gain) in creation order."""
    shapes: list[tuple[str, tuple[int, ...], int, float]] = []
    in_dim = 3 + cfg.feature_dim
    shapes.append(("embed.w", (in_dim, cfg.embed_channels), in_dim, _GAIN_LINEAR))
    shapes.append(("embed.b", (cfg.embed_channels,), in_dim, _GAIN_BIAS))
    for i, stage in enumerate(cfg.stage_configs()):
        c, out = stage.in_channels, stage.out_channels
        for name in ("w_center", "w_neighbor", "w_score", "w_value", "w_out"):
            shapes.append((f"stage{i}.attn.{name}", (c, c), c, _GAIN_LINEAR))
        shapes.append((f"stage{i}.attn.pos.w1", (3, c), 3, _GAIN_RELU))
        shapes.append((f"stage{i}.attn.pos.b1", (c,), 3, _GAIN_BIAS))
        shapes.append((f"stage{i}.attn.pos.w2", (c, c), c, _GAIN_LINEAR))
        shapes.append((f"stage{i}.attn.pos.b2", (c,), c, _GAIN_BIAS))
        shapes.append((f"stage{i}.pool.w1", (c, out), c, _GAIN_RELU))
        shapes.append((f"stage{i}.pool.b1", (out,), c, _GAIN_BIAS))
        shapes.append((f"stage{i}.pool.w2", (out, out), out, _GAIN_LINEAR))
        shapes.append((f"stage{i}.pool.b2", (out,), out, _GAIN_BIAS))
    c_last = cfg.final_channels
    shapes.append(("head.hidden.w", (c_last, cfg.head_hidden), c_last, _GAIN_RELU))
    shapes.append(("head.hidden.b", (cfg.head_hidden,), c_last, _GAIN_BIAS))
    shapes.append(("head.out.w", (cfg.head_hidden, cfg.slide_feature_dim),
                   cfg.head_hidden, _GAIN_RELU))
    shapes.append(("head.out.b", (cfg.slide_feature_dim,), cfg.head_hidden, _GAIN_BIAS))
    shapes.append(("head.cls.w", (cfg.slide_feature_dim, cfg.n_classes),
                   cfg.slide_feature_dim, _GAIN_LINEAR))
    shapes.append(("head.cls.b", (cfg.n_classes,), cfg.slide_feature_dim, _GAIN_BIAS))
    shapes.append(("aux.cls.w", (cfg.slide_feature_dim, cfg.n_classes),
                   cfg.slide_feature_dim, _GAIN_LINEAR))
    shapes.append(("aux.cls.b", (cfg.n_classes,), cfg.slide_feature_dim, _GAIN_BIAS))
    return shapes


def init_params(cfg: ModelConfig, *seed_parts) -> ParameterStore:
    """Seeded fan-in-scaled uniform initialization (see gain note above)."""
    rng = rng_for(*seed_parts, "init")
    tensors = {}
    for path, shape, fan_in, gain in _param_shapes(cfg):
        bound = gain / np.sqrt(fan_in)
        tensors[path] = ad.parameter(rng.uniform(-bound, bound, size=shape))
    return ParameterStore(tensors)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _pe_mlp(rel: ad.Tensor, store: ParameterStore, prefix: str) -> ad.Tensor:
    hidden = ad.relu(ad.linear(rel, store[f"{prefix}.w1"], store[f"{prefix}.b1"]))
    return ad.linear(hidden, store[f"{prefix}.w2"], store[f"{prefix}.b2"])


def position_encoding(p_i: np.ndarray, p_j: np.ndarray, store: ParameterStore,
                      prefix: str = "stage0.attn.pos") -> ad.Tensor:
    """Relative position code MLP(p_i - p_j) for a single pair of points."""
    rel = np.asarray(p_i, dtype=np.float64) - np.asarray(p_j, dtype=np.float64)
    out = _pe_mlp(ad.tensor(rel[None, :]), store, prefix)
    return ad.reshape(out, (out.shape[1],))


def attention_weights_and_values(features: ad.Tensor, positions: np.ndarray,
                                 neighbors: np.ndarray, store: ParameterStore,
                                 prefix: str) -> tuple[ad.Tensor, ad.Tensor]:
    """Softmaxed per-channel attention weights and the values they mix.

    Per neighbor pair the score is a full channel vector
    ``w_score @ (w_center x_i - w_neighbor x_j) + pe(p_i - p_j)``, softmaxed
    over the k neighbors channelwise; the value is ``w_value x_j + pe``.
    """
    n, c = features.shape
    k = neighbors.shape[1]

    center = ad.matmul(features, store[f"{prefix}.w_center"])
    neigh = ad.gather(ad.matmul(features, store[f"{prefix}.w_neighbor"]), neighbors)
    diff = ad.sub(ad.reshape(center, (n, 1, c)), neigh)
    score_lin = ad.reshape(
        ad.matmul(ad.reshape(diff, (n * k, c)), store[f"{prefix}.w_score"]), (n, k, c)
    )

    rel = positions[:, None, :] - positions[neighbors]  # (n, k, 3), constant
    pe = ad.reshape(_pe_mlp(ad.tensor(rel.reshape(n * k, 3)), store, f"{prefix}.pos"), (n, k, c))

    weights = ad.softmax(ad.add(score_lin, pe), axis=1)
    values = ad.add(ad.gather(ad.matmul(features, store[f"{prefix}.w_value"]), neighbors), pe)
    return weights, values


def transformer_block(features: ad.Tensor, positions: np.ndarray, neighbors: np.ndarray,
                      store: ParameterStore, prefix: str) -> ad.Tensor:
    """Vector attention over each point's neighbor list, with residual output.

    The weighted neighbor aggregate re-enters through ``w_out`` on top of
    the residual; positions are not modified.
    """
    weights, values = attention_weights_and_values(features, positions, neighbors, store, prefix)
    aggregated = ad.reduce(ad.mul(weights, values), "sum", axis=1)
    return ad.add(features, ad.matmul(aggregated, store[f"{prefix}.w_out"]))


def _pool_neighborhoods(features: ad.Tensor, group_idx: np.ndarray,
                        store: ParameterStore, prefix: str) -> ad.Tensor:
    """Channelwise max over each group of MLP-transformed neighbor features."""
    hidden = ad.relu(ad.linear(features, store[f"{prefix}.w1"], store[f"{prefix}.b1"]))
    transformed = ad.linear(hidden, store[f"{prefix}.w2"], store[f"{prefix}.b2"])
    return ad.reduce(ad.gather(transformed, group_idx), "max", axis=1)


def _select_centers(feature_values: np.ndarray, positions: np.ndarray, out_points: int,
                    k_grouping: int, sampling: str, denominator: str):
    """Sampled center indices plus their neighbor groups (single slide)."""
    if sampling == "fcs":
        centers = samp.farthest_cosine_sampling(feature_values, out_points,
                                                denominator=denominator)
        dist = samp.cosine_distance_matrix(feature_values, feature_values[centers],
                                           denominator=denominator)
    else:
        centers = samp.farthest_point_sampling(positions, out_points)
        dist = samp.squared_euclidean_matrix(positions, positions[centers])
    groups = samp._smallest_k(dist, k_grouping)
    return centers, groups


def abstraction_block(features: ad.Tensor, positions: np.ndarray, stage: StageConfig,
                      store: ParameterStore, prefix: str, sampling: str = "fcs",
                      denominator: str = "max") -> tuple[ad.Tensor, np.ndarray]:
    """Sample a quarter of the points and max-pool MLP features over groups.

    Returns the new features (out_points, out_channels) and the positions
    of the surviving points.
    """
    if features.shape[0] != stage.in_points:
        raise ad.ShapeError(
            f"abstraction expected {stage.in_points} points, got {features.shape[0]}"
        )
    centers, groups = _select_centers(
        features.data, positions, stage.out_points, stage.k_grouping, sampling, denominator
    )
    pooled = _pool_neighborhoods(features, groups, store, prefix)
    return pooled, positions[centers]


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

@dataclass
class ClassifyOutput:
    slide_features: ad.Tensor  # (B, slide_feature_dim)
    probs: ad.Tensor  # (B, n_classes)
    aux_probs: ad.Tensor | None  # (B, n_classes) or None


def _batched_attention_neighbors(positions: np.ndarray, n_per: int, batch: int, k: int) -> np.ndarray:
    rows = []
    for b in range(batch):
        block = positions[b * n_per : (b + 1) * n_per]
        dist = samp.squared_euclidean_matrix(block)
        rows.append(samp._smallest_k(dist, k) + b * n_per)
    return np.concatenate(rows, axis=0)


def _batched_centers(feature_values: np.ndarray, positions: np.ndarray, n_per: int,
                     batch: int, stage: StageConfig, sampling: str, denominator: str):
    all_centers, all_groups = [], []
    for b in range(batch):
        sl = slice(b * n_per, (b + 1) * n_per)
        centers, groups = _select_centers(
            feature_values[sl], positions[sl], stage.out_points, stage.k_grouping,
            sampling, denominator,
        )
        all_centers.append(centers + b * n_per)
        all_groups.append(groups + b * n_per)
    return np.concatenate(all_centers), np.concatenate(all_groups, axis=0)


def classify_batch(slides: Sequence[PointSet], store: ParameterStore, cfg: ModelConfig,
                   want_aux: bool = False, prior: np.ndarray | None = None) -> ClassifyOutput:
    """Forward pass over a batch of slides (each already subsampled).

    Slides are concatenated into one point matrix; neighbor and sampling
    indices are computed per slide with offsets, so every slide flows
    through the identical single-slide computation while the matrix work is
    batched.
    """
    batch = len(slides)
    if batch == 0:
        raise ValueError("classify_batch on an empty batch")
    for s in slides:
        if s.n != cfg.n_points:
            raise ValueError(f"slide {s.uid!r} has {s.n} points, model expects {cfg.n_points}")
        if s.feature_dim != cfg.feature_dim:
            raise ValueError(
                f"slide {s.uid!r} has {s.feature_dim}-d features, model expects {cfg.feature_dim}"
            )
    if want_aux and prior is None:
        raise ValueError("aux head needs the site label prior")

    positions = np.concatenate([s.positions for s in slides], axis=0)
    raw = np.concatenate(
        [np.concatenate([s.positions, s.features], axis=1) for s in slides], axis=0
    )
    h = ad.linear(ad.tensor(raw), store["embed.w"], store["embed.b"])

    cur_pos = positions
    cur_n = cfg.n_points
    for i, stage in enumerate(cfg.stage_configs()):
        nb = _batched_attention_neighbors(cur_pos, cur_n, batch, stage.k_attention)
        h = transformer_block(h, cur_pos, nb, store, f"stage{i}.attn")
        centers, groups = _batched_centers(
            h.data, cur_pos, cur_n, batch, stage, cfg.sampling, cfg.cosine_denominator
        )
        h = _pool_neighborhoods(h, groups, store, f"stage{i}.pool")
        cur_pos = cur_pos[centers]
        cur_n = stage.out_points

    grouped = ad.reshape(h, (batch, cfg.final_points, cfg.final_channels))
    gap = ad.reduce(grouped, "mean", axis=1)
    hidden = ad.relu(ad.linear(gap, store["head.hidden.w"], store["head.hidden.b"]))
    slide_feat = ad.relu(ad.linear(hidden, store["head.out.w"], store["head.out.b"]))
    probs = ad.softmax(ad.linear(slide_feat, store["head.cls.w"], store["head.cls.b"]), axis=1)

    aux_probs = None
    if want_aux:
        logits = ad.linear(slide_feat, store["aux.cls.w"], store["aux.cls.b"])
        logits = ad.add(logits, ad.tensor(np.log(np.asarray(prior, dtype=np.float64))))
        aux_probs = ad.softmax(logits, axis=1)
    return ClassifyOutput(slide_features=slide_feat, probs=probs, aux_probs=aux_probs)


def classify(slide: PointSet, store: ParameterStore, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Single-slide evaluation: (slide feature vector, class probabilities)."""
    out = classify_batch([slide], store, cfg)
    return out.slide_features.data[0], out.probs.data[0]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(n_classes)[labels]


def aux_probabilities(slide_features: ad.Tensor, store: ParameterStore,
                      prior: np.ndarray) -> ad.Tensor:
    logits = ad.linear(slide_features, store["aux.cls.w"], store["aux.cls.b"])
    logits = ad.add(logits, ad.tensor(np.log(np.asarray(prior, dtype=np.float64))))
    return ad.softmax(logits, axis=1)


def aux_loss(slide_features: ad.Tensor, labels, store: ParameterStore,
             prior: np.ndarray) -> ad.Tensor:
    """Mean NLL of the prior-adjusted auxiliary head over the whole batch."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("aux_loss on an empty batch")
    probs = aux_probabilities(slide_features, store, prior)
    return ad.cross_entropy(probs, ad.tensor(_onehot(labels, probs.shape[1])))


@dataclass
class LossParts:
    total: ad.Tensor
    cls: ad.Tensor
    aux: ad.Tensor | None
    output: ClassifyOutput


def total_loss(slides: Sequence[PointSet], labels, mask, store: ParameterStore,
               cfg: ModelConfig, prior: np.ndarray | None = None,
               use_aux: bool = True) -> LossParts:
    """Masked classification loss plus (optionally) the unmasked aux loss.

    The classification term averages cross-entropy over kept samples only;
    the aux term averages over every sample in the batch.  Raises
    :class:`AllMaskedBatch` before running the network when the mask keeps
    nothing.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != labels.shape:
        raise ValueError("mask and labels must align")
    if mask.sum() == 0:
        raise AllMaskedBatch(f"all {len(labels)} samples masked")

    out = classify_batch(slides, store, cfg, want_aux=use_aux, prior=prior)
    onehot = ad.tensor(_onehot(labels, cfg.n_classes))
    cls = ad.cross_entropy(out.probs, onehot, weights=mask)
    if use_aux:
        aux = ad.cross_entropy(out.aux_probs, onehot)
        return LossParts(total=ad.add(cls, aux), cls=cls, aux=aux, output=out)
    return LossParts(total=cls, cls=cls, aux=None, output=out)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PTCK"
CHECKPOINT_VERSION = 1

ROLE_BACKBONE = 1
ROLE_AUX = 0

_CK_HEADER = struct.Struct("<4sHI")


class CheckpointError(Exception):
    """A checkpoint file failed validation."""


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Flat parameter file; each entry records path, role, shape, f64 data.

    Role marks whether the path belongs to the synchronized backbone (1)
    or the site-local aux head (0).
    """
    with open(path, "wb") as fh:
        fh.write(_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")
            raw_name = name.encode("utf-8")
            role = ROLE_AUX if name.startswith(ParameterStore.AUX_PREFIX) else ROLE_BACKBONE
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", role, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    blob = Path(path).read_bytes()
    if len(blob) < _CK_HEADER.size:
        raise CheckpointError(f"{path}: truncated header at byte {len(blob)}")
    magic, version, count = _CK_HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arrays: dict[str, np.ndarray] = {}
    roles: dict[str, int] = {}
    at = _CK_HEADER.size
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, at)
            at += 2
            name = blob[at : at + name_len].decode("utf-8")
            at += name_len
            role, ndim = struct.unpack_from("<BB", blob, at)
            at += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, at)
            at += 4 * ndim
            n_elems = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n_elems, offset=at)
            at += n_elems * 8
            arrays[name] = arr.reshape(shape).astype(np.float64)
            roles[name] = role
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated entry at byte {at}") from exc
    if at != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - at} trailing bytes at byte {at}")
    return arrays, roles
