"""Simulated multi-site training: DDA masking, local SGD, FedAvg, evaluation.

One federation round broadcasts the global backbone to every site, runs E
local epochs of minibatch SGD on the masked classification loss plus the
site-local auxiliary loss, then aggregates the returned backbones with
sample-count weights.  Auxiliary-head parameters (``aux.*``) never leave
their site.  Model selection picks the round with the best mean validation
AUC; the selected backbone is also scored on held-out "unseen" sites using
the plain classifier head only.

Randomness is fully addressed: the mask stream is keyed by (seed, site,
round), the shuffle stream by (seed, site, epoch), and per-slide
subsampling by (seed, slide uid, epoch), so a single-site full-batch
federation reproduces a centralized SGD trajectory exactly and reruns are
bit-identical.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .datasynth import subsample_points
from .sampling import PointSet
from .seeding import rng_for


class UndefinedAUCError(ValueError):
    """AUC requested for a single-class label set."""


class FederationError(RuntimeError):
    """A round could not produce an aggregate (all sites degenerate)."""


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties = 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-D arrays")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC undefined: both classes must be present")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    at = 0
    while at < len(scores):
        end = at
        while end + 1 < len(scores) and sorted_scores[end + 1] == sorted_scores[at]:
            end += 1
        ranks[order[at : end + 1]] = 0.5 * (at + end) + 1.0  # average 1-based rank
        at = end + 1
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsRow:
    round: int
    site: str
    split: str
    auc: float | None
    loss: float | None
    kept_frac: float | None
    skipped_batches: int | None


METRICS_HEADER = "round,site,split,auc,loss,kept_frac,skipped_batches"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".12g")


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            ",".join(
                [str(r.round), r.site, r.split, _fmt(r.auc), _fmt(r.loss),
                 _fmt(r.kept_frac), _fmt(r.skipped_batches)]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# dynamic distribution adjustment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DDASchedule:
    """Keep-probability ramp for majority-class (negative) slides."""

    b0: float
    ramp_rounds: int
    kind: str = "linear"

    def __post_init__(self):
        if not 0.0 < self.b0 <= 1.0:
            raise ValueError(f"b0 must be in (0, 1], got {self.b0}")
        if self.ramp_rounds < 1:
            raise ValueError("ramp_rounds must be at least 1")
        if self.kind not in ("linear", "cosine", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def keep_probability(self, k: int) -> float:
        if k < 0:
            raise ValueError("round index must be non-negative")
        if k >= self.ramp_rounds:
            return 1.0
        t = k / self.ramp_rounds
        if self.kind == "linear":
            return min(1.0, self.b0 + (1.0 - self.b0) * t)
        if self.kind == "cosine":
            return self.b0 + (1.0 - self.b0) * 0.5 * (1.0 - np.cos(np.pi * t))
        return self.b0  # step: jump to 1 at ramp_rounds


def dda_keep_probability(k: int, schedule: DDASchedule) -> float:
    return schedule.keep_probability(k)


def initial_keep_probability(n_pos: int, n_neg: int) -> float:
    """b0 = min(1, n_pos/n_neg); degenerate single-class sites keep everything."""
    if n_pos == 0 or n_neg == 0:
        return 1.0
    return min(1.0, n_pos / n_neg)


def sample_mask(labels, keep_probability: float, rng: np.random.Generator) -> np.ndarray:
    """1 for every positive; Bernoulli(keep_probability) for each negative.

    With keep_probability >= 1 the mask is all ones and no random numbers
    are consumed, so disabling DDA does not perturb downstream streams.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 < keep_probability <= 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep_probability}")
    mask = np.ones(labels.shape, dtype=np.float64)
    if keep_probability >= 1.0:
        return mask
    negatives = labels == 0
    mask[negatives] = rng.random(int(negatives.sum())) < keep_probability
    return mask


# ---------------------------------------------------------------------------
# sites and local updates
# ---------------------------------------------------------------------------

@dataclass
class SiteState:
    site_id: int
    train: list[PointSet]
    val: list[PointSet]
    test: list[PointSet]
    store: mdl.ParameterStore
    schedule: DDASchedule
    prior: np.ndarray  # (pi0, pi1), both > 0
    n_pos: int = 0
    n_neg: int = 0


def label_prior(labels) -> np.ndarray:
    """Empirical (pi0, pi1); add-one smoothed if a class is absent."""
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return np.array([(n_neg + 1), (n_pos + 1)], dtype=np.float64) / (len(labels) + 2)
    return np.array([n_neg, n_pos], dtype=np.float64) / len(labels)


def make_site_state(site_id: int, train, val, test, store: mdl.ParameterStore,
                    ramp_rounds: int, schedule_kind: str = "linear") -> SiteState:
    labels = [s.label for s in train]
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    schedule = DDASchedule(
        b0=initial_keep_probability(n_pos, n_neg),
        ramp_rounds=ramp_rounds,
        kind=schedule_kind,
    )
    return SiteState(
        site_id=site_id, train=list(train), val=list(val), test=list(test),
        store=store, schedule=schedule, prior=label_prior(labels),
        n_pos=n_pos, n_neg=n_neg,
    )


@dataclass
class TrainSettings:
    """Knobs of one training run (shared by federated and centralized loops)."""

    lr: float = 0.1
    local_epochs: int = 1
    batch_size: int = 16
    rounds: int = 30
    use_dda: bool = True
    use_aux: bool = True
    seed: int = 0
    threads: int = 1


@dataclass
class LocalStats:
    sample_count: int
    mean_total_loss: float | None
    kept_negatives: int
    total_negatives: int
    skipped_batches: int
    degenerate: bool

    @property
    def kept_frac(self) -> float:
        if self.total_negatives == 0:
            return 1.0
        return self.kept_negatives / self.total_negatives


def _batches(order: np.ndarray, batch_size: int):
    for at in range(0, len(order), batch_size):
        yield order[at : at + batch_size]


def local_update(site: SiteState, global_backbone: dict[str, np.ndarray], round_k: int,
                 cfg: mdl.ModelConfig, settings: TrainSettings) -> tuple[dict[str, np.ndarray], LocalStats]:
    """Load the global backbone, run E local epochs, return the new backbone.

    The aux head stays site-local.  Batches whose DDA mask keeps nothing
    are skipped; a fully skipped epoch marks the site degenerate for the
    round (it then contributes zero aggregation weight).
    """
    site.store.load_arrays(global_backbone)
    params = site.store.tensors()
    leaves = list(params.values())
    path_of = {id(t): p for p, t in params.items()}

    b_k = site.schedule.keep_probability(round_k) if settings.use_dda else 1.0
    mask_rng = rng_for(settings.seed, "mask", site.site_id, round_k)

    losses: list[float] = []
    kept_neg = total_neg = skipped = 0
    degenerate = False
    for e in range(settings.local_epochs):
        epoch = round_k * settings.local_epochs + e
        order = rng_for(settings.seed, "shuffle", site.site_id, epoch).permutation(len(site.train))
        epoch_ran_batch = False
        for batch_idx in _batches(order, settings.batch_size):
            slides = [
                subsample_points(
                    site.train[i], cfg.n_points,
                    rng_for(settings.seed, "subsample", site.train[i].uid, epoch),
                )
                for i in batch_idx
            ]
            labels = np.array([s.label for s in slides], dtype=np.int64)
            mask = sample_mask(labels, b_k, mask_rng)
            negatives = labels == 0
            total_neg += int(negatives.sum())
            kept_neg += int(mask[negatives].sum())
            try:
                with ad.Tape():
                    parts = mdl.total_loss(
                        slides, labels, mask, site.store, cfg,
                        prior=site.prior, use_aux=settings.use_aux,
                    )
                    grads = ad.backward(parts.total, leaves=leaves)
            except mdl.AllMaskedBatch:
                skipped += 1
                continue
            epoch_ran_batch = True
            losses.append(parts.total.item())
            by_path = {path_of[id(t)]: g for t, g in grads.items()}
            ad.sgd_step(params, by_path, settings.lr)
        if not epoch_ran_batch:
            degenerate = True

    stats = LocalStats(
        sample_count=len(site.train),
        mean_total_loss=float(np.mean(losses)) if losses else None,
        kept_negatives=kept_neg,
        total_negatives=total_neg,
        skipped_batches=skipped,
        degenerate=degenerate,
    )
    return site.store.arrays(site.store.backbone_paths()), stats


def aggregate(updates: list[tuple[int, dict[str, np.ndarray], int]]) -> dict[str, np.ndarray]:
    """Sample-count-weighted mean of site backbones, in ascending site order."""
    live = [(sid, arrs, count) for sid, arrs, count in updates if count > 0]
    if not live:
        raise FederationError("no site produced an update this round")
    live.sort(key=lambda item: item[0])
    total = sum(count for _, _, count in live)
    out: dict[str, np.ndarray] = {}
    for sid, arrs, count in live:
        w = count / total
        for path, arr in arrs.items():
            if path in out:
                out[path] = out[path] + w * arr
            else:
                out[path] = w * arr
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_probs(slides: list[PointSet], store: mdl.ParameterStore, cfg: mdl.ModelConfig,
                  seed: int, batch_size: int = 32) -> np.ndarray:
    """Positive-class probabilities from the plain classifier head (no aux)."""
    probs = []
    for at in range(0, len(slides), batch_size):
        chunk = [
            subsample_points(s, cfg.n_points, rng_for(seed, "subsample-eval", s.uid))
            for s in slides[at : at + batch_size]
        ]
        probs.append(mdl.classify_batch(chunk, store, cfg).probs.data)
    return np.concatenate(probs, axis=0)


def evaluate_split(slides: list[PointSet], store: mdl.ParameterStore, cfg: mdl.ModelConfig,
                   seed: int, batch_size: int = 32) -> tuple[float, float]:
    """(AUC, mean cross-entropy) of the current model on a slide list."""
    probs = predict_probs(slides, store, cfg, seed, batch_size)
    labels = np.array([s.label for s in slides], dtype=np.int64)
    clamped = np.clip(probs[np.arange(len(labels)), labels], 1e-12, 1.0)
    loss = float(-np.log(clamped).mean())
    auc = roc_auc(probs[:, 1], labels)
    return auc, loss


# ---------------------------------------------------------------------------
# round loop
# ---------------------------------------------------------------------------

@dataclass
class FederationResult:
    rows: list[MetricsRow]
    best_backbone: dict[str, np.ndarray]
    final_backbone: dict[str, np.ndarray]
    summary: dict


def _site_name(site_id: int) -> str:
    return f"site_{site_id}"


def run_federation(sites: list[SiteState], cfg: mdl.ModelConfig, settings: TrainSettings,
                   unseen: dict[str, list[PointSet]] | None = None) -> FederationResult:
    """R rounds of broadcast / local update / aggregate / evaluate.

    Sites may run their local updates concurrently (``settings.threads``);
    aggregation and metrics are ordered by site id, so the result does not
    depend on scheduling.
    """
    if not sites:
        raise FederationError("run_federation needs at least one site")
    eval_store = sites[0].store.copy()
    global_backbone = sites[0].store.arrays(sites[0].store.backbone_paths())

    rows: list[MetricsRow] = []
    best_round = -1
    best_val = -np.inf
    best_backbone = global_backbone
    best_test: dict[str, float] = {}

    for k in range(settings.rounds):
        if settings.threads > 1:
            with ThreadPoolExecutor(max_workers=settings.threads) as pool:
                results = list(
                    pool.map(lambda s: local_update(s, global_backbone, k, cfg, settings), sites)
                )
        else:
            results = [local_update(s, global_backbone, k, cfg, settings) for s in sites]

        updates = []
        for site, (backbone, stats) in zip(sites, results):
            weight = 0 if stats.degenerate else stats.sample_count
            updates.append((site.site_id, backbone, weight))
            rows.append(
                MetricsRow(k, _site_name(site.site_id), "train", None,
                           stats.mean_total_loss, stats.kept_frac, stats.skipped_batches)
            )
        global_backbone = aggregate(updates)
        eval_store.load_arrays(global_backbone)

        split_aucs: dict[str, list[float]] = {"val": [], "test": []}
        split_losses: dict[str, list[float]] = {"val": [], "test": []}
        test_by_site: dict[str, float] = {}
        for site in sites:
            for split in ("val", "test"):
                auc, loss = evaluate_split(
                    getattr(site, split), eval_store, cfg, settings.seed,
                    batch_size=settings.batch_size,
                )
                rows.append(MetricsRow(k, _site_name(site.site_id), split, auc, loss, None, None))
                split_aucs[split].append(auc)
                split_losses[split].append(loss)
                if split == "test":
                    test_by_site[_site_name(site.site_id)] = auc
        for split in ("val", "test"):
            rows.append(
                MetricsRow(k, "mean", split, float(np.mean(split_aucs[split])),
                           float(np.mean(split_losses[split])), None, None)
            )

        mean_val = float(np.mean(split_aucs["val"]))
        if mean_val > best_val:
            best_val = mean_val
            best_round = k
            best_backbone = {p: a.copy() for p, a in global_backbone.items()}
            best_test = dict(test_by_site)

    summary = {
        "selected_round": best_round,
        "mean_val_auc": best_val,
        "test_auc_by_site": best_test,
        "mean_test_auc": float(np.mean(list(best_test.values()))),
    }
    if unseen:
        eval_store.load_arrays(best_backbone)
        unseen_aucs = {}
        for name in sorted(unseen):
            auc, _ = evaluate_split(unseen[name], eval_store, cfg, settings.seed,
                                    batch_size=settings.batch_size)
            unseen_aucs[name] = auc
        summary["unseen_auc_by_site"] = unseen_aucs
        summary["mean_unseen_auc"] = float(np.mean(list(unseen_aucs.values())))
    return FederationResult(rows=rows, best_backbone=best_backbone,
                            final_backbone=global_backbone, summary=summary)


def run_centralized(sites: list[SiteState], cfg: mdl.ModelConfig, settings: TrainSettings,
                    store: mdl.ParameterStore) -> FederationResult:
    """Plain SGD on the pooled training data, evaluated like a federation.

    With a single site this follows the exact update trajectory of a
    single-site federation (same stream addresses), which the tests
    exploit as an oracle.
    """
    if not sites:
        raise FederationError("run_centralized needs at least one site")
    pooled_id = sites[0].site_id if len(sites) == 1 else -1
    pooled = make_site_state(
        pooled_id,
        [s for site in sites for s in site.train],
        [], [],
        store,
        ramp_rounds=max(1, settings.rounds // 2),
        schedule_kind=sites[0].schedule.kind,
    )

    rows: list[MetricsRow] = []
    best_round = -1
    best_val = -np.inf
    best_backbone = store.arrays(store.backbone_paths())
    best_test: dict[str, float] = {}
    backbone = store.arrays(store.backbone_paths())

    for k in range(settings.rounds):
        backbone, stats = local_update(pooled, backbone, k, cfg, settings)
        rows.append(MetricsRow(k, "central", "train", None, stats.mean_total_loss,
                               stats.kept_frac, stats.skipped_batches))
        split_aucs: dict[str, list[float]] = {"val": [], "test": []}
        test_by_site: dict[str, float] = {}
        for site in sites:
            for split in ("val", "test"):
                slides = getattr(site, split)
                if not slides:
                    continue
                auc, loss = evaluate_split(slides, pooled.store, cfg, settings.seed,
                                           batch_size=settings.batch_size)
                rows.append(MetricsRow(k, _site_name(site.site_id), split, auc, loss, None, None))
                split_aucs[split].append(auc)
                if split == "test":
                    test_by_site[_site_name(site.site_id)] = auc
        if split_aucs["val"]:
            mean_val = float(np.mean(split_aucs["val"]))
            rows.append(MetricsRow(k, "mean", "val", mean_val, None, None, None))
            rows.append(MetricsRow(k, "mean", "test",
                                   float(np.mean(split_aucs["test"])), None, None, None))
            if mean_val > best_val:
                best_val, best_round = mean_val, k
                best_backbone = {p: a.copy() for p, a in backbone.items()}
                best_test = dict(test_by_site)

    summary = {
        "selected_round": best_round,
        "mean_val_auc": best_val if best_val > -np.inf else None,
        "test_auc_by_site": best_test,
        "mean_test_auc": float(np.mean(list(best_test.values()))) if best_test else None,
    }
    return FederationResult(rows=rows, best_backbone=best_backbone,
                            final_backbone=backbone, summary=summary)


def default_threads() -> int:
    """Site-level parallelism cap from FEDPOINT_THREADS (default 1)."""
    raw = os.environ.get("FEDPOINT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
