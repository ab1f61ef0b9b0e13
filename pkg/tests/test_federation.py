"""Federated orchestration: DDA, masks, aggregation, AUC, round loop."""

import numpy as np
import pytest

from fedpoint import autodiff as ad
from fedpoint import federation as fed
from fedpoint import model as mdl
from fedpoint.datasynth import subsample_points
from fedpoint.sampling import PointSet
from fedpoint.seeding import rng_for

from oracles import auc_pairs_ref

CFG = mdl.ModelConfig(
    n_points=32, feature_dim=6, embed_channels=6, stage_channels=(8, 12),
    k_attention=8, k_grouping=8, head_hidden=8, slide_feature_dim=6,
)


def rand_slide(rng, label, uid, n=32, d=6, shift=0.0):
    pos = np.concatenate([rng.uniform(0, 1, (n, 2)), np.ones((n, 1))], axis=1)
    feat = rng.standard_normal((n, d))
    if label == 1:
        feat[: n // 8] += shift
    return PointSet(pos, feat, label=label, uid=uid)


def make_site(site_id, n_train=8, n_val=4, n_test=4, seed=0, shift=2.0,
              ramp_rounds=5, pos_frac=0.5):
    rng = rng_for(seed, "site", site_id)
    def slides(tag, count):
        n_pos = max(1, int(round(pos_frac * count))) if pos_frac > 0 else 0
        return [
            rand_slide(rng, 1 if i < n_pos else 0, f"{site_id}-{tag}-{i}", shift=shift)
            for i in range(count)
        ]
    store = mdl.init_params(CFG, 77, "model")
    return fed.make_site_state(site_id, slides("tr", n_train), slides("va", n_val),
                               slides("te", n_test), store, ramp_rounds)


def settings(**kw):
    base = dict(lr=0.05, local_epochs=1, batch_size=4, rounds=2,
                use_dda=False, use_aux=False, seed=77, threads=1)
    base.update(kw)
    return fed.TrainSettings(**base)


class TestRocAuc:
    def test_perfect_separation(self):
        assert fed.roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties_give_half(self):
        assert fed.roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5

    def test_single_class_raises(self):
        with pytest.raises(fed.UndefinedAUCError):
            fed.roc_auc([0.1, 0.9], [1, 1])

    def test_matches_pairwise_oracle(self):
        rng = rng_for(0, "auc-oracle")
        for _ in range(100):
            n = int(rng.integers(4, 200))
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = np.round(rng.standard_normal(n), 2)  # induce ties
            got = fed.roc_auc(scores, labels)
            assert abs(got - auc_pairs_ref(scores, labels)) < 1e-12

    def test_invariant_under_monotone_transform(self):
        rng = rng_for(1, "auc-mono")
        scores = rng.standard_normal(80)
        labels = rng.integers(0, 2, 80)
        labels[0], labels[1] = 0, 1
        base = fed.roc_auc(scores, labels)
        assert fed.roc_auc(np.exp(scores), labels) == base
        assert fed.roc_auc(3.0 * scores + 11.0, labels) == base


class TestDDASchedule:
    def test_round_zero_is_b0(self):
        sched = fed.DDASchedule(b0=0.25, ramp_rounds=10)
        assert fed.dda_keep_probability(0, sched) == 0.25

    def test_after_ramp_is_one(self):
        sched = fed.DDASchedule(b0=0.25, ramp_rounds=10)
        assert sched.keep_probability(10) == 1.0
        assert sched.keep_probability(99) == 1.0

    def test_linear_midpoint(self):
        sched = fed.DDASchedule(b0=0.2, ramp_rounds=10)
        assert sched.keep_probability(5) == pytest.approx(0.6)

    @pytest.mark.parametrize("kind", ["linear", "cosine", "step"])
    def test_nondecreasing_and_reaches_one(self, kind):
        sched = fed.DDASchedule(b0=0.3, ramp_rounds=7, kind=kind)
        values = [sched.keep_probability(k) for k in range(12)]
        assert all(b <= a + 1e-12 for a, b in zip(values[1:], values))  # noqa: simplistic
        assert all(y >= x - 1e-12 for x, y in zip(values, values[1:]))
        assert values[-1] == 1.0
        assert all(0 < v <= 1 for v in values)

    def test_initial_keep_probability(self):
        assert fed.initial_keep_probability(2, 10) == 0.2
        assert fed.initial_keep_probability(10, 2) == 1.0
        assert fed.initial_keep_probability(0, 10) == 1.0
        assert fed.initial_keep_probability(10, 0) == 1.0


class TestSampleMask:
    def test_full_keep_is_all_ones_without_consuming_rng(self):
        labels = np.array([0, 1, 0, 0])
        rng = rng_for(2, "mask")
        mask = fed.sample_mask(labels, 1.0, rng)
        np.testing.assert_array_equal(mask, np.ones(4))
        assert rng.random() == rng_for(2, "mask").random()

    def test_all_positive_batch_keeps_everything(self):
        rng = rng_for(3, "mask")
        mask = fed.sample_mask(np.ones(6, dtype=int), 0.01, rng)
        np.testing.assert_array_equal(mask, np.ones(6))

    def test_kept_fraction_concentrates(self):
        labels = np.zeros(10_000, dtype=int)
        mask = fed.sample_mask(labels, 0.3, rng_for(4, "mask"))
        assert abs(mask.mean() - 0.3) < 0.015  # 3 sigma ~ 0.0137

    def test_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            fed.sample_mask(np.zeros(3, dtype=int), 0.0, rng_for(5, "mask"))


class TestAggregate:
    def test_identical_updates_are_identity(self):
        arrs = {"w": np.array([1.0, 2.0])}
        out = fed.aggregate([(0, arrs, 10), (1, {k: v.copy() for k, v in arrs.items()}, 30)])
        np.testing.assert_allclose(out["w"], arrs["w"])

    def test_opposite_updates_cancel(self):
        w = np.array([[1.0, -2.0], [0.5, 3.0]])
        out = fed.aggregate([(0, {"w": w}, 5), (1, {"w": -w}, 5)])
        np.testing.assert_allclose(out["w"], np.zeros_like(w))

    def test_three_site_weighted_mean_oracle(self):
        rng = rng_for(6, "agg")
        arrs = [{"w": rng.standard_normal((3, 2))} for _ in range(3)]
        counts = [5, 10, 25]
        out = fed.aggregate([(i, arrs[i], counts[i]) for i in range(3)])
        expected = sum(c / 40 * a["w"] for c, a in zip(counts, arrs))
        np.testing.assert_allclose(out["w"], expected, atol=1e-15)

    def test_affine_in_each_site(self):
        rng = rng_for(7, "agg-affine")
        base = rng.standard_normal(4)
        delta = rng.standard_normal(4)
        out0 = fed.aggregate([(0, {"w": base}, 1), (1, {"w": np.zeros(4)}, 1)])
        out1 = fed.aggregate([(0, {"w": base + delta}, 1), (1, {"w": np.zeros(4)}, 1)])
        np.testing.assert_allclose(out1["w"] - out0["w"], 0.5 * delta, atol=1e-15)

    def test_all_degenerate_raises(self):
        with pytest.raises(fed.FederationError):
            fed.aggregate([(0, {"w": np.ones(2)}, 0)])


class TestLabelPrior:
    def test_empirical(self):
        slides_labels = [1, 1, 0, 0, 0]
        np.testing.assert_allclose(fed.label_prior(slides_labels), [0.6, 0.4])

    def test_smoothing_on_single_class(self):
        prior = fed.label_prior([1, 1, 1])
        assert prior[0] > 0 and prior[1] > 0
        assert prior.sum() == pytest.approx(1.0)


class TestLocalUpdate:
    def test_zero_lr_returns_global_unchanged(self):
        site = make_site(0)
        global_backbone = site.store.arrays(site.store.backbone_paths())
        updated, stats = fed.local_update(site, global_backbone, 0, CFG, settings(lr=0.0))
        for path, arr in global_backbone.items():
            np.testing.assert_array_equal(updated[path], arr)
        assert stats.sample_count == 8
        assert not stats.degenerate

    def test_single_full_batch_step_matches_manual_sgd(self):
        site = make_site(1)
        global_backbone = site.store.arrays(site.store.backbone_paths())

        # manual oracle: one SGD step on the full training batch
        oracle = site.store.copy()
        oracle.load_arrays(global_backbone)
        order = rng_for(77, "shuffle", site.site_id, 0).permutation(len(site.train))
        slides = [
            subsample_points(site.train[i], CFG.n_points,
                             rng_for(77, "subsample", site.train[i].uid, 0))
            for i in order
        ]
        labels = np.array([s.label for s in slides])
        with ad.Tape():
            parts = mdl.total_loss(slides, labels, np.ones(len(slides)), oracle, CFG,
                                   use_aux=False)
            grads = ad.backward(parts.total, leaves=list(oracle.tensors().values()))
        by_path = {p: grads[t] for p, t in oracle.tensors().items() if t in grads}
        ad.sgd_step(oracle.tensors(), by_path, 0.05)

        updated, _ = fed.local_update(site, global_backbone, 0, CFG,
                                      settings(batch_size=100, lr=0.05))
        for path in site.store.backbone_paths():
            np.testing.assert_allclose(updated[path], oracle[path].data, atol=1e-12)

    def test_aux_updates_only_with_aux_loss(self):
        site = make_site(2)
        global_backbone = site.store.arrays(site.store.backbone_paths())
        before = {p: site.store[p].data.copy() for p in site.store.aux_paths()}
        fed.local_update(site, global_backbone, 0, CFG, settings(use_aux=False))
        for p, arr in before.items():
            np.testing.assert_array_equal(site.store[p].data, arr)
        fed.local_update(site, global_backbone, 0, CFG, settings(use_aux=True))
        assert any(not np.array_equal(site.store[p].data, before[p])
                   for p in site.store.aux_paths())

    def test_all_masked_epoch_flags_degenerate(self):
        site = make_site(3, pos_frac=0.0)  # all negative labels
        site.schedule = fed.DDASchedule(b0=1e-9, ramp_rounds=1000)
        global_backbone = site.store.arrays(site.store.backbone_paths())
        updated, stats = fed.local_update(site, global_backbone, 0, CFG,
                                          settings(use_dda=True))
        assert stats.degenerate
        assert stats.skipped_batches == 2  # 8 slides / batch 4
        assert stats.kept_frac == 0.0
        for path, arr in global_backbone.items():
            np.testing.assert_array_equal(updated[path], arr)


class TestFederationLoop:
    def test_single_site_matches_centralized_trajectory(self):
        rounds = 4
        oracle_site = make_site(5)
        init = oracle_site.store.arrays(oracle_site.store.backbone_paths())

        central = fed.run_centralized([make_site(5)], CFG,
                                      settings(rounds=rounds, batch_size=100),
                                      make_site(5).store)
        for r in range(1, rounds + 1):
            fed_result = fed.run_federation([make_site(5)], CFG,
                                            settings(rounds=r, batch_size=100))
            if r == rounds:
                for path in init:
                    np.testing.assert_allclose(
                        fed_result.final_backbone[path], central.final_backbone[path],
                        atol=1e-10,
                    )

    def test_sync_exclusion_backbones_match_aux_differ(self):
        sites = [make_site(6, seed=6), make_site(7, seed=99, pos_frac=0.25)]
        result = fed.run_federation(sites, CFG, settings(rounds=2, use_aux=True))
        # after the last broadcast+update, both sites started the round from
        # the same backbone; their stores still hold their local updates, so
        # re-broadcast to compare the synchronized state
        for site in sites:
            site.store.load_arrays(result.final_backbone)
        a, b = sites
        for path in a.store.backbone_paths():
            np.testing.assert_array_equal(a.store[path].data, b.store[path].data)
        assert any(
            not np.array_equal(a.store[p].data, b.store[p].data) for p in a.store.aux_paths()
        )

    def test_deterministic_rows_and_thread_independence(self):
        run_a = fed.run_federation([make_site(8), make_site(9, seed=4)], CFG,
                                   settings(rounds=2))
        run_b = fed.run_federation([make_site(8), make_site(9, seed=4)], CFG,
                                   settings(rounds=2))
        run_c = fed.run_federation([make_site(8), make_site(9, seed=4)], CFG,
                                   settings(rounds=2, threads=2))
        assert run_a.rows == run_b.rows == run_c.rows
        for path in run_a.final_backbone:
            np.testing.assert_array_equal(run_a.final_backbone[path],
                                          run_b.final_backbone[path])
            np.testing.assert_array_equal(run_a.final_backbone[path],
                                          run_c.final_backbone[path])

    def test_summary_reports_selected_round_and_unseen(self):
        sites = [make_site(10), make_site(11, seed=3)]
        unseen = {"unseen_0": make_site(12, seed=5).test}
        result = fed.run_federation(sites, CFG, settings(rounds=2), unseen=unseen)
        assert 0 <= result.summary["selected_round"] < 2
        assert set(result.summary["test_auc_by_site"]) == {"site_10", "site_11"}
        assert "unseen_0" in result.summary["unseen_auc_by_site"]

    def test_halts_when_every_site_degenerate(self):
        site = make_site(13, pos_frac=0.0)
        site.schedule = fed.DDASchedule(b0=1e-9, ramp_rounds=1000)
        with pytest.raises(fed.FederationError):
            fed.run_federation([site], CFG, settings(rounds=1, use_dda=True))


class TestMetricsCsv:
    def test_exact_format(self, tmp_path):
        rows = [
            fed.MetricsRow(0, "site_0", "train", None, 1.25, 0.5, 1),
            fed.MetricsRow(0, "site_0", "val", 0.875, 0.5, None, None),
            fed.MetricsRow(0, "mean", "val", 0.875, 0.5, None, None),
        ]
        path = tmp_path / "metrics.csv"
        fed.write_metrics_csv(path, rows)
        text = path.read_text().splitlines()
        assert text[0] == "round,site,split,auc,loss,kept_frac,skipped_batches"
        assert text[1] == "0,site_0,train,,1.25,0.5,1"
        assert text[2] == "0,site_0,val,0.875,0.5,,"
        assert text[3] == "0,mean,val,0.875,0.5,,"

    def test_rewrite_is_byte_identical(self, tmp_path):
        result = fed.run_federation([make_site(14)], CFG, settings(rounds=1))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        fed.write_metrics_csv(p1, result.rows)
        fed.write_metrics_csv(p2, result.rows)
        assert p1.read_bytes() == p2.read_bytes()
