"""Synthetic data generation, subsampling, and slide file round trips."""

import numpy as np
import pytest

from fedpoint import datasynth as ds
from fedpoint.seeding import rng_for


def small_spec(**overrides):
    base = dict(
        site_id="site_t",
        n_slides=20,
        positive_fraction=0.3,
        points_per_slide=1024,
        feature_dim=16,
        signal_fraction=0.03,
        cluster_spread=0.02,
        noise_scale=0.3,
        seed=7,
    )
    base.update(overrides)
    return ds.SiteSpec(**base)


class TestSiteSpec:
    def test_rejects_zero_signal_fraction(self):
        with pytest.raises(ValueError, match="signal_fraction"):
            small_spec(signal_fraction=0.0)

    def test_rejects_degenerate_fraction(self):
        with pytest.raises(ValueError, match="positive_fraction"):
            small_spec(positive_fraction=1.0)

    def test_rejects_small_slides(self):
        with pytest.raises(ValueError, match="points_per_slide"):
            small_spec(points_per_slide=512)


class TestGeneration:
    def test_exact_positive_quota(self):
        gen = ds.generate_site(small_spec(n_slides=100, positive_fraction=0.5))
        assert sum(s.label for s in gen.slides) == 50

    def test_quota_matches_fraction_exactly(self):
        gen = ds.generate_site(small_spec(n_slides=20, positive_fraction=0.3))
        assert sum(s.label for s in gen.slides) == 6

    def test_signal_point_counts(self):
        spec = small_spec()
        gen = ds.generate_site(spec)
        expected = round(spec.signal_fraction * spec.points_per_slide)
        for slide in gen.slides:
            n_signal = gen.signal_counts[slide.uid]
            assert n_signal == (expected if slide.label == 1 else 0)

    def test_generation_is_pure_function_of_spec(self):
        a = ds.generate_site(small_spec())
        b = ds.generate_site(small_spec())
        assert a.splits == b.splits
        for s1, s2 in zip(a.slides, b.slides):
            assert np.array_equal(s1.positions, s2.positions)
            assert np.array_equal(s1.features, s2.features)

    def test_split_sizes_and_disjointness(self):
        for n in (20, 33, 100):
            gen = ds.generate_site(small_spec(n_slides=n))
            sizes = {k: len(v) for k, v in gen.splits.items()}
            assert sizes["train"] == int(np.floor(0.6 * n))
            assert sizes["val"] == int(np.floor(0.1 * n))
            assert sizes["test"] == n - sizes["train"] - sizes["val"]
            everything = sorted(i for v in gen.splits.values() for i in v)
            assert everything == list(range(n))

    def test_splits_keep_both_classes(self):
        # (20, 0.9) would leave 2 negatives for 3 splits: arithmetically impossible
        for n, frac in ((100, 0.1), (20, 0.3), (20, 0.8), (33, 0.15)):
            gen = ds.generate_site(small_spec(n_slides=n, positive_fraction=frac))
            for split in ("train", "val", "test"):
                labels = {gen.slides[i].label for i in gen.splits[split]}
                if len(gen.splits[split]) >= 2:
                    assert labels == {0, 1}, (n, frac, split)

    def test_mean_projection_separates_classes(self):
        spec = small_spec(n_slides=30, noise_scale=0.3)  # noise <= 0.5 * shift
        gen = ds.generate_site(spec)
        direction = ds.signal_direction(spec.feature_dim)
        projections = {0: [], 1: []}
        for slide in gen.slides:
            projections[slide.label].append(float((slide.features @ direction).mean()))
        margin = min(projections[1]) - max(projections[0])
        assert margin > 0.0

    def test_positions_z_fixed(self):
        gen = ds.generate_site(small_spec(n_slides=4))
        for slide in gen.slides:
            assert np.all(slide.positions[:, 2] == 1.0)


class TestSubsample:
    def test_full_size_is_identity(self):
        gen = ds.generate_site(small_spec(n_slides=4))
        slide = gen.slides[0]
        out = ds.subsample_points(slide, slide.n, rng_for(0, "sub"))
        assert out is slide

    def test_same_seed_same_selection(self):
        gen = ds.generate_site(small_spec(n_slides=4))
        slide = gen.slides[0]
        a = ds.subsample_points(slide, 64, rng_for(3, "sub", 1))
        b = ds.subsample_points(slide, 64, rng_for(3, "sub", 1))
        assert np.array_equal(a.positions, b.positions)
        assert a.label == slide.label and a.uid == slide.uid

    def test_too_few_points_raises(self):
        gen = ds.generate_site(small_spec(n_slides=4))
        with pytest.raises(ValueError, match="cannot subsample"):
            ds.subsample_points(gen.slides[0], 2048, rng_for(0, "sub"))

    def test_selection_frequencies_match_hypergeometric_rate(self):
        # 10,000-point slide, 1,000 trials, selecting 1,024 each time.
        # Marginally each point is Binomial(1000, 0.1024): individual 3-sigma
        # excursions are expected (~0.27% of points), so assert the aggregate:
        # outlier fraction near its expectation and no excursion beyond 5 sigma.
        n, n_sub, trials = 10_000, 1024, 1000
        p = n_sub / n
        counts = np.zeros(n)
        for t in range(trials):
            idx = rng_for(9, "hyper", t).choice(n, size=n_sub, replace=False)
            counts[idx] += 1
        freq = counts / trials
        sigma = np.sqrt(p * (1 - p) / trials)
        deviations = np.abs(freq - p) / sigma
        assert (deviations > 3).mean() < 0.01  # expectation is ~0.27%
        assert deviations.max() < 5.0


class TestSlideFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        gen = ds.generate_site(small_spec(n_slides=2))
        slide = gen.slides[0]
        path = tmp_path / "one.ptws"
        ds.save_slide(path, slide)
        loaded = ds.load_slide(path, uid=slide.uid)
        assert np.array_equal(loaded.positions, slide.positions)
        assert np.array_equal(loaded.features, slide.features)
        assert loaded.label == slide.label

    def test_truncated_file_reports_offset(self, tmp_path):
        gen = ds.generate_site(small_spec(n_slides=2))
        path = tmp_path / "trunc.ptws"
        ds.save_slide(path, gen.slides[0])
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ds.SlideFormatError, match="byte"):
            ds.load_slide(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ptws"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ds.SlideFormatError, match="magic"):
            ds.load_slide(path)

    def test_bad_version_rejected(self, tmp_path):
        gen = ds.generate_site(small_spec(n_slides=2))
        path = tmp_path / "ver.ptws"
        ds.save_slide(path, gen.slides[0])
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(ds.SlideFormatError, match="version"):
            ds.load_slide(path)

    def test_against_independent_text_writer(self, tmp_path):
        """Dual-writer check: a textual dump must agree with the binary loader."""
        gen = ds.generate_site(small_spec(n_slides=2, feature_dim=5))
        slide = gen.slides[1]

        # independent writer: plain text, float32 repr per value
        text_path = tmp_path / "dump.txt"
        rows = np.concatenate([slide.positions, slide.features], axis=1).astype(np.float32)
        lines = [f"{slide.n} {slide.feature_dim} {slide.label}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in rows]
        text_path.write_text("\n".join(lines))

        bin_path = tmp_path / "dump.ptws"
        ds.save_slide(bin_path, slide)
        loaded = ds.load_slide(bin_path)

        header, *body = text_path.read_text().splitlines()
        n, d, label = (int(v) for v in header.split())
        assert (n, d, label) == (loaded.n, loaded.feature_dim, loaded.label)
        parsed = np.array([[np.float32(v) for v in line.split()] for line in body])
        recon = np.concatenate([loaded.positions, loaded.features], axis=1).astype(np.float32)
        assert np.array_equal(parsed.astype(np.float32), recon)


class TestManifests:
    def test_site_round_trip(self, tmp_path):
        gen = ds.generate_site(small_spec(n_slides=10))
        ds.save_site(tmp_path / "site", gen)
        for split in ("train", "val", "test"):
            slides = ds.load_split(tmp_path / "site", split)
            assert len(slides) == len(gen.splits[split])
            for loaded, idx in zip(slides, gen.splits[split]):
                original = gen.slides[idx]
                assert loaded.uid == original.uid
                assert loaded.label == original.label
                assert np.array_equal(loaded.features, original.features)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ds.DataError, match="manifest"):
            ds.load_split(tmp_path, "train")

    def test_comments_and_bad_lines(self, tmp_path):
        path = tmp_path / "m.manifest"
        path.write_text("# comment\na\t1\tslides/a.ptws\n")
        assert ds.read_manifest(path) == [("a", 1, "slides/a.ptws")]
        path.write_text("a\t7\tslides/a.ptws\n")
        with pytest.raises(ds.DataError, match="label"):
            ds.read_manifest(path)
        path.write_text("a\t1\tx\na\t0\ty\n")
        with pytest.raises(ds.DataError, match="duplicate"):
            ds.read_manifest(path)
