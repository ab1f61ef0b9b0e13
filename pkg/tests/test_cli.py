"""Config parsing and end-to-end CLI runs on a miniature dataset."""

import json
from pathlib import Path

import numpy as np
import pytest

from fedpoint import cli
from fedpoint.config import ConfigError, build_config, parse_config_file
from fedpoint.coverage import CoverageSetup, coverage_csv, run_coverage

TINY = {
    "sites": "2",
    "site_slides": "20",
    "site_positive_fractions": "0.3,0.5",
    "unseen_sites": "1",
    "unseen_positive_fractions": "0.4",
    "points_per_slide": "1024",
    "feature_dim": "8",
    "subsample_points": "32",
    "embed_channels": "8",
    "stage_channels": "8,8",
    "k_attention": "8",
    "k_grouping": "8",
    "head_hidden": "8",
    "slide_feature_dim": "8",
    "rounds": "2",
    "batch_size": "8",
    "lr": "0.05",
    "demo_points": "64",
    "demo_trials": "5",
}


def write_tiny_config(path: Path, **extra) -> Path:
    values = dict(TINY)
    values.update({k: str(v) for k, v in extra.items()})
    path.write_text("\n".join(f"{k} = {v}" for k, v in values.items()) + "\n")
    return path


class TestConfigParsing:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("# nothing here\n\n")
        cfg = build_config(parse_config_file(path))
        assert cfg.rounds == 30
        assert cfg.variant == "fcs+dda+aux"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key: learning_rate"):
            build_config({"learning_rate": "0.1"})

    def test_negative_lr_rejected(self):
        with pytest.raises(ConfigError, match="lr"):
            build_config({"lr": "-1"})

    def test_flag_overrides_file_value(self, tmp_path):
        path = write_tiny_config(tmp_path / "c.cfg", lr="0.05")
        cfg = build_config(parse_config_file(path), {"lr": "0.2"})
        assert cfg.lr == 0.2

    def test_bad_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("rounds 30\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_file(path)

    def test_type_error_names_key(self):
        with pytest.raises(ConfigError, match="rounds"):
            build_config({"rounds": "thirty"})

    @pytest.mark.parametrize(
        "variant,expected",
        [
            ("fps", ("fps", False, False)),
            ("fcs", ("fcs", False, False)),
            ("fps+dda+aux", ("fps", True, True)),
            ("fcs+dda+aux", ("fcs", True, True)),
            ("fcs+aux", ("fcs", False, True)),
        ],
    )
    def test_variant_grid(self, variant, expected):
        cfg = build_config({"variant": variant})
        assert cfg.sampling_variant() == expected

    def test_bad_variant(self):
        with pytest.raises(ConfigError, match="variant"):
            build_config({"variant": "fts+dda"})

    def test_mismatched_fraction_count(self):
        with pytest.raises(ConfigError, match="site_positive_fractions"):
            build_config({"sites": "3"})


class TestCoverage:
    def test_fcs_covers_at_least_as_often_as_fps(self):
        setup = CoverageSetup(n_points=128, trials=20, feature_dim=16, seed=1)
        _, fcs_rate, fps_rate = run_coverage(setup)
        assert 0.0 <= fps_rate <= fcs_rate <= 1.0

    def test_full_sample_covers_everything(self):
        setup = CoverageSetup(n_points=64, sample_size=64, trials=5, feature_dim=8)
        _, fcs_rate, fps_rate = run_coverage(setup)
        assert fcs_rate == 1.0 and fps_rate == 1.0

    def test_csv_deterministic(self):
        setup = CoverageSetup(n_points=64, trials=5, feature_dim=8, seed=3)
        assert coverage_csv(setup) == coverage_csv(setup)


class TestCliCommands:
    def run(self, *argv):
        return cli.main(list(argv))

    def test_gen_train_eval_demo_pipeline(self, tmp_path, capsys):
        cfg = write_tiny_config(tmp_path / "run.cfg")
        data = tmp_path / "data"
        out = tmp_path / "out"
        assert self.run("gen-data", "--config", str(cfg), "--data", str(data)) == 0
        assert (data / "site_0" / "train.manifest").exists()
        assert (data / "unseen_0" / "test.manifest").exists()

        assert self.run("train-federated", "--config", str(cfg), "--data", str(data),
                        "--out", str(out)) == 0
        assert (out / "metrics.csv").exists()
        assert (out / "checkpoint.ptck").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert "mean_test_auc" in summary and "mean_unseen_auc" in summary

        assert self.run("eval", "--config", str(cfg), "--data", str(data),
                        "--out", str(tmp_path / "eval_out"),
                        "--checkpoint", str(out / "checkpoint.ptck")) == 0
        eval_lines = (tmp_path / "eval_out" / "eval.csv").read_text().splitlines()
        assert eval_lines[0] == "site,split,auc,loss"
        assert any(line.startswith("unseen_0,all,") for line in eval_lines)

        assert self.run("fcs-demo", "--config", str(cfg),
                        "--out", str(tmp_path / "demo_out")) == 0
        demo = (tmp_path / "demo_out" / "fcs_demo.csv").read_text().splitlines()
        assert demo[0] == "trial,seed,fcs_covered,fps_covered"
        assert demo[-1].startswith("summary,")

    def test_reruns_are_byte_identical(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "run.cfg")
        outputs = []
        for tag in ("a", "b"):
            data = tmp_path / f"data_{tag}"
            out = tmp_path / f"out_{tag}"
            assert self.run("gen-data", "--config", str(cfg), "--data", str(data)) == 0
            assert self.run("train-federated", "--config", str(cfg), "--data", str(data),
                            "--out", str(out)) == 0
            outputs.append(out)
        for name in ("metrics.csv", "checkpoint.ptck", "summary.json"):
            assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()
        slide = "site_0/train.manifest"
        assert (tmp_path / "data_a" / slide).read_bytes() == (tmp_path / "data_b" / slide).read_bytes()

    def test_centralized_mode_runs(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "run.cfg", rounds=1)
        data = tmp_path / "data"
        out = tmp_path / "out"
        assert self.run("gen-data", "--config", str(cfg), "--data", str(data)) == 0
        assert self.run("train-centralized", "--config", str(cfg), "--data", str(data),
                        "--out", str(out)) == 0
        assert (out / "metrics.csv").read_text().splitlines()[1].split(",")[1] == "central"

    def test_missing_manifest_exits_3_without_outputs(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "run.cfg")
        out = tmp_path / "out"
        code = self.run("train-federated", "--config", str(cfg),
                        "--data", str(tmp_path / "nowhere"), "--out", str(out))
        assert code == 3
        assert not out.exists()

    def test_config_error_exits_2(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "run.cfg")
        assert self.run("train-federated", "--config", str(cfg), "--set", "lr=-5") == 2
        assert self.run("gen-data", "--config", str(cfg), "--set", "nope=1") == 2

    def test_eval_without_checkpoint_is_usage_error(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "run.cfg")
        assert self.run("eval", "--config", str(cfg)) == 2

    def test_variant_flag_reaches_training(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "run.cfg", rounds=1)
        data = tmp_path / "data"
        assert self.run("gen-data", "--config", str(cfg), "--data", str(data)) == 0
        out_a = tmp_path / "fps_run"
        out_b = tmp_path / "fcs_run"
        assert self.run("train-federated", "--config", str(cfg), "--data", str(data),
                        "--out", str(out_a), "--variant", "fps") == 0
        assert self.run("train-federated", "--config", str(cfg), "--data", str(data),
                        "--out", str(out_b), "--variant", "fcs+dda+aux") == 0
        assert (out_a / "metrics.csv").read_bytes() != (out_b / "metrics.csv").read_bytes()
