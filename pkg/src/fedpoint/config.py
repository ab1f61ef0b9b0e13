"""Run configuration: flat `key = value` files plus flag overrides.

Unknown keys are rejected; flags always win over file values.  The same
RunConfig drives data generation, federated/centralized training,
evaluation, and the sampling-coverage demo.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig


class ConfigError(ValueError):
    """Bad config file, unknown key, or invalid value."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(p) for p in raw.split(",") if p.strip())


def _parse_ints(raw: str) -> tuple[int, ...]:
    return tuple(int(p) for p in raw.split(",") if p.strip())


@dataclass
class RunConfig:
    # run
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "out"
    rounds: int = 30
    local_epochs: int = 1
    lr: float = 0.1
    batch_size: int = 16
    variant: str = "fcs+dda+aux"
    schedule: str = "linear"
    k_ramp: int = 0  # 0 -> rounds // 2
    # model
    subsample_points: int = 256
    embed_channels: int = 16
    stage_channels: tuple[int, ...] = (32, 64, 128, 128)
    k_attention: int = 16
    k_grouping: int = 16
    head_hidden: int = 64
    slide_feature_dim: int = 64
    cosine_denominator: str = "max"
    # data generation
    sites: int = 4
    site_slides: int = 200
    site_positive_fractions: tuple[float, ...] = (0.1, 0.2, 0.35, 0.5)
    points_per_slide: int = 2048
    feature_dim: int = 64
    signal_fraction: float = 0.03
    cluster_spread: float = 0.02
    noise_scale: float = 0.3
    unseen_sites: int = 2
    unseen_positive_fractions: tuple[float, ...] = (0.15, 0.4)
    # fcs-demo
    demo_points: int = 256
    demo_sample: int = 0  # 0 -> demo_points // 4
    demo_trials: int = 100
    # eval
    checkpoint: str = ""

    def sampling_variant(self) -> tuple[str, bool, bool]:
        """(sampling, dda on, aux on) from e.g. 'fcs+dda+aux'."""
        parts = self.variant.split("+")
        base, extras = parts[0], set(parts[1:])
        if base not in ("fps", "fcs") or not extras <= {"dda", "aux"}:
            raise ConfigError(f"bad variant {self.variant!r}: expected {{fps,fcs}}[+dda][+aux]")
        return base, "dda" in extras, "aux" in extras

    def ramp_rounds(self) -> int:
        return self.k_ramp if self.k_ramp > 0 else max(1, self.rounds // 2)

    def model_config(self) -> ModelConfig:
        sampling, _, _ = self.sampling_variant()
        return ModelConfig(
            n_points=self.subsample_points,
            feature_dim=self.feature_dim,
            embed_channels=self.embed_channels,
            stage_channels=tuple(self.stage_channels),
            k_attention=self.k_attention,
            k_grouping=self.k_grouping,
            head_hidden=self.head_hidden,
            slide_feature_dim=self.slide_feature_dim,
            sampling=sampling,
            cosine_denominator=self.cosine_denominator,
        )

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(f"config key {key}: {why}")

        if self.lr <= 0:
            bad("lr", f"must be positive, got {self.lr}")
        if self.rounds < 1:
            bad("rounds", "must be at least 1")
        if self.local_epochs < 1:
            bad("local_epochs", "must be at least 1")
        if self.batch_size < 1:
            bad("batch_size", "must be at least 1")
        if self.seed < 0:
            bad("seed", "must be non-negative")
        if self.schedule not in ("linear", "cosine", "step"):
            bad("schedule", f"unknown schedule {self.schedule!r}")
        if self.k_ramp < 0:
            bad("k_ramp", "must be non-negative")
        if self.cosine_denominator not in ("max", "product"):
            bad("cosine_denominator", "must be 'max' or 'product'")
        self.sampling_variant()
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(f"model shape invalid: {exc}") from exc
        if self.sites < 1:
            bad("sites", "must be at least 1")
        if len(self.site_positive_fractions) != self.sites:
            bad("site_positive_fractions",
                f"need {self.sites} values, got {len(self.site_positive_fractions)}")
        for frac in self.site_positive_fractions + self.unseen_positive_fractions:
            if not 0.0 < frac < 1.0:
                bad("site_positive_fractions", f"fractions must be in (0, 1), got {frac}")
        if self.unseen_sites != len(self.unseen_positive_fractions):
            bad("unseen_positive_fractions",
                f"need {self.unseen_sites} values, got {len(self.unseen_positive_fractions)}")
        if not 0.0 < self.signal_fraction <= 0.2:
            bad("signal_fraction", "must be in (0, 0.2]")
        if self.points_per_slide < max(1024, self.subsample_points):
            bad("points_per_slide",
                f"must be >= max(1024, subsample_points), got {self.points_per_slide}")
        if self.demo_points < 4 or self.demo_trials < 1:
            bad("demo_points", "demo needs at least 4 points and 1 trial")
        if self.demo_sample < 0 or self.demo_sample > self.demo_points:
            bad("demo_sample", "must be in [0, demo_points]")


# dataclass field annotations are strings (postponed evaluation)
_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "tuple[int, ...]": _parse_ints,
    "tuple[float, ...]": _parse_floats,
}


def _field_parsers() -> dict[str, object]:
    return {f.name: _PARSERS[f.type] for f in fields(RunConfig)}


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; blank lines and # comments allowed."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for ln, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def build_config(file_values: dict[str, str] | None = None,
                 overrides: dict[str, str] | None = None) -> RunConfig:
    """Typed RunConfig from file values with flag overrides on top."""
    parsers = _field_parsers()
    merged = dict(file_values or {})
    merged.update(overrides or {})
    kwargs = {}
    for key, raw in merged.items():
        if key not in parsers:
            raise ConfigError(f"unknown config key: {key}")
        try:
            kwargs[key] = parsers[key](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config key {key}: cannot parse {raw!r}: {exc}") from exc
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg
