"""Command-line entry point.

Subcommands: gen-data, train-federated, train-centralized, eval, fcs-demo.
Every command is deterministic given (config, seed): artifacts written
twice from the same inputs are byte-identical.  Exit codes: 0 success,
2 usage/config error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import federation as fed
from . import model as mdl
from .config import ConfigError, RunConfig, build_config, parse_config_file
from .coverage import CoverageSetup, coverage_csv
from .datasynth import DataError, GeneratedSite, SiteSpec, generate_site, load_split, save_site

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpoint", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-federated", "train-centralized", "eval", "fcs-demo"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--data", help="dataset directory (overrides config)")
        p.add_argument("--variant", help="{fps,fcs}[+dda][+aux]")
        p.add_argument("--rounds", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int, help="local epochs per round")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--checkpoint", help="checkpoint path (eval)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    flag_map = {
        "seed": args.seed, "out_dir": args.out, "data_dir": args.data,
        "variant": args.variant, "rounds": args.rounds, "lr": args.lr,
        "local_epochs": args.epochs, "batch_size": args.batch_size,
        "checkpoint": args.checkpoint,
    }
    for key, value in flag_map.items():
        if value is not None:
            overrides[key] = str(value)
    return build_config(file_values, overrides)


def _site_specs(cfg: RunConfig) -> tuple[list[SiteSpec], list[SiteSpec]]:
    common = dict(
        n_slides=cfg.site_slides,
        points_per_slide=cfg.points_per_slide,
        feature_dim=cfg.feature_dim,
        signal_fraction=cfg.signal_fraction,
        cluster_spread=cfg.cluster_spread,
        noise_scale=cfg.noise_scale,
        seed=cfg.seed,
    )
    federated = [
        SiteSpec(site_id=f"site_{i}", positive_fraction=frac, **common)
        for i, frac in enumerate(cfg.site_positive_fractions)
    ]
    unseen = [
        SiteSpec(site_id=f"unseen_{i}", positive_fraction=frac, **common)
        for i, frac in enumerate(cfg.unseen_positive_fractions)
    ]
    return federated, unseen


def cmd_gen_data(cfg: RunConfig) -> int:
    out = Path(cfg.data_dir)
    federated, unseen = _site_specs(cfg)
    for spec in federated + unseen:
        generated = generate_site(spec)
        save_site(out / spec.site_id, generated)
        print(f"{spec.site_id}: {spec.n_slides} slides "
              f"(positive fraction {spec.positive_fraction})")
    return EXIT_OK


def _load_sites(cfg: RunConfig) -> tuple[list[fed.SiteState], dict[str, list]]:
    """Site states plus unseen slide lists; validates everything up front."""
    data_dir = Path(cfg.data_dir)
    model_cfg = cfg.model_config()
    _, dda_on, _ = cfg.sampling_variant()
    sites = []
    for i in range(cfg.sites):
        site_dir = data_dir / f"site_{i}"
        splits = {split: load_split(site_dir, split) for split in ("train", "val", "test")}
        for split, slides in splits.items():
            for s in slides:
                if s.feature_dim != model_cfg.feature_dim:
                    raise DataError(
                        f"{site_dir}/{split}: slide {s.uid} has {s.feature_dim}-d features, "
                        f"config expects {model_cfg.feature_dim}"
                    )
        store = mdl.init_params(model_cfg, cfg.seed, "model")
        sites.append(
            fed.make_site_state(i, splits["train"], splits["val"], splits["test"],
                                store, cfg.ramp_rounds(), cfg.schedule)
        )
    unseen: dict[str, list] = {}
    for i in range(cfg.unseen_sites):
        site_dir = data_dir / f"unseen_{i}"
        if not site_dir.exists():
            continue
        unseen[f"unseen_{i}"] = [
            s for split in ("train", "val", "test") for s in load_split(site_dir, split)
        ]
    return sites, unseen


def _train_settings(cfg: RunConfig) -> fed.TrainSettings:
    _, dda_on, aux_on = cfg.sampling_variant()
    return fed.TrainSettings(
        lr=cfg.lr, local_epochs=cfg.local_epochs, batch_size=cfg.batch_size,
        rounds=cfg.rounds, use_dda=dda_on, use_aux=aux_on, seed=cfg.seed,
        threads=fed.default_threads(),
    )


def _write_run_artifacts(cfg: RunConfig, result: fed.FederationResult) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fed.write_metrics_csv(out / "metrics.csv", result.rows)
    mdl.save_checkpoint(out / "checkpoint.ptck", result.best_backbone)
    (out / "summary.json").write_text(
        json.dumps(result.summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def cmd_train(cfg: RunConfig, federated: bool) -> int:
    sites, unseen = _load_sites(cfg)
    settings = _train_settings(cfg)
    if federated:
        result = fed.run_federation(sites, cfg.model_config(), settings, unseen=unseen)
    else:
        store = mdl.init_params(cfg.model_config(), cfg.seed, "model")
        result = fed.run_centralized(sites, cfg.model_config(), settings, store)
    _write_run_artifacts(cfg, result)
    for key in ("selected_round", "mean_val_auc", "mean_test_auc"):
        print(f"{key}: {result.summary.get(key)}")
    for name, auc in sorted(result.summary.get("test_auc_by_site", {}).items()):
        print(f"test_auc[{name}]: {auc:.4f}")
    if "mean_unseen_auc" in result.summary:
        print(f"mean_unseen_auc: {result.summary['mean_unseen_auc']:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    arrays, _roles = mdl.load_checkpoint(cfg.checkpoint)
    model_cfg = cfg.model_config()
    store = mdl.init_params(model_cfg, cfg.seed, "model")
    store.load_arrays({p: a for p, a in arrays.items() if p in store.tensors()})
    sites, unseen = _load_sites(cfg)
    lines = ["site,split,auc,loss"]
    for site in sites:
        for split in ("val", "test"):
            auc, loss = fed.evaluate_split(getattr(site, split), store, model_cfg,
                                           cfg.seed, batch_size=cfg.batch_size)
            lines.append(f"site_{site.site_id},{split},{auc:.12g},{loss:.12g}")
            print(lines[-1])
    for name in sorted(unseen):
        auc, loss = fed.evaluate_split(unseen[name], store, model_cfg,
                                       cfg.seed, batch_size=cfg.batch_size)
        lines.append(f"{name},all,{auc:.12g},{loss:.12g}")
        print(lines[-1])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_fcs_demo(cfg: RunConfig) -> int:
    setup = CoverageSetup(
        n_points=cfg.demo_points, sample_size=cfg.demo_sample,
        feature_dim=cfg.feature_dim, signal_fraction=cfg.signal_fraction,
        cluster_spread=cfg.cluster_spread, noise_scale=cfg.noise_scale,
        trials=cfg.demo_trials, seed=cfg.seed,
    )
    csv_text = coverage_csv(setup)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fcs_demo.csv").write_text(csv_text, encoding="utf-8")
    print(csv_text.splitlines()[-1])
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train-federated":
            return cmd_train(cfg, federated=True)
        if args.command == "train-centralized":
            return cmd_train(cfg, federated=False)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "fcs-demo":
            return cmd_fcs_demo(cfg)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, mdl.CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (fed.FederationError, fed.UndefinedAUCError, ArithmeticError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
