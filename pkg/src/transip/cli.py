"""Command-line entry point.

Subcommands: gen-data, train, eval, probe, export-plot-data. Configuration
comes from an INI-style file of flat ``key = value`` sections ([model],
[train], [data], [probe]) plus command-line overrides; unknown keys are an
error. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_model
from .evaluate import (
    CSV_HEADER,
    PROBE_ROTATIONS,
    PROBE_SEED,
    compare_models,
    evaluate_model,
    latent_equivariance_probe,
    output_equivariance_probe,
)
from .losses import LossWeights
from .model import ModelConfig, init_parameters, param_count
from .moldata import (
    CHARGE_CHOICES,
    ELEMENT_LJ_TABLE,
    SPIN_CHOICES,
    DataError,
    charge_spin_offset,
    generate_lj_dataset,
    read_dataset,
    write_dataset,
)
from .train import NumericError, TrainConfig, split_dataset, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Bad configuration file or incompatible settings."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str | None = None
    out: str | None = None
    probe_rotations: int = PROBE_ROTATIONS
    probe_seed: int = PROBE_SEED
    probe_molecules: int = 32
    category: str = "all"


def _parse_int_pair(text: str) -> tuple[int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated integers, got {text!r}")
    return int(parts[0]), int(parts[1])


_MODEL_KEYS = {
    "hidden_dim": int,
    "num_layers": int,
    "num_heads": int,
    "context_length": int,
    "projection_dropout": float,
    "attention_dropout": float,
    "feedforward_multiplier": int,
    "charge_vocab_range": _parse_int_pair,
    "spin_vocab_range": _parse_int_pair,
    "ttau_layers": int,
    "ttau_hidden_multiplier": int,
    "energy_scale": float,
    "energy_shift": float,
}

_TRAIN_KEYS = {
    "learning_rate": float,
    "weight_decay": float,
    "grad_clip_norm": float,
    "warmup_fraction": float,
    "min_lr_factor": float,
    "epochs": int,
    "batch_max_tokens": int,
    "seed": int,
    "mode": str,
    "lambda_e": float,
    "lambda_f": float,
    "lambda_leq": float,
}

_DATA_KEYS = {"dataset": str, "out": str}

_PROBE_KEYS = {"rotations": int, "seed": int, "molecules": int, "category": str}

_SECTIONS = {
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "data": _DATA_KEYS,
    "probe": _PROBE_KEYS,
}


def load_run_config(path: str | Path | None) -> RunConfig:
    """Resolve the configuration file over documented defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        known = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")

    model_kwargs = {}
    for key, convert in _MODEL_KEYS.items():
        if parser.has_option("model", key):
            model_kwargs[key] = convert(parser.get("model", key))
    try:
        model = ModelConfig(**model_kwargs) if model_kwargs else ModelConfig()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    train_kwargs = {}
    weight_names = {"lambda_e": "lambda_E", "lambda_f": "lambda_F", "lambda_leq": "lambda_leq"}
    weights_kwargs = {}
    for key, convert in _TRAIN_KEYS.items():
        if parser.has_option("train", key):
            value = convert(parser.get("train", key))
            if key in weight_names:
                weights_kwargs[weight_names[key]] = value
            else:
                train_kwargs[key] = value
    if weights_kwargs:
        defaults = LossWeights()
        train_kwargs["weights"] = LossWeights(
            lambda_E=weights_kwargs.get("lambda_E", defaults.lambda_E),
            lambda_F=weights_kwargs.get("lambda_F", defaults.lambda_F),
            lambda_leq=weights_kwargs.get("lambda_leq", defaults.lambda_leq),
        )
    try:
        train_cfg = TrainConfig(**train_kwargs) if train_kwargs else TrainConfig()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    cfg = RunConfig(model=model, train=train_cfg)
    if parser.has_option("data", "dataset"):
        cfg.dataset = parser.get("data", "dataset")
    if parser.has_option("data", "out"):
        cfg.out = parser.get("data", "out")
    if parser.has_option("probe", "rotations"):
        cfg.probe_rotations = parser.getint("probe", "rotations")
    if parser.has_option("probe", "seed"):
        cfg.probe_seed = parser.getint("probe", "seed")
    if parser.has_option("probe", "molecules"):
        cfg.probe_molecules = parser.getint("probe", "molecules")
    if parser.has_option("probe", "category"):
        cfg.category = parser.get("probe", "category")
    return cfg


def render_run_config(cfg: RunConfig) -> str:
    """The fully resolved configuration in config-file syntax."""
    m, t = cfg.model, cfg.train
    lines = ["[model]"]
    lines += [
        f"hidden_dim = {m.hidden_dim}",
        f"num_layers = {m.num_layers}",
        f"num_heads = {m.num_heads}",
        f"context_length = {m.context_length}",
        f"projection_dropout = {m.projection_dropout}",
        f"attention_dropout = {m.attention_dropout}",
        f"feedforward_multiplier = {m.feedforward_multiplier}",
        f"charge_vocab_range = {m.charge_vocab_range[0]},{m.charge_vocab_range[1]}",
        f"spin_vocab_range = {m.spin_vocab_range[0]},{m.spin_vocab_range[1]}",
        f"ttau_layers = {m.ttau_layers}",
        f"ttau_hidden_multiplier = {m.ttau_hidden_multiplier}",
        f"energy_scale = {m.energy_scale}",
        f"energy_shift = {m.energy_shift}",
        "",
        "[train]",
        f"learning_rate = {t.learning_rate}",
        f"weight_decay = {t.weight_decay}",
        f"grad_clip_norm = {t.grad_clip_norm}",
        f"warmup_fraction = {t.warmup_fraction}",
        f"min_lr_factor = {t.min_lr_factor}",
        f"epochs = {t.epochs}",
        f"batch_max_tokens = {t.batch_max_tokens}",
        f"seed = {t.seed}",
        f"mode = {t.mode}",
        f"lambda_e = {t.weights.lambda_E}",
        f"lambda_f = {t.weights.lambda_F}",
        f"lambda_leq = {t.weights.lambda_leq}",
        "",
        "[data]",
        f"dataset = {cfg.dataset or ''}",
        f"out = {cfg.out or ''}",
        "",
        "[probe]",
        f"rotations = {cfg.probe_rotations}",
        f"seed = {cfg.probe_seed}",
        f"molecules = {cfg.probe_molecules}",
        f"category = {cfg.category}",
    ]
    return "\n".join(lines) + "\n"


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.atoms_min < 2:
        print("error: --atoms-min must be at least 2 (pair potential needs a dimer)", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.out or "dataset.jsonl")
    if out.exists() and not args.force:
        print(f"error: {out} exists (use --force to overwrite)", file=sys.stderr)
        return EXIT_DATA
    palette = [int(z) for z in args.palette.split(",")] if args.palette else [1, 6, 7, 8]
    seed = args.seed if args.seed is not None else cfg.train.seed
    records = generate_lj_dataset(
        count=args.count,
        atoms_min=args.atoms_min,
        atoms_max=args.atoms_max,
        element_palette=palette,
        rng=np.random.default_rng(seed),
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(records, out)
    manifest = {
        "seed": seed,
        "count": len(records),
        "atoms_min": args.atoms_min,
        "atoms_max": args.atoms_max,
        "element_palette": palette,
        "pair_parameters": {str(z): ELEMENT_LJ_TABLE[z] for z in palette},
        "charge_spin_offsets": {
            f"q={q},s={s}": charge_spin_offset(q, s)
            for q in CHARGE_CHOICES
            for s in SPIN_CHOICES
        },
        "content_sha256": _sha256_file(out),
    }
    manifest_path = out.with_suffix(out.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(records)} records to {out}")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset_path = args.data or cfg.dataset
    if dataset_path is None:
        print("error: no dataset given (--data or [data] dataset)", file=sys.stderr)
        return EXIT_CONFIG
    if not Path(dataset_path).exists():
        print(f"error: dataset not found: {dataset_path}", file=sys.stderr)
        return EXIT_DATA

    train_cfg = cfg.train
    if args.mode:
        train_cfg = replace(train_cfg, mode=args.mode)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    resolved = RunConfig(
        model=cfg.model,
        train=train_cfg,
        dataset=str(dataset_path),
        out=args.out or cfg.out,
        probe_rotations=cfg.probe_rotations,
        probe_seed=cfg.probe_seed,
        probe_molecules=cfg.probe_molecules,
        category=cfg.category,
    )

    if args.dry_run:
        params = init_parameters(resolved.model, seed=train_cfg.seed)
        print(f"config ok; parameter count: {param_count(params)}")
        return EXIT_OK

    out_dir = Path(resolved.out or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(render_run_config(resolved), encoding="utf-8")

    records = read_dataset(dataset_path)
    result = train(records, resolved.model, train_cfg, out_dir=out_dir, resume=args.resume)
    print(f"trained {len(result.log)} steps; final checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def _load_checkpoint_checked(ckpt_path: str, cfg: RunConfig, config_given: bool):
    model_cfg, params, meta, _ = load_model(ckpt_path)
    if config_given and model_cfg != cfg.model:
        raise ConfigError(
            "checkpoint/config mismatch: checkpoint has "
            f"d={model_cfg.hidden_dim}, L={model_cfg.num_layers}, h={model_cfg.num_heads}; "
            f"config asks d={cfg.model.hidden_dim}, L={cfg.model.num_layers}, "
            f"h={cfg.model.num_heads}"
        )
    return model_cfg, params, meta


def _held_out_records(records, seed: int, use_split: bool):
    if not use_split:
        return records
    _, held = split_dataset(records, seed)
    return held if held else records


def cmd_eval(args: argparse.Namespace, cfg: RunConfig, config_given: bool) -> int:
    if not Path(args.ckpt).exists():
        print(f"error: checkpoint not found: {args.ckpt}", file=sys.stderr)
        return EXIT_DATA
    dataset_path = args.data or cfg.dataset
    if dataset_path is None or not Path(dataset_path).exists():
        print(f"error: dataset not found: {dataset_path}", file=sys.stderr)
        return EXIT_DATA
    model_cfg, params, _ = _load_checkpoint_checked(args.ckpt, cfg, config_given)
    records = read_dataset(dataset_path)
    if args.holdout:
        records = _held_out_records(records, cfg.train.seed, True)
    report = evaluate_model(
        params,
        model_cfg,
        records,
        category_tag=args.category or cfg.category,
        rotations_per_molecule=args.rotations if args.rotations is not None else cfg.probe_rotations,
        seed=args.probe_seed if args.probe_seed is not None else cfg.probe_seed,
        probe_molecules=cfg.probe_molecules,
    )
    out = Path(args.out or "metrics.csv")
    compare_rows = [
        [
            args.ckpt,
            report.category_tag,
            report.sample_count,
            report.force_mae,
            report.force_cosine,
            report.energy_per_atom_mae,
            report.total_energy_mae,
            report.latent_equiv_error,
            report.energy_rotation_invariance_error,
            report.force_rotation_equivariance_error,
        ]
    ]
    _write_csv(out, compare_rows)
    print(f"force_mae={report.force_mae:.6f} eV/A  force_cos={report.force_cosine:.4f}")
    print(
        f"energy_atom_mae={report.energy_per_atom_mae:.6f} eV/atom  "
        f"energy_total_mae={report.total_energy_mae:.6f} eV"
    )
    print(f"wrote {out}")
    return EXIT_OK


def cmd_probe(args: argparse.Namespace, cfg: RunConfig, config_given: bool) -> int:
    if not Path(args.ckpt).exists():
        print(f"error: checkpoint not found: {args.ckpt}", file=sys.stderr)
        return EXIT_DATA
    dataset_path = args.data or cfg.dataset
    if dataset_path is None or not Path(dataset_path).exists():
        print(f"error: dataset not found: {dataset_path}", file=sys.stderr)
        return EXIT_DATA
    model_cfg, params, _ = _load_checkpoint_checked(args.ckpt, cfg, config_given)
    records = read_dataset(dataset_path)
    if args.holdout:
        records = _held_out_records(records, cfg.train.seed, True)
    rotations = args.rotations if args.rotations is not None else cfg.probe_rotations
    seed = args.probe_seed if args.probe_seed is not None else cfg.probe_seed
    cap = cfg.probe_molecules
    latent = latent_equivariance_probe(params, model_cfg, records, rotations, seed, cap)
    e_err, f_err = output_equivariance_probe(params, model_cfg, records, rotations, seed, cap)
    out = Path(args.out or "probe.csv")
    _write_csv(
        out,
        [
            [
                args.ckpt,
                args.category or cfg.category,
                min(len(records), cap) if cap else len(records),
                "",
                "",
                "",
                "",
                latent,
                e_err,
                f_err,
            ]
        ],
    )
    print(f"latent_equiv={latent:.6f}  energy_rotinv_err={e_err:.6f}  force_equiv_err={f_err:.6f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_export_plot_data(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset_path = args.data or cfg.dataset
    if dataset_path is None or not Path(dataset_path).exists():
        print(f"error: dataset not found: {dataset_path}", file=sys.stderr)
        return EXIT_DATA
    for ckpt in args.ckpts:
        if not Path(ckpt).exists():
            print(f"error: checkpoint not found: {ckpt}", file=sys.stderr)
            return EXIT_DATA
    records = read_dataset(dataset_path)
    if args.holdout:
        records = _held_out_records(records, cfg.train.seed, True)
    out = Path(args.out or "plot_data.csv")
    compare_models(
        args.ckpts,
        records,
        out,
        category_tag=args.category or cfg.category,
        rotations_per_molecule=args.rotations if args.rotations is not None else cfg.probe_rotations,
        seed=args.probe_seed if args.probe_seed is not None else cfg.probe_seed,
        probe_molecules=cfg.probe_molecules,
    )
    print(f"wrote {out}")
    return EXIT_OK


def _write_csv(path: Path, rows: list[list]) -> None:
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)


# -- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transip",
        description="Train and evaluate transformer interatomic potentials "
        "with learned rotation equivariance.",
    )
    parser.add_argument("--config", default=None, help="INI-style configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override the training seed")
    # The same flags are accepted after the subcommand; SUPPRESS keeps a
    # sub-level omission from clobbering a value given at the top level.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an oracle-labeled dataset", parents=[common])
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--atoms-min", type=int, default=3)
    g.add_argument("--atoms-max", type=int, default=8)
    g.add_argument("--palette", help="comma-separated atomic numbers")
    g.add_argument("--out", help="output JSONL path")
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train a model", parents=[common])
    t.add_argument("--data", help="dataset JSONL path")
    t.add_argument("--mode", choices=("transip", "transaug"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--dry-run", action="store_true")

    for name, helptext in (("eval", "compute metrics"), ("probe", "equivariance probes")):
        p = sub.add_parser(name, help=helptext, parents=[common])
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--category")
        p.add_argument("--rotations", type=int)
        p.add_argument("--probe-seed", type=int)
        p.add_argument("--holdout", action="store_true", help="evaluate the held-out split")

    e = sub.add_parser("export-plot-data", help="metric CSV across checkpoints", parents=[common])
    e.add_argument("--ckpts", nargs="+", required=True)
    e.add_argument("--data")
    e.add_argument("--out")
    e.add_argument("--category")
    e.add_argument("--rotations", type=int)
    e.add_argument("--probe-seed", type=int)
    e.add_argument("--holdout", action="store_true")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.train = replace(cfg.train, seed=args.seed)
        if args.command == "gen-data":
            return cmd_gen_data(args, cfg)
        if args.command == "train":
            return cmd_train(args, cfg)
        if args.command == "eval":
            return cmd_eval(args, cfg, args.config is not None)
        if args.command == "probe":
            return cmd_probe(args, cfg, args.config is not None)
        if args.command == "export-plot-data":
            return cmd_export_plot_data(args, cfg)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
