"""Scaled comparison protocol: the latent-objective model versus the
rotation-augmentation baseline across dataset sizes and seeds.

Each run trains both modes with an identical configuration (the latent
weight is the only difference), probes equivariance at initialization and
at the final checkpoint, and evaluates held-out metrics. Results land in
one combined CSV whose rows support metric-versus-size and
metric-versus-latent-error plots.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .checkpoint import save_model
from .evaluate import (
    CSV_HEADER,
    MetricReport,
    evaluate_model,
    latent_equivariance_probe,
    output_equivariance_probe,
    report_row,
)
from .moldata import LabeledMolecule, center_coordinates, generate_lj_dataset
from .train import TrainConfig, split_dataset, train


@dataclass(frozen=True)
class ComparisonSettings:
    sizes: tuple[int, ...] = (1000, 2000, 4000)
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 5
    # Base token budget for the smallest size; larger datasets scale the
    # batch proportionally, keeping the optimization-step count comparable
    # across sizes so the data-size effect is isolated from step count.
    batch_max_tokens: int = 128
    scale_batch_with_size: bool = True
    atoms_min: int = 3
    atoms_max: int = 5
    element_palette: tuple[int, ...] = (1,)
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    probe_rotations: int = 8
    probe_seed: int = 1234
    probe_molecules: int = 32

    def tokens_for_size(self, size: int) -> int:
        if not self.scale_batch_with_size:
            return self.batch_max_tokens
        return max(self.batch_max_tokens, self.batch_max_tokens * size // min(self.sizes))

    def model_config(self, energy_scale: float = 1.0, energy_shift: float = 0.0) -> M.ModelConfig:
        return M.ModelConfig(
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            energy_scale=energy_scale,
            energy_shift=energy_shift,
        )


@dataclass
class RunOutcome:
    mode: str
    size: int
    seed: int
    steps: int
    latent_init: float
    latent_final: float
    energy_rot_init: float
    energy_rot_final: float
    report: MetricReport
    checkpoint: Path
    wall_seconds: float


def _dataset_for_size(size: int, settings: ComparisonSettings) -> list[LabeledMolecule]:
    # One dataset per size, shared across seeds and modes.
    rng = np.random.default_rng(np.random.SeedSequence([90210, size]))
    return generate_lj_dataset(
        size,
        settings.atoms_min,
        settings.atoms_max,
        element_palette=settings.element_palette,
        rng=rng,
    )


def run_comparison(
    out_dir: str | Path,
    settings: ComparisonSettings = ComparisonSettings(),
    verbose: bool = True,
) -> tuple[list[RunOutcome], Path]:
    """Train every (size, seed, mode) cell and export the combined CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outcomes: list[RunOutcome] = []
    rows: list[list] = []

    for size in settings.sizes:
        dataset = _dataset_for_size(size, settings)
        for seed in settings.seeds:
            prepared = [
                LabeledMolecule(center_coordinates(r.molecule), r.energy, r.forces)
                for r in dataset
            ]
            train_part, held_out = split_dataset(prepared, seed)
            probe_set = held_out[: settings.probe_molecules]
            # standardize the output head to the training-label statistics
            labels = np.array([r.energy for r in train_part])
            cfg = settings.model_config(
                energy_scale=float(labels.std()) or 1.0,
                energy_shift=float(labels.mean()),
            )
            for mode in ("transip", "transaug"):
                started = time.perf_counter()
                train_cfg = TrainConfig(
                    epochs=settings.epochs,
                    seed=seed,
                    batch_max_tokens=settings.tokens_for_size(size),
                    mode=mode,
                )
                params0 = M.init_parameters(cfg, seed=seed)
                latent_init = latent_equivariance_probe(
                    params0, cfg, probe_set, settings.probe_rotations, settings.probe_seed
                )
                rot_init, _ = output_equivariance_probe(
                    params0, cfg, probe_set, settings.probe_rotations, settings.probe_seed
                )

                run_dir = out_dir / f"{mode}_n{size}_s{seed}"
                result = train(dataset, cfg, train_cfg, out_dir=run_dir)

                latent_final = latent_equivariance_probe(
                    result.params, cfg, probe_set, settings.probe_rotations, settings.probe_seed
                )
                rot_final, _ = output_equivariance_probe(
                    result.params, cfg, probe_set, settings.probe_rotations, settings.probe_seed
                )
                report = evaluate_model(
                    result.params,
                    cfg,
                    held_out,
                    category_tag=f"{mode}-{size}",
                    rotations_per_molecule=settings.probe_rotations,
                    seed=settings.probe_seed,
                    probe_molecules=settings.probe_molecules,
                )
                init_path = run_dir / "ckpt_init.tipc"
                save_model(init_path, cfg, params0)
                outcome = RunOutcome(
                    mode=mode,
                    size=size,
                    seed=seed,
                    steps=len(result.log),
                    latent_init=latent_init,
                    latent_final=latent_final,
                    energy_rot_init=rot_init,
                    energy_rot_final=rot_final,
                    report=report,
                    checkpoint=result.final_checkpoint,
                    wall_seconds=time.perf_counter() - started,
                )
                outcomes.append(outcome)
                rows.append(report_row(str(result.final_checkpoint), report))
                if verbose:
                    print(
                        f"[{mode} n={size} seed={seed}] steps={outcome.steps} "
                        f"latent {latent_init:.4f}->{latent_final:.4f} "
                        f"e_rot {rot_init:.4f}->{rot_final:.4f} "
                        f"force_mae={report.force_mae:.4f} "
                        f"({outcome.wall_seconds/60:.1f} min)",
                        flush=True,
                    )

    csv_path = out_dir / "comparison.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)
    return outcomes, csv_path


def directional_summary(outcomes: Sequence[RunOutcome]) -> str:
    """Reported (not asserted): per-size force MAE, latent model vs baseline."""
    lines = []
    sizes = sorted({o.size for o in outcomes})
    for size in sizes:
        for metric, attr in (("force_mae", "force_mae"), ("force_cos", "force_cosine")):
            a = np.mean([o.report.force_mae if attr == "force_mae" else o.report.force_cosine
                         for o in outcomes if o.size == size and o.mode == "transip"])
            b = np.mean([o.report.force_mae if attr == "force_mae" else o.report.force_cosine
                         for o in outcomes if o.size == size and o.mode == "transaug"])
            lines.append(f"n={size}: {metric} transip={a:.4f} transaug={b:.4f}")
    return "\n".join(lines)
