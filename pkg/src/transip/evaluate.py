"""Evaluation metrics, latent and output-level equivariance probes, and the
multi-checkpoint comparison harness that exports plot-ready CSV data.

Everything here is read-only over a frozen parameter snapshot; dataset
aggregation goes through numpy's pairwise summation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from . import model as M
from .checkpoint import load_model
from .losses import latent_loss_from_embeddings
from .moldata import (
    LabeledMolecule,
    Molecule,
    apply_rotation,
    batch_molecules,
    center_coordinates,
    sample_rotation_uniform,
)

PROBE_SEED = 1234
PROBE_ROTATIONS = 8

CSV_HEADER = [
    "checkpoint",
    "category",
    "n",
    "force_mae",
    "force_cos",
    "energy_atom_mae",
    "energy_total_mae",
    "latent_equiv",
    "energy_rotinv_err",
    "force_equiv_err",
]


@dataclass
class MetricReport:
    force_mae: float  # eV/A
    force_cosine: float
    energy_per_atom_mae: float  # eV/atom
    total_energy_mae: float  # eV
    latent_equiv_error: float
    energy_rotation_invariance_error: float  # eV
    force_rotation_equivariance_error: float  # eV/A
    sample_count: int
    category_tag: str = "all"


def force_mae(f_pred: np.ndarray, f_true: np.ndarray) -> float:
    """Mean absolute error over all 3n force components."""
    f_pred = np.asarray(f_pred, dtype=np.float64)
    f_true = np.asarray(f_true, dtype=np.float64)
    if f_pred.shape != f_true.shape:
        raise ValueError(f"force shapes disagree: {f_pred.shape} vs {f_true.shape}")
    return float(np.abs(f_pred - f_true).mean())


def force_cosine(f_pred: np.ndarray, f_true: np.ndarray) -> float:
    """Per-atom cosine similarity averaged over atoms.

    Rows where either force vanishes contribute 0 rather than NaN; relaxed
    geometries produce genuinely zero oracle rows.
    """
    f_pred = np.asarray(f_pred, dtype=np.float64)
    f_true = np.asarray(f_true, dtype=np.float64)
    if f_pred.shape != f_true.shape:
        raise ValueError(f"force shapes disagree: {f_pred.shape} vs {f_true.shape}")
    np_norm = np.linalg.norm(f_pred, axis=1)
    nt_norm = np.linalg.norm(f_true, axis=1)
    dots = (f_pred * f_true).sum(axis=1)
    denom = np_norm * nt_norm
    cos = np.where(denom > 0.0, dots / np.where(denom > 0.0, denom, 1.0), 0.0)
    return float(cos.mean())


def energy_metrics(e_pred: float, e_true: float, atom_count: int) -> tuple[float, float]:
    """(per-atom absolute error, total absolute error)."""
    if atom_count < 1:
        raise ValueError("atom_count must be >= 1")
    total = abs(float(e_pred) - float(e_true))
    return total / atom_count, total


# -- model-level evaluation -------------------------------------------------------


def _prepared(records: Sequence[LabeledMolecule]) -> list[LabeledMolecule]:
    return [LabeledMolecule(center_coordinates(r.molecule), r.energy, r.forces) for r in records]


def predict_dataset(
    params: M.Parameters,
    cfg: M.ModelConfig,
    records: Sequence[LabeledMolecule],
    batch_max_tokens: int = 512,
) -> tuple[list[float], list[np.ndarray]]:
    """Per-molecule model energies and forces, respecting input order."""
    prepared = _prepared(records)
    energies: list[float] = []
    forces: list[np.ndarray] = []
    for batch in batch_molecules(prepared, batch_max_tokens):
        batch_energies, force_field, _ = M.batch_energy_forces(batch, params, cfg)
        blocks = M.molecule_forces(force_field, batch)
        energies.extend(e.item() for e in batch_energies)
        forces.extend(b.data.copy() for b in blocks)
    return energies, forces


def latent_equivariance_probe(
    params: M.Parameters,
    cfg: M.ModelConfig,
    records: Sequence[LabeledMolecule | Molecule],
    rotations_per_molecule: int = PROBE_ROTATIONS,
    seed: int = PROBE_SEED,
    max_molecules: int | None = None,
) -> float:
    """Mean latent alignment error over molecules and fresh uniform rotations.

    Dropout stays off and no graph is recorded; the probe is deterministic
    for a fixed seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    mols = [r.molecule if isinstance(r, LabeledMolecule) else r for r in records]
    if max_molecules is not None:
        mols = mols[:max_molecules]
    values: list[float] = []
    with T.no_grad():
        for mol in mols:
            mol = center_coordinates(mol)
            batch = batch_molecules([mol], max_tokens=len(mol))[0]
            h = M.forward_embed(batch, params, cfg)
            h_mol = M.molecule_embeddings(h, batch)[0]
            for _ in range(rotations_per_molecule):
                g = sample_rotation_uniform(rng)
                rotated = batch_molecules([apply_rotation(g, mol)], max_tokens=len(mol))[0]
                h_rot = M.molecule_embeddings(M.forward_embed(rotated, params, cfg), rotated)[0]
                transformed = M.transform_latent(g, h_mol, params, cfg)
                values.append(latent_loss_from_embeddings(h_rot, transformed).item())
    return float(np.mean(values))


def output_equivariance_probe(
    params: M.Parameters,
    cfg: M.ModelConfig,
    records: Sequence[LabeledMolecule | Molecule],
    rotations_per_molecule: int = PROBE_ROTATIONS,
    seed: int = PROBE_SEED,
    max_molecules: int | None = None,
) -> tuple[float, float]:
    """(mean |E(gm) - E(m)|, mean per-component |F(gm) - R F(m)|).

    Measures how far the trained model is from exact rotation symmetry at
    the output level; the architecture does not enforce it.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    mols = [r.molecule if isinstance(r, LabeledMolecule) else r for r in records]
    if max_molecules is not None:
        mols = mols[:max_molecules]
    e_errors: list[float] = []
    f_errors: list[float] = []
    for mol in mols:
        mol = center_coordinates(mol)
        batch = batch_molecules([mol], max_tokens=len(mol))[0]
        energies, force_field, _ = M.batch_energy_forces(batch, params, cfg)
        e0 = energies[0].item()
        f0 = force_field.data[0, : len(mol)]
        for _ in range(rotations_per_molecule):
            g = sample_rotation_uniform(rng)
            rotated = batch_molecules([apply_rotation(g, mol)], max_tokens=len(mol))[0]
            r_energies, r_field, _ = M.batch_energy_forces(rotated, params, cfg)
            e_errors.append(abs(r_energies[0].item() - e0))
            f_errors.append(float(np.abs(r_field.data[0, : len(mol)] - f0 @ g.matrix.T).mean()))
    return float(np.mean(e_errors)), float(np.mean(f_errors))


def evaluate_model(
    params: M.Parameters,
    cfg: M.ModelConfig,
    records: Sequence[LabeledMolecule],
    category_tag: str = "all",
    rotations_per_molecule: int = PROBE_ROTATIONS,
    seed: int = PROBE_SEED,
    probe_molecules: int | None = 32,
    batch_max_tokens: int = 512,
) -> MetricReport:
    """Dataset-level metrics: per-molecule values averaged uniformly over
    molecules, plus the two equivariance probes on a capped subset."""
    if not records:
        raise ValueError("cannot evaluate on an empty dataset")
    energies, forces = predict_dataset(params, cfg, records, batch_max_tokens)
    f_maes, f_coses, e_atom, e_total = [], [], [], []
    for record, e_pred, f_pred in zip(records, energies, forces):
        f_maes.append(force_mae(f_pred, record.forces))
        f_coses.append(force_cosine(f_pred, record.forces))
        atom_mae, total_mae = energy_metrics(e_pred, record.energy, len(record.molecule))
        e_atom.append(atom_mae)
        e_total.append(total_mae)
    latent = latent_equivariance_probe(
        params, cfg, records, rotations_per_molecule, seed, probe_molecules
    )
    e_rot, f_rot = output_equivariance_probe(
        params, cfg, records, rotations_per_molecule, seed, probe_molecules
    )
    return MetricReport(
        force_mae=float(np.mean(f_maes)),
        force_cosine=float(np.mean(f_coses)),
        energy_per_atom_mae=float(np.mean(e_atom)),
        total_energy_mae=float(np.mean(e_total)),
        latent_equiv_error=latent,
        energy_rotation_invariance_error=e_rot,
        force_rotation_equivariance_error=f_rot,
        sample_count=len(records),
        category_tag=category_tag,
    )


def report_row(checkpoint: str, report: MetricReport) -> list:
    return [
        checkpoint,
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


def compare_models(
    checkpoint_paths: Sequence[str | Path],
    records: Sequence[LabeledMolecule],
    out_path: str | Path,
    category_tag: str | Sequence[str] = "all",
    rotations_per_molecule: int = PROBE_ROTATIONS,
    seed: int = PROBE_SEED,
    probe_molecules: int | None = 32,
) -> list[MetricReport]:
    """One CSV row per (checkpoint, category tag) with the full metric schema.

    ``category_tag`` may be one tag for every row or one per checkpoint. The
    output supports metric-versus-dataset-size and
    metric-versus-equivariance-error scatter plots across checkpoints.
    """
    if isinstance(category_tag, str):
        tags = [category_tag] * len(checkpoint_paths)
    else:
        tags = list(category_tag)
        if len(tags) != len(checkpoint_paths):
            raise ValueError("need one category tag per checkpoint")
    reports = []
    rows = []
    for ckpt, tag in zip(checkpoint_paths, tags):
        cfg, params, _, _ = load_model(ckpt)
        report = evaluate_model(
            params,
            cfg,
            records,
            category_tag=tag,
            rotations_per_molecule=rotations_per_molecule,
            seed=seed,
            probe_molecules=probe_molecules,
        )
        reports.append(report)
        rows.append(report_row(str(ckpt), report))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)
    return reports
