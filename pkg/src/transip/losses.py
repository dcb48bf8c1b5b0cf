"""Training losses: per-atom energy error, per-molecule force error, the
latent rotation-alignment term, and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import model as M
from .moldata import Batch, Molecule, Rotation, apply_rotation, batch_molecules, sample_rotation_uniform


@dataclass(frozen=True)
class LossWeights:
    lambda_E: float = 5.0
    lambda_F: float = 15.0
    lambda_leq: float = 5.0

    def __post_init__(self) -> None:
        if min(self.lambda_E, self.lambda_F, self.lambda_leq) < 0:
            raise ValueError("loss weights must be non-negative")


def energy_loss(e_pred: T.Tensor, e_true: float, atom_count: int) -> T.Tensor:
    """|E_pred - E_true| / atom_count."""
    if atom_count < 1:
        raise ValueError("atom_count must be >= 1")
    return T.scale(T.absolute(T.sub(e_pred, float(e_true))), 1.0 / atom_count)


def force_loss(f_pred: T.Tensor, f_true: np.ndarray) -> T.Tensor:
    """Squared Frobenius error over the (n, 3) force block, divided by 3n."""
    f_true = np.asarray(f_true, dtype=np.float64)
    if tuple(f_pred.shape) != f_true.shape:
        raise ValueError(f"force shapes disagree: {f_pred.shape} vs {f_true.shape}")
    n = f_true.shape[0]
    return T.scale(T.square(T.sub(f_pred, T.Tensor(f_true))).sum(), 1.0 / (3.0 * n))


def latent_loss_from_embeddings(
    h_rotated: T.Tensor, h_transformed: T.Tensor
) -> T.Tensor:
    """Squared distance between the rotated-input embedding and the learned
    transform of the original embedding, normalized by (atoms * width)."""
    n, d = h_rotated.shape
    return T.scale(T.square(T.sub(h_rotated, h_transformed)).sum(), 1.0 / (n * d))


def latent_equivariance_loss(
    g: Rotation,
    m: Molecule,
    params: M.Parameters,
    cfg: M.ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> T.Tensor:
    """Alignment error for one molecule and one rotation.

    Gradients flow into both the backbone (through both branches) and the
    transform network; neither side is treated as a fixed target.
    """
    batch = batch_molecules([m], max_tokens=max(len(m), 1))[0]
    rotated = batch_molecules([apply_rotation(g, m)], max_tokens=max(len(m), 1))[0]
    h_orig = M.forward_embed(batch, params, cfg, rng=rng, training=training)
    h_rot = M.forward_embed(rotated, params, cfg, rng=rng, training=training)
    h_orig_mol = M.molecule_embeddings(h_orig, batch)[0]
    h_rot_mol = M.molecule_embeddings(h_rot, rotated)[0]
    return latent_loss_from_embeddings(h_rot_mol, M.transform_latent(g, h_orig_mol, params, cfg))


def _rotated_copy(batch: Batch, rotations: list[Rotation]) -> Batch:
    """The same packing with each molecule's coordinates rotated in place."""
    coords = batch.coords.copy()
    i = 0
    for row, row_spans in enumerate(batch.spans):
        for start, end in row_spans:
            coords[row, start:end] = coords[row, start:end] @ rotations[i].matrix.T
            i += 1
    return Batch(
        coords=coords,
        atomic_numbers=batch.atomic_numbers,
        valid=batch.valid,
        attn_mask=batch.attn_mask,
        positions=batch.positions,
        spans=batch.spans,
        charges=batch.charges,
        spins=batch.spins,
    )


def total_loss(
    batch: Batch,
    params: M.Parameters,
    cfg: M.ModelConfig,
    weights: LossWeights,
    rng: np.random.Generator,
    dropout_rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[T.Tensor, dict[str, float]]:
    """Weighted objective over one batch, averaged per molecule.

    When the latent weight is zero no rotation is sampled and the step is
    exactly the plain supervised step. Otherwise one fresh uniform rotation
    per molecule forms a Monte-Carlo estimate of the expected alignment loss.
    """
    if batch.energies is None or batch.forces is None:
        raise ValueError("total_loss needs a labeled batch")

    energies, force_field, h = M.batch_energy_forces(
        batch, params, cfg, rng=dropout_rng, training=training, create_graph=True
    )
    force_blocks = M.molecule_forces(force_field, batch)
    sizes = batch.molecule_sizes()
    e_labels = [e for row in batch.energies for e in row]
    f_labels = [f for row in batch.forces for f in row]

    e_terms = [
        energy_loss(e, e_true, n) for e, e_true, n in zip(energies, e_labels, sizes)
    ]
    f_terms = [force_loss(f, f_true) for f, f_true in zip(force_blocks, f_labels)]
    loss_e = _mean_terms(e_terms)
    loss_f = _mean_terms(f_terms)

    if weights.lambda_leq > 0.0:
        rotations = [sample_rotation_uniform(rng) for _ in range(batch.num_molecules)]
        rotated = _rotated_copy(batch, rotations)
        h_rot = M.forward_embed(rotated, params, cfg, rng=dropout_rng, training=training)
        rot_blocks = M.molecule_embeddings(h_rot, rotated)
        orig_blocks = M.molecule_embeddings(h, batch)
        leq_terms = [
            latent_loss_from_embeddings(hr, M.transform_latent(g, ho, params, cfg))
            for hr, ho, g in zip(rot_blocks, orig_blocks, rotations)
        ]
        loss_leq = _mean_terms(leq_terms)
    else:
        loss_leq = T.tensor(0.0)

    total = T.add(
        T.add(T.scale(loss_e, weights.lambda_E), T.scale(loss_f, weights.lambda_F)),
        T.scale(loss_leq, weights.lambda_leq),
    )
    breakdown = {
        "loss_E": loss_e.item(),
        "loss_F": loss_f.item(),
        "loss_leq": loss_leq.item(),
    }
    return total, breakdown


def _mean_terms(terms: list[T.Tensor]) -> T.Tensor:
    stacked = T.concat([t.reshape((1,)) for t in terms], axis=0)
    return stacked.mean()
