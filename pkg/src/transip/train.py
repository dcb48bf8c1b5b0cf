"""Optimization loop: AdamW with decoupled decay, cosine schedule with linear
warmup, global gradient clipping, per-epoch checkpoints, and deterministic
resumption.

Every random draw is keyed by (seed, purpose, absolute step or epoch), so a
resumed run consumes exactly the same streams as the uninterrupted one and
reproduces its losses bitwise in single-worker mode.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from . import model as M
from .checkpoint import load_model, save_model
from .losses import LossWeights, total_loss
from .moldata import (
    Batch,
    LabeledMolecule,
    Rotation,
    batch_molecules,
    center_coordinates,
    sample_rotation_uniform,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Stream tags for seed derivation; fixed forever for reproducibility.
_STREAM_SHUFFLE = 1
_STREAM_ROTATION = 2
_STREAM_DROPOUT = 3
_STREAM_AUGMENT = 4

MODES = ("transip", "transaug")


class NumericError(RuntimeError):
    """A non-finite loss surfaced during training."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-3
    grad_clip_norm: float = 200.0
    warmup_fraction: float = 0.01
    min_lr_factor: float = 0.01
    epochs: int = 5
    batch_max_tokens: int = 512
    seed: int = 0
    mode: str = "transip"
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "transaug" and self.weights.lambda_leq != 0.0:
            self.weights = replace(self.weights, lambda_leq=0.0)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: M.Parameters) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def derived_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Generator keyed by (seed, stream, index): stateless across steps."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def cosine_warmup_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to its min fraction."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = max(1, round(cfg.warmup_fraction * total_steps))
    if step <= warmup:
        return cfg.learning_rate * step / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.learning_rate * (cfg.min_lr_factor + (1.0 - cfg.min_lr_factor) * cosine)


def _owned(a: np.ndarray) -> np.ndarray:
    """A writable array owning its memory; copies only views or read-only data."""
    if a.flags.writeable and a.base is None:
        return a
    return a.copy()


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[Sequence[np.ndarray], float]:
    """Rescale all gradients in place when the global L2 norm exceeds max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return grads, total


def adamw_step(
    params: M.Parameters,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> OptimizerState:
    """One decoupled-decay AdamW update, in place."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = grads[name]
        p.data *= 1.0 - lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
    return state


# -- data handling --------------------------------------------------------------


def split_dataset(
    records: Sequence[LabeledMolecule], seed: int
) -> tuple[list[LabeledMolecule], list[LabeledMolecule]]:
    """Deterministic ~10% holdout keyed by a hash of (seed, record index)."""
    train: list[LabeledMolecule] = []
    held: list[LabeledMolecule] = []
    for i, record in enumerate(records):
        digest = hashlib.sha256(f"{seed}:{i}".encode()).digest()
        if int.from_bytes(digest[:8], "big") % 10 == 0:
            held.append(record)
        else:
            train.append(record)
    return train, held


def _recenter(records: Sequence[LabeledMolecule]) -> list[LabeledMolecule]:
    out = []
    for r in records:
        out.append(LabeledMolecule(center_coordinates(r.molecule), r.energy, r.forces))
    return out


def train_aug_step(
    batch: Batch,
    params: M.Parameters,
    cfg: M.ModelConfig,
    weights: LossWeights,
    rng: np.random.Generator,
    dropout_rng: np.random.Generator | None = None,
    training: bool = False,
    rotations: Sequence[Rotation] | None = None,
) -> tuple[T.Tensor, dict[str, float]]:
    """Supervised step on a freshly rotated copy of the batch.

    Inputs and labels rotate together: forces co-rotate, energies are
    scalars and stay put. The latent term is off in this mode.
    """
    if batch.energies is None or batch.forces is None:
        raise ValueError("augmented training needs a labeled batch")
    if rotations is None:
        rotations = [sample_rotation_uniform(rng) for _ in range(batch.num_molecules)]

    coords = batch.coords.copy()
    rotated_forces: list[list[np.ndarray]] = []
    i = 0
    for row, row_spans in enumerate(batch.spans):
        row_forces = []
        for j, (start, end) in enumerate(row_spans):
            g = rotations[i]
            coords[row, start:end] = coords[row, start:end] @ g.matrix.T
            row_forces.append(batch.forces[row][j] @ g.matrix.T)
            i += 1
        rotated_forces.append(row_forces)

    rotated = Batch(
        coords=coords,
        atomic_numbers=batch.atomic_numbers,
        valid=batch.valid,
        attn_mask=batch.attn_mask,
        positions=batch.positions,
        spans=batch.spans,
        charges=batch.charges,
        spins=batch.spins,
        energies=batch.energies,
        forces=rotated_forces,
    )
    supervised = replace(weights, lambda_leq=0.0)
    return total_loss(rotated, params, cfg, supervised, rng, dropout_rng, training)


# -- the loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    params: M.Parameters
    optimizer: OptimizerState
    log: list[dict]
    total_steps: int
    checkpoint_paths: list[Path]
    final_checkpoint: Path | None


def _epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return derived_rng(seed, _STREAM_SHUFFLE, epoch).permutation(count)


def planned_total_steps(n_records: int, train_cfg: TrainConfig, sizes: Sequence[int]) -> int:
    """Steps over the whole run; depends on per-epoch shuffles, so computed
    exactly the same way the loop will."""
    total = 0
    sizes = np.asarray(sizes)
    for epoch in range(train_cfg.epochs):
        order = _epoch_order(train_cfg.seed, epoch, n_records)
        used, batches = 0, 0
        for n in sizes[order]:
            if used + n > train_cfg.batch_max_tokens and used > 0:
                batches += 1
                used = 0
            used += int(n)
        if used > 0:
            batches += 1
        total += batches
    return total


def train(
    dataset: Sequence[LabeledMolecule],
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    hold_out: bool = True,
) -> TrainResult:
    """Run the full optimization and return parameters plus the step log.

    ``hold_out`` carves ~10% of records into a validation split that the loop
    never sees; probes evaluate against it afterwards.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    records = _recenter(dataset)
    if hold_out:
        records, _ = split_dataset(records, train_cfg.seed)
    if not records:
        raise ValueError("no records left to train on after the validation holdout")

    sizes = [len(r.molecule) for r in records]
    total_steps = planned_total_steps(len(records), train_cfg, sizes)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        cfg_loaded, params, meta, moments = load_model(resume)
        if cfg_loaded != model_cfg:
            raise ValueError("resume checkpoint was written with a different model config")
        if moments is None or "step" not in meta:
            raise ValueError("resume checkpoint lacks optimizer state")
        optimizer = OptimizerState(m=moments[0], v=moments[1], step=int(meta["step"]))
        start_epoch = int(meta["epoch_done"])
        step = optimizer.step
    else:
        params = M.init_parameters(model_cfg, seed=train_cfg.seed)
        optimizer = OptimizerState.fresh(params)
        start_epoch = 0
        step = 0

    param_names = list(params.keys())
    param_list = [params[name] for name in param_names]

    log: list[dict] = []
    checkpoint_paths: list[Path] = []
    log_fh = None
    if out_path is not None:
        log_fh = (out_path / "train_log.jsonl").open("a", encoding="utf-8")

    def emit(record: dict) -> None:
        log.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()

    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            order = _epoch_order(train_cfg.seed, epoch, len(records))
            batches = batch_molecules([records[i] for i in order], train_cfg.batch_max_tokens)
            for batch_index, batch in enumerate(batches):
                step += 1
                started = time.perf_counter()
                lr = cosine_warmup_lr(step, total_steps, train_cfg)
                rot_rng = derived_rng(train_cfg.seed, _STREAM_ROTATION, step)
                drop_rng = derived_rng(train_cfg.seed, _STREAM_DROPOUT, step)
                if train_cfg.mode == "transaug":
                    aug_rng = derived_rng(train_cfg.seed, _STREAM_AUGMENT, step)
                    loss, parts = train_aug_step(
                        batch, params, model_cfg, train_cfg.weights, aug_rng, drop_rng, training=True
                    )
                else:
                    loss, parts = total_loss(
                        batch, params, model_cfg, train_cfg.weights, rot_rng, drop_rng, training=True
                    )
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericError(
                        f"non-finite loss at step {step} (epoch {epoch}, batch {batch_index})"
                    )
                grad_tensors = T.grad(loss, param_list)
                grads = {name: _owned(g.data) for name, g in zip(param_names, grad_tensors)}
                _, grad_norm = clip_grad_norm(list(grads.values()), train_cfg.grad_clip_norm)
                adamw_step(params, grads, optimizer, lr, train_cfg)
                emit(
                    {
                        "step": step,
                        "epoch": epoch,
                        "lr": lr,
                        "loss_total": loss_value,
                        "loss_E": parts["loss_E"],
                        "loss_F": parts["loss_F"],
                        "loss_leq": parts["loss_leq"],
                        "grad_norm": grad_norm,
                        "wall_ms": (time.perf_counter() - started) * 1000.0,
                    }
                )
            if out_path is not None:
                ckpt = out_path / f"ckpt_epoch_{epoch + 1:04d}.tipc"
                save_model(
                    ckpt,
                    model_cfg,
                    params,
                    train_meta=_meta(train_cfg, step, epoch + 1, total_steps),
                    optimizer_moments=(optimizer.m, optimizer.v),
                )
                checkpoint_paths.append(ckpt)
    finally:
        if log_fh is not None:
            log_fh.close()

    final_path = None
    if out_path is not None:
        final_path = out_path / "ckpt_final.tipc"
        save_model(
            final_path,
            model_cfg,
            params,
            train_meta=_meta(train_cfg, step, train_cfg.epochs, total_steps),
            optimizer_moments=(optimizer.m, optimizer.v),
        )
    return TrainResult(params, optimizer, log, total_steps, checkpoint_paths, final_path)


def _meta(train_cfg: TrainConfig, step: int, epoch_done: int, total_steps: int) -> dict:
    raw = asdict(train_cfg)
    raw["weights"] = asdict(train_cfg.weights)
    return {
        "step": step,
        "epoch_done": epoch_done,
        "total_steps": total_steps,
        "train_config": raw,
    }
