"""The potential model: atom tokens, RoPE masked self-attention backbone,
charge/spin global bias, mean aggregator with an energy head, conservative
forces via the tape, and the latent transform network that learns how a
rotation acts on embeddings.

Energies are deliberately NOT rotation-invariant by construction; shrinking
the measured invariance error is the training objective's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .moldata import Batch, Molecule, Rotation, center_coordinates, batch_molecules

Z_VOCAB = 119  # index 0 reserved for padding
ROPE_BASE = 10000.0

Parameters = dict[str, T.Tensor]


class VocabularyError(ValueError):
    """Charge, spin, or atomic number outside the embedding tables."""


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 384
    num_layers: int = 8
    num_heads: int = 6
    context_length: int = 1024
    projection_dropout: float = 0.01
    attention_dropout: float = 0.0
    feedforward_multiplier: int = 4
    charge_vocab_range: tuple[int, int] = (-10, 10)
    spin_vocab_range: tuple[int, int] = (1, 10)
    ttau_layers: int = 2
    ttau_hidden_multiplier: int = 2
    # Output standardization (eV): predictions are shift + scale * head(...).
    # Set from training-label statistics so untrained outputs span the label
    # range; forces pick up the scale factor through the tape.
    energy_scale: float = 1.0
    energy_shift: float = 0.0

    def __post_init__(self) -> None:
        d, h = self.hidden_dim, self.num_heads
        if d % 2 != 0:
            raise ValueError("hidden_dim must be even (token halves are concatenated)")
        if d % h != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if (d // h) % 2 != 0:
            raise ValueError("head dimension must be even for rotary encoding")
        if self.ttau_layers != 2:
            raise ValueError("the latent transform network is a 2-layer MLP")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def charge_vocab(self) -> np.ndarray:
        lo, hi = self.charge_vocab_range
        return np.arange(lo, hi + 1)

    @property
    def spin_vocab(self) -> np.ndarray:
        lo, hi = self.spin_vocab_range
        return np.arange(lo, hi + 1)


def init_parameters(cfg: ModelConfig, seed: int = 0) -> Parameters:
    """All learnable weights, keyed by stable path strings.

    Residual-stream projections use truncated-normal(0.02) weights so deep
    stacks start near identity; the peripheral MLPs (token embeddings, the
    energy head, the latent transform) use Glorot scaling so the untrained
    model already responds to coordinates. A 0.02-everywhere init makes the
    initial energy nearly constant, which degenerates the untrained
    rotation-error baseline the probes measure against. Embedding tables are
    normal(0.02); norm gains start at one; biases at zero.
    """
    rng = np.random.default_rng(seed)
    d = cfg.hidden_dim
    half = d // 2
    ff = cfg.feedforward_multiplier * d
    t_hidden = cfg.ttau_hidden_multiplier * d

    params: Parameters = {}

    def weight(path: str, shape: tuple[int, ...]) -> None:
        draw = np.clip(rng.standard_normal(shape), -2.0, 2.0) * 0.02
        params[path] = T.tensor(draw, requires_grad=True)

    def glorot(path: str, shape: tuple[int, ...]) -> None:
        std = np.sqrt(2.0 / (shape[0] + shape[1]))
        draw = np.clip(rng.standard_normal(shape), -2.0, 2.0) * std
        params[path] = T.tensor(draw, requires_grad=True)

    def table(path: str, shape: tuple[int, ...]) -> None:
        params[path] = T.tensor(rng.standard_normal(shape) * 0.02, requires_grad=True)

    def zeros(path: str, shape: tuple[int, ...]) -> None:
        params[path] = T.tensor(np.zeros(shape), requires_grad=True)

    def ones(path: str, shape: tuple[int, ...]) -> None:
        params[path] = T.tensor(np.ones(shape), requires_grad=True)

    table("embed_z.table", (Z_VOCAB, half))
    glorot("embed_z.mlp.w1", (half, half))
    zeros("embed_z.mlp.b1", (half,))
    glorot("embed_z.mlp.w2", (half, half))
    zeros("embed_z.mlp.b2", (half,))

    glorot("embed_r.w1", (3, half))
    zeros("embed_r.b1", (half,))
    glorot("embed_r.w2", (half, half))
    zeros("embed_r.b2", (half,))

    table("embed_charge.table", (len(cfg.charge_vocab), d))
    table("embed_spin.table", (len(cfg.spin_vocab), d))

    for i in range(cfg.num_layers):
        p = f"layers.{i}"
        ones(f"{p}.ln1.gain", (d,))
        zeros(f"{p}.ln1.bias", (d,))
        for name in ("wq", "wk", "wv", "wo"):
            weight(f"{p}.attn.{name}", (d, d))
        for name in ("bq", "bk", "bv", "bo"):
            zeros(f"{p}.attn.{name}", (d,))
        ones(f"{p}.ln2.gain", (d,))
        zeros(f"{p}.ln2.bias", (d,))
        weight(f"{p}.ff.w1", (d, ff))
        zeros(f"{p}.ff.b1", (ff,))
        weight(f"{p}.ff.w2", (ff, d))
        zeros(f"{p}.ff.b2", (d,))

    ones("final_norm.gain", (d,))
    zeros("final_norm.bias", (d,))

    ones("head.norm.gain", (d,))
    zeros("head.norm.bias", (d,))
    glorot("head.w1", (d, d))
    zeros("head.b1", (d,))
    glorot("head.w2", (d, 1))
    zeros("head.b2", (1,))

    glorot("latent_transform.w1", (9 + d, t_hidden))
    zeros("latent_transform.b1", (t_hidden,))
    glorot("latent_transform.w2", (t_hidden, d))
    zeros("latent_transform.b2", (d,))

    return params


def param_count(params: Parameters) -> int:
    return sum(p.size for p in params.values())


# -- token embedding ----------------------------------------------------------


def _one_hot(values: np.ndarray, vocab: np.ndarray) -> np.ndarray:
    # Equality-based one-hot: out-of-vocabulary entries produce a zero row
    # instead of an index error, which keeps padding slots inert.
    return (values[..., None] == vocab).astype(np.float64)


def _mlp2(x: T.Tensor, params: Parameters, prefix: str) -> T.Tensor:
    hidden = T.gelu(T.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return T.linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def embed_tokens(
    batch: Batch,
    params: Parameters,
    cfg: ModelConfig,
    coords: T.Tensor | None = None,
) -> T.Tensor:
    """Initial token matrix: element embedding and coordinate embedding,
    each half-width, concatenated to hidden_dim. Padded rows are zero."""
    if np.any(batch.atomic_numbers[batch.valid] >= Z_VOCAB) or np.any(
        batch.atomic_numbers[batch.valid] < 1
    ):
        raise VocabularyError("atomic number outside the element table")
    if coords is None:
        coords = T.tensor(batch.coords)

    z_onehot = T.Tensor(_one_hot(batch.atomic_numbers, np.arange(Z_VOCAB)))
    z_embed = _mlp2(T.matmul(z_onehot, params["embed_z.table"]), params, "embed_z.mlp")
    r_embed = _mlp2_coord(coords, params)
    tokens = T.concat([z_embed, r_embed], axis=-1)
    return T.mul(tokens, T.Tensor(batch.valid[..., None].astype(np.float64)))


def _mlp2_coord(coords: T.Tensor, params: Parameters) -> T.Tensor:
    hidden = T.gelu(T.linear(coords, params["embed_r.w1"], params["embed_r.b1"]))
    return T.linear(hidden, params["embed_r.w2"], params["embed_r.b2"])


def global_bias(q: int, s: int, params: Parameters, cfg: ModelConfig) -> T.Tensor:
    """c(q, s): sum of the charge and spin embedding rows, in R^d."""
    _check_vocab(q, s, cfg)
    q_onehot = T.Tensor(_one_hot(np.array([q]), cfg.charge_vocab))
    s_onehot = T.Tensor(_one_hot(np.array([s]), cfg.spin_vocab))
    bias = T.add(
        T.matmul(q_onehot, params["embed_charge.table"]),
        T.matmul(s_onehot, params["embed_spin.table"]),
    )
    return bias.reshape((cfg.hidden_dim,))


def _check_vocab(q: int, s: int, cfg: ModelConfig) -> None:
    lo, hi = cfg.charge_vocab_range
    if not lo <= q <= hi:
        raise VocabularyError(f"charge {q} outside vocabulary [{lo}, {hi}]")
    lo, hi = cfg.spin_vocab_range
    if not lo <= s <= hi:
        raise VocabularyError(f"spin {s} outside vocabulary [{lo}, {hi}]")


def _batch_bias(batch: Batch, params: Parameters, cfg: ModelConfig) -> T.Tensor:
    """Per-token broadcast of each molecule's c(q, s), zeros on padding."""
    charges = [q for row in batch.charges for q in row]
    spins = [s for row in batch.spins for s in row]
    for q, s in zip(charges, spins):
        _check_vocab(q, s, cfg)
    n_mols = len(charges)
    q_onehot = T.Tensor(_one_hot(np.asarray(charges), cfg.charge_vocab))
    s_onehot = T.Tensor(_one_hot(np.asarray(spins), cfg.spin_vocab))
    bias_rows = T.add(
        T.matmul(q_onehot, params["embed_charge.table"]),
        T.matmul(s_onehot, params["embed_spin.table"]),
    )  # (M, d)

    b, n_tok = batch.valid.shape
    assign = np.zeros((b, n_tok, n_mols))
    mol = 0
    for row, row_spans in enumerate(batch.spans):
        for start, end in row_spans:
            assign[row, start:end, mol] = 1.0
            mol += 1
    return T.matmul(T.Tensor(assign), bias_rows)  # (B, N, d)


# -- rotary position encoding ---------------------------------------------------


def _rope_tables(positions: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(head_dim // 2)
    theta = ROPE_BASE ** (-2.0 * k / head_dim)
    angles = positions[..., None] * theta  # (B, N, head_dim/2)
    cos = np.cos(angles)[:, None, :, :, None]  # broadcast over heads and the pair axis
    sin = np.sin(angles)[:, None, :, :, None]
    return cos, sin


def _rope_rotate(x: T.Tensor, cos: np.ndarray, sin: np.ndarray) -> T.Tensor:
    """Rotate consecutive coordinate pairs of the last axis by the position angle."""
    b, h, n, dh = x.shape
    pairs = x.reshape((b, h, n, dh // 2, 2))
    even = pairs.narrow(-1, 0, 1)
    odd = pairs.narrow(-1, 1, 1)
    cos_t, sin_t = T.Tensor(cos), T.Tensor(sin)
    rot_even = T.sub(T.mul(even, cos_t), T.mul(odd, sin_t))
    rot_odd = T.add(T.mul(even, sin_t), T.mul(odd, cos_t))
    return T.concat([rot_even, rot_odd], axis=-1).reshape((b, h, n, dh))


def rope_apply(x: T.Tensor, position: int) -> T.Tensor:
    """Rotary encoding of a single per-head vector at a sequence position."""
    (dh,) = x.shape
    if dh % 2 != 0:
        raise ValueError("rotary encoding needs an even head dimension")
    cos, sin = _rope_tables(np.array([[position]], dtype=np.float64), dh)
    return _rope_rotate(x.reshape((1, 1, 1, dh)), cos, sin).reshape((dh,))


# -- transformer block ----------------------------------------------------------


def attention_layer(
    tokens: T.Tensor,
    mask: np.ndarray,
    positions: np.ndarray,
    params: Parameters,
    prefix: str,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> T.Tensor:
    """Pre-norm block: masked multi-head RoPE attention, then a GELU MLP,
    each with a residual connection."""
    b, n, d = tokens.shape
    h, dh = cfg.num_heads, cfg.head_dim
    cos, sin = _rope_tables(positions.astype(np.float64), dh)

    def split_heads(t: T.Tensor) -> T.Tensor:
        return t.reshape((b, n, h, dh)).permute((0, 2, 1, 3))

    normed = T.layer_norm(tokens, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    q = split_heads(T.linear(normed, params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.bq"]))
    k = split_heads(T.linear(normed, params[f"{prefix}.attn.wk"], params[f"{prefix}.attn.bk"]))
    v = split_heads(T.linear(normed, params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.bv"]))

    q = _rope_rotate(q, cos, sin)
    k = _rope_rotate(k, cos, sin)
    scores = T.scale(T.matmul(q, k.transpose_last()), 1.0 / np.sqrt(dh))
    probs = T.masked_softmax(scores, mask)
    probs = T.dropout(probs, cfg.attention_dropout, rng, training)
    context = T.matmul(probs, v).permute((0, 2, 1, 3)).reshape((b, n, d))
    context = T.linear(context, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])
    context = T.dropout(context, cfg.projection_dropout, rng, training)
    tokens = T.add(tokens, context)

    normed = T.layer_norm(tokens, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    ff = T.linear(
        T.gelu(T.linear(normed, params[f"{prefix}.ff.w1"], params[f"{prefix}.ff.b1"])),
        params[f"{prefix}.ff.w2"],
        params[f"{prefix}.ff.b2"],
    )
    ff = T.dropout(ff, cfg.projection_dropout, rng, training)
    return T.add(tokens, ff)


def forward_embed(
    batch: Batch,
    params: Parameters,
    cfg: ModelConfig,
    coords: T.Tensor | None = None,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> T.Tensor:
    """Per-atom embeddings: token init, then L biased attention blocks, then a
    final norm. Rows of padded positions are zeroed."""
    x = embed_tokens(batch, params, cfg, coords)
    bias = _batch_bias(batch, params, cfg)
    for i in range(cfg.num_layers):
        x = T.add(x, bias)
        x = attention_layer(
            x, batch.attn_mask, batch.positions, params, f"layers.{i}", cfg, rng, training
        )
    x = T.layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
    return T.mul(x, T.Tensor(batch.valid[..., None].astype(np.float64)))


def molecule_embeddings(h: T.Tensor, batch: Batch) -> list[T.Tensor]:
    """Slice the batched embedding matrix into per-molecule (n, d) blocks."""
    out: list[T.Tensor] = []
    d = h.shape[-1]
    for row, row_spans in enumerate(batch.spans):
        row_h = h.narrow(0, row, 1)
        for start, end in row_spans:
            out.append(row_h.narrow(1, start, end - start).reshape((end - start, d)))
    return out


def aggregate_energy(h: T.Tensor, q: int, s: int, params: Parameters, cfg: ModelConfig) -> T.Tensor:
    """Molecular energy from per-atom embeddings: mean over atom rows,
    normalized so the head input scale is independent of atom count, then a
    2-layer GELU head to a scalar, affinely mapped to the label range.
    Charge and spin already entered through the per-layer bias and are
    unused here."""
    pooled = h.mean(axis=0, keepdims=True)  # (1, d)
    pooled = T.layer_norm(pooled, params["head.norm.gain"], params["head.norm.bias"])
    hidden = T.gelu(T.linear(pooled, params["head.w1"], params["head.b1"]))
    raw = T.linear(hidden, params["head.w2"], params["head.b2"]).reshape(())
    return T.add(T.scale(raw, cfg.energy_scale), cfg.energy_shift)


def predict_energies(
    batch: Batch,
    params: Parameters,
    cfg: ModelConfig,
    coords: T.Tensor | None = None,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[list[T.Tensor], T.Tensor]:
    """Per-molecule scalar energies plus the batched embedding matrix."""
    h = forward_embed(batch, params, cfg, coords, rng, training)
    energies = []
    mols = molecule_embeddings(h, batch)
    flat_q = [q for row in batch.charges for q in row]
    flat_s = [s for row in batch.spins for s in row]
    for h_mol, q, s in zip(mols, flat_q, flat_s):
        energies.append(aggregate_energy(h_mol, q, s, params, cfg))
    return energies, h


def batch_energy_forces(
    batch: Batch,
    params: Parameters,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
    create_graph: bool = False,
) -> tuple[list[T.Tensor], T.Tensor, T.Tensor]:
    """Energies plus the force field -dE/dr over the whole batch.

    One tape sweep serves every molecule: the attention mask keeps molecules
    independent, so the gradient of the summed energy already separates into
    per-molecule force blocks.
    """
    coords = T.tensor(batch.coords, requires_grad=True)
    energies, h = predict_energies(batch, params, cfg, coords, rng, training)
    stacked = T.concat([e.reshape((1,)) for e in energies], axis=0)
    total = stacked.sum()
    force_field = T.scale(T.grad(total, [coords], create_graph=create_graph)[0], -1.0)
    return energies, force_field, h


def molecule_forces(force_field: T.Tensor, batch: Batch) -> list[T.Tensor]:
    """Per-molecule (n, 3) force blocks from the batched force field."""
    out = []
    for row, row_spans in enumerate(batch.spans):
        row_f = force_field.narrow(0, row, 1)
        for start, end in row_spans:
            out.append(row_f.narrow(1, start, end - start).reshape((end - start, 3)))
    return out


def forces(m: Molecule, params: Parameters, cfg: ModelConfig) -> np.ndarray:
    """Conservative forces for one molecule as a plain (n, 3) array."""
    mol = center_coordinates(m)
    batch = batch_molecules([mol], max_tokens=max(len(mol), 1))[0]
    _, force_field, _ = batch_energy_forces(batch, params, cfg)
    return force_field.data[0, : len(mol)].copy()


def molecule_energy(m: Molecule, params: Parameters, cfg: ModelConfig) -> float:
    """Energy of one centered molecule, no gradients."""
    mol = center_coordinates(m)
    batch = batch_molecules([mol], max_tokens=max(len(mol), 1))[0]
    with T.no_grad():
        energies, _ = predict_energies(batch, params, cfg)
    return energies[0].item()


# -- learned latent transform ---------------------------------------------------


def transform_latent(g: Rotation, h: T.Tensor, params: Parameters, cfg: ModelConfig) -> T.Tensor:
    """Row-wise learned action of a rotation on per-atom embeddings.

    Each row is mapped by a shared 2-layer GELU MLP over the concatenation of
    the flattened rotation matrix and the embedding row. No identity
    constraint is imposed at initialization.
    """
    n = h.shape[0]
    g_rows = T.Tensor(np.tile(g.flat(), (n, 1)))
    joint = T.concat([g_rows, h], axis=-1)
    hidden = T.gelu(T.linear(joint, params["latent_transform.w1"], params["latent_transform.b1"]))
    return T.linear(hidden, params["latent_transform.w2"], params["latent_transform.b2"])
