"""Molecular records, coordinate preprocessing, rotation sampling, the
analytic cluster oracle that stands in for quantum-chemistry labels, padding
and batching, and dataset file I/O.

Dataset files are UTF-8 JSON Lines, one molecule per line, with keys
``z`` (int list), ``r`` (flat float list, length 3*n, row-major), ``q``
(int), ``s`` (int), ``energy`` (float, eV) and ``forces`` (flat float list,
length 3*n, eV/A). Floats are serialized at full round-trip precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_ATOMS = 1024

# Desk-scale pair-potential parameters (eV, Angstrom) per atomic number.
# Values are invented but ordered plausibly so the element channel carries
# signal; the palette of generated data must stay inside this table.
ELEMENT_LJ_TABLE: dict[int, tuple[float, float]] = {
    1: (0.060, 2.60),
    6: (0.160, 3.20),
    7: (0.120, 3.00),
    8: (0.100, 2.90),
    16: (0.200, 3.40),
}

CHARGE_CHOICES = (-1, 0, 1)
SPIN_CHOICES = (1, 2)


def charge_spin_offset(q: int, s: int) -> float:
    """Fixed energy offset keyed by total charge and spin multiplicity.

    Added to oracle labels so molecules that differ only in (q, s) have
    different energies; forces are unaffected by a constant.
    """
    return 1.25 * q - 0.75 * (s - 1)


class DataError(ValueError):
    """Malformed molecular data or dataset file."""


@dataclass(frozen=True)
class Molecule:
    """A molecular configuration: coordinates, atomic numbers, charge, spin."""

    coordinates: np.ndarray  # (n, 3) float64, Angstrom
    atomic_numbers: np.ndarray  # (n,) int64, positive
    charge: int
    spin: int

    def __post_init__(self) -> None:
        coords = np.asarray(self.coordinates, dtype=np.float64)
        numbers = np.asarray(self.atomic_numbers, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise DataError(f"coordinates must be (n, 3), got {coords.shape}")
        n = coords.shape[0]
        if n < 1 or n > MAX_ATOMS:
            raise DataError(f"atom count {n} outside [1, {MAX_ATOMS}]")
        if numbers.shape != (n,):
            raise DataError(f"atomic numbers shape {numbers.shape} does not match {n} atoms")
        if np.any(numbers < 1):
            raise DataError("atomic numbers must be positive")
        if self.spin < 1:
            raise DataError("spin multiplicity must be positive")
        object.__setattr__(self, "coordinates", coords)
        object.__setattr__(self, "atomic_numbers", numbers)

    def __len__(self) -> int:
        return self.coordinates.shape[0]


@dataclass(frozen=True)
class LabeledMolecule:
    """A molecule with oracle (or file) energy and per-atom forces."""

    molecule: Molecule
    energy: float  # eV
    forces: np.ndarray  # (n, 3) float64, eV/A

    def __post_init__(self) -> None:
        forces = np.asarray(self.forces, dtype=np.float64)
        if forces.shape != self.molecule.coordinates.shape:
            raise DataError(
                f"forces shape {forces.shape} does not match coordinates "
                f"{self.molecule.coordinates.shape}"
            )
        object.__setattr__(self, "forces", forces)
        object.__setattr__(self, "energy", float(self.energy))


@dataclass(frozen=True)
class Rotation:
    """A proper rotation stored as an orthonormal 3x3 matrix with det +1."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise DataError(f"rotation matrix must be 3x3, got {m.shape}")
        if not np.allclose(m.T @ m, np.eye(3), atol=1e-10):
            raise DataError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > 1e-10:
            raise DataError("rotation matrix determinant is not +1")
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    def compose(self, other: "Rotation") -> "Rotation":
        """self . other: apply other first, then self."""
        return Rotation(self.matrix @ other.matrix)

    def flat(self) -> np.ndarray:
        """Row-major 9-vector encoding fed to the latent transform network."""
        return self.matrix.reshape(9).copy()


# -- coordinate centering -----------------------------------------------------

# Per-component means are snapped to a 2**-40 grid through exact integer
# rounding. Consequence: inputs whose coordinates and translation are both
# exactly representable on a coarser dyadic grid center to bitwise-identical
# results, which is what makes translation invariance exact downstream.
_SNAP_BITS = 40


def _snapped_mean(values: np.ndarray) -> float:
    n = len(values)
    total = Fraction(math.fsum(map(float, values)))
    numerator = total * (1 << _SNAP_BITS)
    rounded = (2 * numerator + n) // (2 * n)  # round half up, exact integers
    return float(rounded) * 2.0 ** -_SNAP_BITS


def center_coordinates(m: Molecule) -> Molecule:
    """Shift coordinates so every component mean is (numerically) zero."""
    if len(m) < 1:
        raise DataError("cannot center an empty molecule")
    shift = np.array([_snapped_mean(m.coordinates[:, k]) for k in range(3)])
    return Molecule(m.coordinates - shift, m.atomic_numbers, m.charge, m.spin)


def is_centered(m: Molecule, atol: float = 1e-10) -> bool:
    return bool(np.all(np.abs(m.coordinates.mean(axis=0)) < atol))


# -- rotations ----------------------------------------------------------------


def sample_rotation_uniform(rng: np.random.Generator) -> Rotation:
    """Haar-uniform rotation from a normalized 4-component Gaussian quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    matrix = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Rotation(matrix)


def apply_rotation(g: Rotation, m: Molecule) -> Molecule:
    """Left-multiply every coordinate row by the rotation matrix."""
    return Molecule(m.coordinates @ g.matrix.T, m.atomic_numbers, m.charge, m.spin)


def rotate_labeled(g: Rotation, record: LabeledMolecule) -> LabeledMolecule:
    """Rotate a labeled record consistently: forces co-rotate, energy is scalar."""
    return LabeledMolecule(
        apply_rotation(g, record.molecule), record.energy, record.forces @ g.matrix.T
    )


def make_equivariance_pair(
    m: Molecule, rng: np.random.Generator
) -> tuple[Molecule, Rotation, Molecule]:
    """(m, g, rotated m) with g Haar-uniform; rotation about the origin keeps
    a centered molecule centered."""
    g = sample_rotation_uniform(rng)
    return m, g, apply_rotation(g, m)


# -- analytic pair-potential oracle --------------------------------------------


def lj_energy_forces(
    m: Molecule,
    epsilon: float | np.ndarray,
    sigma: float | np.ndarray,
) -> tuple[float, np.ndarray]:
    """12-6 pair-potential energy and exact analytic forces.

    ``epsilon``/``sigma`` may be scalars or per-atom arrays; per-pair values
    combine as sqrt(eps_i * eps_j) and (sigma_i + sigma_j) / 2.
    """
    r = m.coordinates
    n = len(m)
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (n,))
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))

    diff = r[:, None, :] - r[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    off = ~np.eye(n, dtype=bool)
    if n > 1 and dist[off].min() <= 1e-6:
        raise DataError("coincident atoms: minimum pairwise distance <= 1e-6 A")

    eps_ij = np.sqrt(np.outer(eps, eps))
    sig_ij = 0.5 * (sig[:, None] + sig[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        s6 = np.where(off, (sig_ij / np.where(off, dist, 1.0)) ** 6, 0.0)
    s12 = s6 * s6
    energy = float(4.0 * (eps_ij * (s12 - s6))[np.triu_indices(n, k=1)].sum())

    # F_i = sum_j 24 eps (2 s12 - s6) / d^2 * (r_i - r_j)
    with np.errstate(divide="ignore", invalid="ignore"):
        coeff = np.where(off, 24.0 * eps_ij * (2.0 * s12 - s6) / np.where(off, dist * dist, 1.0), 0.0)
    forces = (coeff[:, :, None] * diff).sum(axis=1)
    return energy, forces


def element_parameters(atomic_numbers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-atom (epsilon, sigma) arrays looked up from the element table."""
    eps = np.empty(len(atomic_numbers))
    sig = np.empty(len(atomic_numbers))
    for i, z in enumerate(atomic_numbers):
        try:
            eps[i], sig[i] = ELEMENT_LJ_TABLE[int(z)]
        except KeyError:
            raise DataError(f"no pair-potential parameters for element z={int(z)}") from None
    return eps, sig


def oracle_labels(m: Molecule) -> LabeledMolecule:
    """Label a molecule with the element-aware oracle plus the (q, s) offset."""
    eps, sig = element_parameters(m.atomic_numbers)
    energy, forces = lj_energy_forces(m, eps, sig)
    return LabeledMolecule(m, energy + charge_spin_offset(m.charge, m.spin), forces)


_COORD_GRID = 2.0**32  # raw cluster coordinates are quantized to this grid


def _build_cluster(
    n: int, sigma: np.ndarray, rng: np.random.Generator, max_tries: int = 200
) -> np.ndarray | None:
    """Sequentially grown cluster: min pair distance >= 0.8 sigma_ij, all atoms
    within a ball of radius 2 * mean(sigma) so the diameter stays <= 4 sigma."""
    sigma_ref = float(sigma.mean())
    positions = np.zeros((n, 3))
    for k in range(1, n):
        for _ in range(max_tries):
            anchor = positions[rng.integers(k)]
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            step = rng.uniform(1.0, 1.45) * sigma_ref
            candidate = anchor + step * direction
            if np.linalg.norm(candidate) > 2.0 * sigma_ref:
                continue
            gaps = np.linalg.norm(positions[:k] - candidate, axis=1)
            min_allowed = 0.8 * 0.5 * (sigma[:k] + sigma[k])
            if np.all(gaps >= min_allowed):
                positions[k] = candidate
                break
        else:
            return None
    return positions


def generate_lj_dataset(
    count: int,
    atoms_min: int,
    atoms_max: int,
    element_palette: Sequence[int] = (1, 6, 7, 8),
    rng: np.random.Generator | int = 0,
) -> list[LabeledMolecule]:
    """Random relaxed clusters labeled by the analytic oracle.

    Each record is drawn from its own child random stream, so the output for
    a given master seed does not depend on how records are scheduled.
    """
    if atoms_min < 2:
        raise DataError("atoms_min must be at least 2 (pair potential needs a dimer)")
    if atoms_max < atoms_min:
        raise DataError("atoms_max must be >= atoms_min")
    unknown = [z for z in element_palette if z not in ELEMENT_LJ_TABLE]
    if unknown:
        raise DataError(f"palette elements without parameters: {unknown}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    palette = np.asarray(element_palette, dtype=np.int64)

    records = []
    for child in rng.spawn(count):
        for _ in range(100):
            n = int(child.integers(atoms_min, atoms_max + 1))
            numbers = palette[child.integers(len(palette), size=n)]
            eps, sig = element_parameters(numbers)
            positions = _build_cluster(n, sig, child)
            if positions is None:
                continue
            positions = np.round(positions * _COORD_GRID) / _COORD_GRID
            charge = int(child.choice(CHARGE_CHOICES))
            spin = int(child.choice(SPIN_CHOICES))
            mol = center_coordinates(Molecule(positions, numbers, charge, spin))
            record = oracle_labels(mol)
            if abs(record.energy) / n <= 50.0:
                records.append(record)
                break
        else:
            raise DataError("cluster generation failed to converge")
    return records


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    """Molecules packed into attention contexts.

    Arrays carry a leading batch axis; padded positions have zero
    coordinates, atomic number 0, and are unreachable through the additive
    attention mask, which also blocks attention across molecule boundaries.
    """

    coords: np.ndarray  # (B, N, 3) float64
    atomic_numbers: np.ndarray  # (B, N) int64, 0 = padding
    valid: np.ndarray  # (B, N) bool
    attn_mask: np.ndarray  # (B, 1, N, N) float64, entries {0, -inf}
    positions: np.ndarray  # (B, N) int64, within-molecule index
    spans: list[list[tuple[int, int]]]  # per row: (start, end) per molecule
    charges: list[list[int]]
    spins: list[list[int]]
    energies: list[list[float]] | None = None
    forces: list[list[np.ndarray]] | None = None

    @property
    def num_molecules(self) -> int:
        return sum(len(row) for row in self.spans)

    def molecule_sizes(self) -> list[int]:
        return [end - start for row in self.spans for start, end in row]


def _pack_sequence(records: Sequence[LabeledMolecule | Molecule], pad_to: int | None) -> Batch:
    mols = [r.molecule if isinstance(r, LabeledMolecule) else r for r in records]
    total = sum(len(m) for m in mols)
    width = total if pad_to is None else pad_to
    if width < total:
        raise DataError(f"pad_to={pad_to} smaller than packed length {total}")

    coords = np.zeros((1, width, 3))
    numbers = np.zeros((1, width), dtype=np.int64)
    valid = np.zeros((1, width), dtype=bool)
    positions = np.zeros((1, width), dtype=np.int64)
    mask = np.full((1, 1, width, width), -np.inf)

    spans: list[tuple[int, int]] = []
    cursor = 0
    for m in mols:
        n = len(m)
        coords[0, cursor : cursor + n] = m.coordinates
        numbers[0, cursor : cursor + n] = m.atomic_numbers
        valid[0, cursor : cursor + n] = True
        positions[0, cursor : cursor + n] = np.arange(n)
        mask[0, 0, cursor : cursor + n, cursor : cursor + n] = 0.0
        spans.append((cursor, cursor + n))
        cursor += n

    batch = Batch(
        coords=coords,
        atomic_numbers=numbers,
        valid=valid,
        attn_mask=mask,
        positions=positions,
        spans=[spans],
        charges=[[m.charge for m in mols]],
        spins=[[m.spin for m in mols]],
    )
    if all(isinstance(r, LabeledMolecule) for r in records) and records:
        batch.energies = [[r.energy for r in records]]  # type: ignore[union-attr]
        batch.forces = [[r.forces.copy() for r in records]]  # type: ignore[union-attr]
    return batch


def batch_molecules(
    records: Sequence[LabeledMolecule | Molecule],
    max_tokens: int,
    pad_to: int | None = None,
) -> list[Batch]:
    """Greedily pack whole molecules, in order, into attention contexts."""
    groups: list[list] = []
    current: list = []
    used = 0
    for record in records:
        mol = record.molecule if isinstance(record, LabeledMolecule) else record
        n = len(mol)
        if n > max_tokens:
            raise DataError(f"molecule with {n} atoms exceeds max_tokens={max_tokens}")
        if used + n > max_tokens and current:
            groups.append(current)
            current, used = [], 0
        current.append(record)
        used += n
    if current:
        groups.append(current)
    return [_pack_sequence(group, pad_to) for group in groups]


def unbatch_molecules(batches: Iterable[Batch]) -> list[LabeledMolecule | Molecule]:
    """Recover the exact input sequence of batch_molecules."""
    out: list[LabeledMolecule | Molecule] = []
    for batch in batches:
        for row, row_spans in enumerate(batch.spans):
            for j, (start, end) in enumerate(row_spans):
                mol = Molecule(
                    batch.coords[row, start:end].copy(),
                    batch.atomic_numbers[row, start:end].copy(),
                    batch.charges[row][j],
                    batch.spins[row][j],
                )
                if batch.energies is not None and batch.forces is not None:
                    out.append(
                        LabeledMolecule(mol, batch.energies[row][j], batch.forces[row][j].copy())
                    )
                else:
                    out.append(mol)
    return out


# -- dataset file I/O ----------------------------------------------------------


def write_dataset(records: Sequence[LabeledMolecule], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            mol = record.molecule
            line = json.dumps(
                {
                    "z": [int(z) for z in mol.atomic_numbers],
                    "r": [float(v) for v in mol.coordinates.reshape(-1)],
                    "q": int(mol.charge),
                    "s": int(mol.spin),
                    "energy": float(record.energy),
                    "forces": [float(v) for v in record.forces.reshape(-1)],
                }
            )
            fh.write(line + "\n")


def read_dataset(path: str | Path) -> list[LabeledMolecule]:
    path = Path(path)
    records: list[LabeledMolecule] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            try:
                z = np.asarray(raw["z"], dtype=np.int64)
                r = np.asarray(raw["r"], dtype=np.float64)
                forces = np.asarray(raw["forces"], dtype=np.float64)
                q, s, energy = int(raw["q"]), int(raw["s"]), float(raw["energy"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
            n = len(z)
            if r.shape != (3 * n,) or forces.shape != (3 * n,):
                raise DataError(
                    f"{path}:{lineno}: {n} atomic numbers but {r.size // 3} coordinate rows "
                    f"and {forces.size // 3} force rows"
                )
            try:
                mol = Molecule(r.reshape(n, 3), z, q, s)
                records.append(LabeledMolecule(mol, energy, forces.reshape(n, 3)))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return records
