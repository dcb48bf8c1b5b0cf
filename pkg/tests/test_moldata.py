"""Molecular data: centering, rotations, the analytic oracle, batching, I/O."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transip import moldata as md


def make_molecule(coords, z=None, q=0, s=1):
    coords = np.asarray(coords, dtype=np.float64)
    if z is None:
        z = np.full(len(coords), 6)
    return md.Molecule(coords, np.asarray(z), q, s)


RNG = np.random.default_rng(7)


def random_molecule(n, rng=RNG, spread=3.0):
    coords = rng.uniform(-spread, spread, size=(n, 3))
    z = rng.choice([1, 6, 7, 8], size=n)
    return md.Molecule(coords, z, 0, 1)


# -- types ------------------------------------------------------------------------


def test_molecule_validation():
    with pytest.raises(md.DataError):
        make_molecule(np.zeros((2, 2)))
    with pytest.raises(md.DataError):
        md.Molecule(np.zeros((2, 3)), np.array([1, 2, 3]), 0, 1)
    with pytest.raises(md.DataError):
        md.Molecule(np.zeros((1, 3)), np.array([0]), 0, 1)
    with pytest.raises(md.DataError):
        md.Molecule(np.zeros((1, 3)), np.array([1]), 0, 0)


def test_labeled_molecule_shape_check():
    mol = make_molecule([[0, 0, 0], [1, 0, 0]])
    with pytest.raises(md.DataError):
        md.LabeledMolecule(mol, 0.0, np.zeros((3, 3)))


def test_rotation_validation():
    with pytest.raises(md.DataError):
        md.Rotation(np.eye(3) * 2.0)
    reflection = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(md.DataError):
        md.Rotation(reflection)


# -- centering --------------------------------------------------------------------


def test_center_simple_pair():
    mol = make_molecule([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    out = md.center_coordinates(mol)
    np.testing.assert_array_equal(out.coordinates, [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


def test_center_single_atom():
    out = md.center_coordinates(make_molecule([[5.0, -3.0, 1.0]]))
    np.testing.assert_array_equal(out.coordinates, np.zeros((1, 3)))


def test_center_preserves_z_q_s():
    mol = make_molecule([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], z=[1, 8], q=-1, s=2)
    out = md.center_coordinates(mol)
    np.testing.assert_array_equal(out.atomic_numbers, [1, 8])
    assert out.charge == -1 and out.spin == 2


def test_center_idempotent():
    mol = random_molecule(7)
    once = md.center_coordinates(mol)
    twice = md.center_coordinates(once)
    assert np.abs(twice.coordinates - once.coordinates).max() < 1e-12


def test_center_mean_within_tolerance():
    for n in (1, 2, 3, 5, 11, 64):
        out = md.center_coordinates(random_molecule(n))
        assert np.abs(out.coordinates.mean(axis=0)).max() < 1e-10


def test_center_commutes_with_rotation():
    rng = np.random.default_rng(3)
    for _ in range(20):
        mol = random_molecule(6, rng)
        g = md.sample_rotation_uniform(rng)
        a = md.apply_rotation(g, md.center_coordinates(mol))
        b = md.center_coordinates(md.apply_rotation(g, mol))
        assert np.abs(a.coordinates - b.coordinates).max() < 1e-12


def test_center_bitwise_under_representable_translation():
    # Coordinates and shifts on a dyadic grid keep r + t exactly
    # representable; centering must then erase the shift bit-for-bit.
    rng = np.random.default_rng(11)
    grid = 2.0**32
    for _ in range(50):
        n = int(rng.integers(2, 12))
        coords = np.round(rng.uniform(-6, 6, size=(n, 3)) * grid) / grid
        shift = np.round(rng.uniform(-8, 8, size=3) * grid) / grid
        mol = make_molecule(coords)
        moved = make_molecule(coords + shift)
        a = md.center_coordinates(mol).coordinates
        b = md.center_coordinates(moved).coordinates
        assert np.array_equal(a, b)


# -- rotations --------------------------------------------------------------------


def test_rotation_samples_satisfy_group_invariants():
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = md.sample_rotation_uniform(rng)
        r = g.matrix
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-10
        assert abs(np.linalg.det(r) - 1.0) < 1e-10


def test_rotation_mean_matrix_near_zero():
    rng = np.random.default_rng(1)
    total = np.zeros((3, 3))
    n = 20000
    for _ in range(n):
        total += md.sample_rotation_uniform(rng).matrix
    assert np.abs(total / n).max() < 0.05


def test_apply_rotation_quarter_turn():
    rz90 = md.Rotation(np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    mol = make_molecule([[1.0, 0.0, 0.0]])
    out = md.apply_rotation(rz90, mol)
    np.testing.assert_allclose(out.coordinates, [[0.0, 1.0, 0.0]], atol=1e-15)


def test_apply_identity_rotation():
    mol = random_molecule(5)
    out = md.apply_rotation(md.Rotation.identity(), mol)
    np.testing.assert_array_equal(out.coordinates, mol.coordinates)


def test_rotation_composition():
    rng = np.random.default_rng(5)
    for _ in range(20):
        mol = random_molecule(4, rng)
        g1 = md.sample_rotation_uniform(rng)
        g2 = md.sample_rotation_uniform(rng)
        chained = md.apply_rotation(g2, md.apply_rotation(g1, mol))
        composed = md.apply_rotation(g2.compose(g1), mol)
        assert np.abs(chained.coordinates - composed.coordinates).max() < 1e-12


def test_equivariance_pair_isometry_and_procrustes():
    rng = np.random.default_rng(9)
    for _ in range(10):
        mol = md.center_coordinates(random_molecule(6, rng))
        orig, g, rotated = md.make_equivariance_pair(mol, rng)
        d0 = np.linalg.norm(orig.coordinates[:, None] - orig.coordinates[None], axis=-1)
        d1 = np.linalg.norm(rotated.coordinates[:, None] - rotated.coordinates[None], axis=-1)
        assert np.abs(d0 - d1).max() < 1e-10
        np.testing.assert_array_equal(orig.atomic_numbers, rotated.atomic_numbers)
        assert orig.charge == rotated.charge and orig.spin == rotated.spin
        # orthogonal Procrustes recovery of the stored rotation
        u, _, vt = np.linalg.svd(rotated.coordinates.T @ orig.coordinates)
        recovered = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
        assert np.abs(recovered - g.matrix).max() < 1e-8
        assert md.is_centered(rotated, atol=1e-9)


# -- the oracle -------------------------------------------------------------------


def test_dimer_at_minimum():
    sigma, eps = 3.0, 0.25
    d = 2.0 ** (1.0 / 6.0) * sigma
    mol = make_molecule([[0, 0, 0], [d, 0, 0]])
    energy, forces = md.lj_energy_forces(mol, eps, sigma)
    assert energy == pytest.approx(-eps, abs=1e-12)
    assert np.abs(forces).max() < 1e-10


def test_dimer_at_sigma_zero_energy():
    mol = make_molecule([[0, 0, 0], [3.0, 0, 0]])
    energy, _ = md.lj_energy_forces(mol, 0.25, 3.0)
    assert energy == pytest.approx(0.0, abs=1e-12)


def test_coincident_atoms_rejected():
    mol = make_molecule([[0, 0, 0], [0, 0, 1e-8]])
    with pytest.raises(md.DataError):
        md.lj_energy_forces(mol, 0.1, 3.0)


def test_oracle_forces_match_finite_differences():
    rng = np.random.default_rng(17)
    records = md.generate_lj_dataset(3, 6, 6, rng=rng)
    h = 1e-6
    for record in records:
        mol = record.molecule
        eps, sig = md.element_parameters(mol.atomic_numbers)
        fd = np.zeros_like(mol.coordinates)
        for i in range(len(mol)):
            for k in range(3):
                up = mol.coordinates.copy()
                up[i, k] += h
                down = mol.coordinates.copy()
                down[i, k] -= h
                e_up, _ = md.lj_energy_forces(md.Molecule(up, mol.atomic_numbers, 0, 1), eps, sig)
                e_down, _ = md.lj_energy_forces(md.Molecule(down, mol.atomic_numbers, 0, 1), eps, sig)
                fd[i, k] = -(e_up - e_down) / (2 * h)
        rel = np.abs(record.forces - fd).max() / max(np.abs(fd).max(), 1e-12)
        assert rel < 1e-6


def test_oracle_symmetries():
    rng = np.random.default_rng(23)
    records = md.generate_lj_dataset(20, 3, 7, rng=rng)
    for record in records:
        mol = record.molecule
        eps, sig = md.element_parameters(mol.atomic_numbers)
        e0, f0 = md.lj_energy_forces(mol, eps, sig)
        # rotation invariance / equivariance
        g = md.sample_rotation_uniform(rng)
        e1, f1 = md.lj_energy_forces(md.apply_rotation(g, mol), eps, sig)
        assert abs(e1 - e0) < 1e-9
        assert np.abs(f1 - f0 @ g.matrix.T).max() < 1e-9
        # translation invariance (before centering)
        shifted = md.Molecule(mol.coordinates + np.array([1.5, -2.0, 0.25]), mol.atomic_numbers, 0, 1)
        e2, f2 = md.lj_energy_forces(shifted, eps, sig)
        assert abs(e2 - e0) < 1e-9
        assert np.abs(f2 - f0).max() < 1e-9
        # Newton's third law
        assert np.abs(f0.sum(axis=0)).max() < 1e-9


def test_labels_are_negative_gradient():
    rng = np.random.default_rng(29)
    records = md.generate_lj_dataset(4, 4, 6, rng=rng)
    h = 1e-5
    for record in records:
        mol = record.molecule
        for i in range(len(mol)):
            for k in range(3):
                up = mol.coordinates.copy()
                up[i, k] += h
                down = mol.coordinates.copy()
                down[i, k] -= h
                e_up = md.oracle_labels(md.Molecule(up, mol.atomic_numbers, mol.charge, mol.spin)).energy
                e_down = md.oracle_labels(md.Molecule(down, mol.atomic_numbers, mol.charge, mol.spin)).energy
                fd = -(e_up - e_down) / (2 * h)
                assert abs(fd - record.forces[i, k]) < 1e-8 * max(1.0, abs(record.forces[i, k]))


def test_charge_spin_offset_moves_energy_not_forces():
    coords = np.array([[0.0, 0.0, 0.0], [3.1, 0.0, 0.0], [0.0, 3.2, 0.0]])
    z = np.array([6, 6, 6])
    base = md.oracle_labels(md.Molecule(coords, z, 0, 1))
    charged = md.oracle_labels(md.Molecule(coords, z, 1, 2))
    assert charged.energy != base.energy
    np.testing.assert_array_equal(charged.forces, base.forces)
    expected_delta = md.charge_spin_offset(1, 2) - md.charge_spin_offset(0, 1)
    assert charged.energy - base.energy == pytest.approx(expected_delta, abs=1e-12)


# -- the generator ----------------------------------------------------------------


def test_generator_count_and_invariants():
    records = md.generate_lj_dataset(50, 3, 8, rng=np.random.default_rng(4))
    assert len(records) == 50
    for record in records:
        mol = record.molecule
        assert 3 <= len(mol) <= 8
        assert md.is_centered(mol)
        assert record.forces.shape == mol.coordinates.shape
        assert abs(record.energy) / len(mol) <= 50.0
        assert mol.charge in md.CHARGE_CHOICES and mol.spin in md.SPIN_CHOICES


def test_generator_distance_bounds():
    records = md.generate_lj_dataset(30, 3, 8, rng=np.random.default_rng(8))
    for record in records:
        mol = record.molecule
        _, sig = md.element_parameters(mol.atomic_numbers)
        dist = np.linalg.norm(mol.coordinates[:, None] - mol.coordinates[None], axis=-1)
        pair_sigma = 0.5 * (sig[:, None] + sig[None, :])
        off = ~np.eye(len(mol), dtype=bool)
        assert np.all(dist[off] >= 0.8 * pair_sigma[off] - 1e-9)
        assert dist.max() <= 4.0 * sig.mean() + 1e-9


def test_generator_deterministic_files(tmp_path):
    a = md.generate_lj_dataset(25, 3, 6, rng=np.random.default_rng(99))
    b = md.generate_lj_dataset(25, 3, 6, rng=np.random.default_rng(99))
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    md.write_dataset(a, pa)
    md.write_dataset(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_generator_bounds_validation():
    with pytest.raises(md.DataError):
        md.generate_lj_dataset(5, 1, 4)
    with pytest.raises(md.DataError):
        md.generate_lj_dataset(5, 4, 3)
    with pytest.raises(md.DataError):
        md.generate_lj_dataset(5, 2, 4, element_palette=[2])


# -- batching ---------------------------------------------------------------------


def test_batch_two_molecules_block_mask():
    m1 = random_molecule(3)
    m2 = random_molecule(5)
    batches = md.batch_molecules([m1, m2], max_tokens=8)
    assert len(batches) == 1
    batch = batches[0]
    mask = batch.attn_mask[0, 0]
    assert mask.shape == (8, 8)
    assert np.all(mask[:3, :3] == 0.0)
    assert np.all(mask[3:, 3:] == 0.0)
    assert np.all(np.isneginf(mask[:3, 3:]))
    assert np.all(np.isneginf(mask[3:, :3]))
    np.testing.assert_array_equal(batch.positions[0], [0, 1, 2, 0, 1, 2, 3, 4])


def test_single_molecule_mask_fully_open():
    mol = random_molecule(4)
    batch = md.batch_molecules([mol], max_tokens=16)[0]
    assert np.all(batch.attn_mask[0, 0] == 0.0)


def test_batch_round_trip_exact():
    rng = np.random.default_rng(13)
    records = md.generate_lj_dataset(12, 3, 7, rng=rng)
    batches = md.batch_molecules(records, max_tokens=16)
    back = md.unbatch_molecules(batches)
    assert len(back) == len(records)
    for a, b in zip(records, back):
        np.testing.assert_array_equal(a.molecule.coordinates, b.molecule.coordinates)
        np.testing.assert_array_equal(a.molecule.atomic_numbers, b.molecule.atomic_numbers)
        assert a.molecule.charge == b.molecule.charge
        assert a.molecule.spin == b.molecule.spin
        assert a.energy == b.energy
        np.testing.assert_array_equal(a.forces, b.forces)


def test_batch_rejects_oversized_molecule():
    with pytest.raises(md.DataError):
        md.batch_molecules([random_molecule(9)], max_tokens=8)


def test_padding_slots_are_inert():
    mol = random_molecule(3)
    batch = md.batch_molecules([mol], max_tokens=8, pad_to=6)[0]
    assert batch.coords.shape == (1, 6, 3)
    assert np.all(batch.coords[0, 3:] == 0.0)
    assert np.all(batch.atomic_numbers[0, 3:] == 0)
    assert not batch.valid[0, 3:].any()
    assert np.all(np.isneginf(batch.attn_mask[0, 0, :3, 3:]))


@given(sizes=st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=8))
@settings(max_examples=30, deadline=None)
def test_greedy_packing_respects_budget(sizes):
    rng = np.random.default_rng(sum(sizes))
    mols = [random_molecule(n, rng) for n in sizes]
    batches = md.batch_molecules(mols, max_tokens=6)
    assert sum(b.valid.sum() for b in batches) == sum(sizes)
    for batch in batches:
        assert batch.valid[0].sum() <= 6
    back = md.unbatch_molecules(batches)
    for a, b in zip(mols, back):
        np.testing.assert_array_equal(a.coordinates, b.coordinates)


# -- dataset files ----------------------------------------------------------------


def test_dataset_write_read_round_trip(tmp_path):
    records = md.generate_lj_dataset(10, 3, 6, rng=np.random.default_rng(31))
    path = tmp_path / "data.jsonl"
    md.write_dataset(records, path)
    back = md.read_dataset(path)
    assert len(back) == len(records)
    for a, b in zip(records, back):
        np.testing.assert_array_equal(a.molecule.coordinates, b.molecule.coordinates)
        np.testing.assert_array_equal(a.forces, b.forces)
        assert a.energy == b.energy
        assert a.molecule.charge == b.molecule.charge
        assert a.molecule.spin == b.molecule.spin


def test_dataset_shape_mismatch_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = '{"z": [1, 1], "r": [0, 0, 0, 2, 0, 0], "q": 0, "s": 1, "energy": 0.0, "forces": [0, 0, 0, 0, 0, 0]}'
    bad = '{"z": [1, 1, 1, 1], "r": [0, 0, 0, 2, 0, 0, 4, 0, 0], "q": 0, "s": 1, "energy": 0.0, "forces": [0, 0, 0, 0, 0, 0, 0, 0, 0]}'
    path.write_text(good + "\n" + bad + "\n")
    with pytest.raises(md.DataError, match=":2:"):
        md.read_dataset(path)


def test_dataset_invalid_json_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("not json\n")
    with pytest.raises(md.DataError, match=":1:"):
        md.read_dataset(path)


def test_empty_dataset_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert md.read_dataset(path) == []
