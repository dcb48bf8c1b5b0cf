"""Metric definitions, probes, and the comparison CSV."""

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transip import moldata as md
from transip import model as M
from transip import train as TR
from transip import evaluate as ev
from transip.checkpoint import save_model


TINY = M.ModelConfig(hidden_dim=32, num_layers=1, num_heads=4, projection_dropout=0.0)


def dataset(n=10, seed=3):
    return md.generate_lj_dataset(n, 3, 5, rng=np.random.default_rng(seed))


# -- metric oracles -----------------------------------------------------------------


def test_force_mae_exact_cases():
    assert ev.force_mae(np.zeros((2, 3)), np.zeros((2, 3))) == 0.0
    pred = np.array([[1.0, 0.0, 0.0]])
    true = np.array([[0.0, 1.0, 0.0]])
    assert ev.force_mae(pred, true) == pytest.approx(2.0 / 3.0)


def test_force_mae_symmetric():
    a, b = np.random.default_rng(0).normal(size=(2, 4, 3))
    assert ev.force_mae(a, b) == ev.force_mae(b, a)


def test_force_cosine_cases():
    f = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 0.25]])
    assert ev.force_cosine(f, f) == pytest.approx(1.0)
    assert ev.force_cosine(f, -f) == pytest.approx(-1.0)
    pred = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    true = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert ev.force_cosine(pred, true) == pytest.approx(0.5)


def test_force_cosine_zero_rows_contribute_zero():
    pred = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    true = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert ev.force_cosine(pred, true) == pytest.approx(0.5)


def test_energy_metrics_cases():
    assert ev.energy_metrics(5.0, 5.0, 3) == (0.0, 0.0)
    atom_mae, total_mae = ev.energy_metrics(10.0, 8.0, 4)
    assert atom_mae == pytest.approx(0.5)
    assert total_mae == pytest.approx(2.0)


@given(
    e_pred=st.floats(-100, 100, allow_nan=False),
    e_true=st.floats(-100, 100, allow_nan=False),
    n=st.integers(min_value=1, max_value=64),
)
@settings(max_examples=200, deadline=None)
def test_per_atom_times_count_is_total(e_pred, e_true, n):
    atom_mae, total_mae = ev.energy_metrics(e_pred, e_true, n)
    assert atom_mae * n == pytest.approx(total_mae, rel=1e-12, abs=1e-12)


def test_metric_shape_mismatch_errors():
    with pytest.raises(ValueError):
        ev.force_mae(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ev.force_cosine(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ev.energy_metrics(1.0, 1.0, 0)


# -- probes -------------------------------------------------------------------------


def test_latent_probe_deterministic():
    params = M.init_parameters(TINY, seed=0)
    records = dataset(6)
    a = ev.latent_equivariance_probe(params, TINY, records, 3, seed=77)
    b = ev.latent_equivariance_probe(params, TINY, records, 3, seed=77)
    assert a == b
    c = ev.latent_equivariance_probe(params, TINY, records, 3, seed=78)
    assert a != c


def test_latent_probe_zero_when_transform_reproduces_rotated_branch(monkeypatch):
    # With identity rotations and an identity transform the rotated branch
    # equals the transformed branch by construction, so the probe is zero.
    params = M.init_parameters(TINY, seed=0)
    records = dataset(4)
    monkeypatch.setattr(ev, "sample_rotation_uniform", lambda rng: md.Rotation.identity())
    monkeypatch.setattr(M, "transform_latent", lambda g, h, params, cfg: h)
    assert ev.latent_equivariance_probe(params, TINY, records, 2, seed=3) == 0.0


def test_output_probe_identity_rotations_give_zero(monkeypatch):
    params = M.init_parameters(TINY, seed=0)
    records = dataset(4)
    monkeypatch.setattr(ev, "sample_rotation_uniform", lambda rng: md.Rotation.identity())
    e_err, f_err = ev.output_equivariance_probe(params, TINY, records, 2, seed=5)
    assert e_err == 0.0
    assert f_err == 0.0


def test_output_probe_positive_for_untrained_model():
    params = M.init_parameters(TINY, seed=0)
    records = dataset(4)
    e_err, f_err = ev.output_equivariance_probe(params, TINY, records, 2, seed=5)
    assert e_err > 0.0
    assert f_err > 0.0


def test_metrics_invariant_to_batch_packing():
    params = M.init_parameters(TINY, seed=1)
    records = dataset(9)
    small = ev.evaluate_model(params, TINY, records, batch_max_tokens=8, probe_molecules=4)
    large = ev.evaluate_model(params, TINY, records, batch_max_tokens=64, probe_molecules=4)
    assert abs(small.force_mae - large.force_mae) < 1e-10
    assert abs(small.force_cosine - large.force_cosine) < 1e-10
    assert abs(small.energy_per_atom_mae - large.energy_per_atom_mae) < 1e-10
    assert abs(small.total_energy_mae - large.total_energy_mae) < 1e-10


def test_metrics_invariant_to_evaluation_order():
    params = M.init_parameters(TINY, seed=1)
    records = dataset(8)
    fwd = ev.evaluate_model(params, TINY, records, probe_molecules=4)
    rev = ev.evaluate_model(params, TINY, records[::-1], probe_molecules=4)
    assert abs(fwd.force_mae - rev.force_mae) < 1e-10
    assert abs(fwd.energy_per_atom_mae - rev.energy_per_atom_mae) < 1e-10


def test_report_bounds():
    params = M.init_parameters(TINY, seed=1)
    report = ev.evaluate_model(params, TINY, dataset(6), probe_molecules=3)
    assert -1.0 <= report.force_cosine <= 1.0
    assert report.force_mae >= 0.0
    assert report.energy_per_atom_mae >= 0.0
    assert report.total_energy_mae >= 0.0
    assert report.sample_count == 6


# -- comparison harness ---------------------------------------------------------------


def test_compare_models_csv_schema(tmp_path):
    records = dataset(6)
    paths = []
    for seed in (0, 1):
        params = M.init_parameters(TINY, seed=seed)
        path = tmp_path / f"model_{seed}.tipc"
        save_model(path, TINY, params)
        paths.append(path)
    out = tmp_path / "compare.csv"
    reports = ev.compare_models(paths, records, out, probe_molecules=3)
    assert len(reports) == 2
    with out.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ev.CSV_HEADER
    assert len(rows) == 3
    assert rows[1][0].endswith("model_0.tipc")


def test_compare_models_deterministic(tmp_path):
    records = dataset(5)
    params = M.init_parameters(TINY, seed=0)
    path = tmp_path / "model.tipc"
    save_model(path, TINY, params)
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    ev.compare_models([path], records, out1, probe_molecules=3)
    ev.compare_models([path], records, out2, probe_molecules=3)
    assert out1.read_text() == out2.read_text()
