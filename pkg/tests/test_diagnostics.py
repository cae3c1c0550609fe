import json

import numpy as np
import pytest

from opreslab import diagnostics as D
from opreslab import generators as gen
from opreslab.gridpack import save_pack
from opreslab.training import MixSpec

TINY_MODEL = dict(width=4, layers=1, lift_dim=8, proj_dim=8)
TINY_TRAIN = dict(epochs=2, batch_size=8)


@pytest.fixture(scope="module")
def master_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    pack = gen.darcy_pack(gen.gen_darcy(24, 32, seed=1), seed=1)
    return str(save_pack(pack, root / "darcy_r32.gpk"))


def _plan(master, **kw):
    base = dict(master=master, n_train=16, n_test=8, n_val=4, model=TINY_MODEL, train=TINY_TRAIN)
    base.update(kw)
    return D.ExperimentPlan(**base)


def test_interpolation_grid(master_path):
    plan = _plan(master_path, kind="interpolation", limit=4, train_axis=[8, 16], test_axis=[8, 16, 32])
    rep = D.run_experiment(plan, n_jobs=1)
    assert rep.cells.shape == (2, 3) and np.all(np.isfinite(rep.cells))
    for (row, col), spec in rep.spectra.items():
        assert D.spectrum_sanity(spec)
        assert spec.modes.size == col // 2 + 1


def test_interpolation_rejects_small_grid(master_path):
    plan = _plan(master_path, kind="interpolation", limit=8, train_axis=[8], test_axis=[16])
    with pytest.raises(ValueError, match="cannot hold"):
        D.run_experiment(plan, n_jobs=1)


def test_extrapolation_grid(master_path):
    plan = _plan(master_path, kind="extrapolation", resolution=32, train_axis=[4, 16], test_axis=[4, 8, 16])
    rep = D.run_experiment(plan, n_jobs=1)
    assert rep.rows == [4, 16] and rep.cols == [4, 8, 16]
    with pytest.raises(ValueError, match="Nyquist"):
        D.run_experiment(_plan(master_path, kind="extrapolation", resolution=32, train_axis=[32], test_axis=[4]), n_jobs=1)


def test_cross_resolution_bandlimit(master_path):
    plan = _plan(master_path, kind="cross_resolution", train_axis=[8], test_axis=[8, 32], wrapper="bandlimit")
    rep = D.run_experiment(plan, n_jobs=1)
    spec = rep.spectra[(8, 32)]
    # per-axis band |k| <= 4 reaches radial shell round(4 * sqrt(2)) = 6 in the corners
    hi = spec.modes > 6
    assert np.all(spec.pred_energy[hi] < 1e-10 * spec.pred_energy.sum())
    # the wrapper predicts nothing above the anchor band, so the residual there is the label itself
    np.testing.assert_allclose(spec.normalized_residual[hi], 1.0, rtol=1e-6)


def test_mix_sweep_and_pareto(master_path):
    plan = _plan(master_path, kind="mix_sweep", mixes=["8", "8:0.5,16:0.5"], test_axis=[8, 16])
    rep = D.run_experiment(plan, n_jobs=1)
    runs = [(MixSpec.parse(m, 16), rep.row_losses(m)) for m in plan.mixes]
    table = D.pareto_report(runs)
    assert [r["avg_pixels"] for r in table] == [64.0, 160.0]
    assert table[0]["pareto"]


def test_pareto_flags():
    one = D.pareto_report([(MixSpec.single(16, 10), {16: 1.0})])
    assert one[0]["pareto"]
    table = D.pareto_report([
        (MixSpec.single(16, 10), {16: 1.0}),
        (MixSpec.single(32, 10), {16: 2.0}),
        (MixSpec(((16, 0.5), (32, 0.5)), 10), {16: 0.5}),
    ])
    flags = {r["mix"]: r["pareto"] for r in table}
    assert flags == {"16x1": True, "32x1": False, "16x0.5+32x0.5": True}
    with pytest.raises(ValueError):
        D.pareto_report([])


def test_loss_compare(master_path):
    plan = _plan(master_path, kind="loss_compare", resolution=16, weights=[0.0, 0.1], test_axis=[16, 32])
    rep = D.run_experiment(plan, n_jobs=1)
    assert rep.rows == [0.0, 0.1] and np.all(np.isfinite(rep.cells))


def test_modes_sweep_cap_inactive_matches_default(master_path):
    base = _plan(master_path, kind="interpolation", limit=4, train_axis=[8], test_axis=[8, 16])
    default = D.run_experiment(base, n_jobs=1)
    sweep = D.run_experiment(_plan(master_path, kind="modes_sweep", base_kind="interpolation", limit=4,
                                   train_axis=[8], test_axis=[8, 16], m_values=[1, 4]), n_jobs=1)
    assert np.array_equal(sweep[4].cells, default.cells)
    assert set(sweep) == {1, 4}


def test_report_directory_reproducible(master_path, tmp_path):
    plan = _plan(master_path, kind="cross_resolution", train_axis=[8, 16], test_axis=[8, 16])
    files = []
    for name in ("a", "b"):
        D.run_experiment(plan, tmp_path / name, n_jobs=1)
        files.append({p.relative_to(tmp_path / name): p.read_bytes()
                      for p in (tmp_path / name).rglob("*") if p.is_file()})
    assert files[0] == files[1]
    assert "cells/8_16/spectrum.csv" in {str(p) for p in files[0]}
    head = files[0][next(p for p in files[0] if p.name == "spectrum.csv")].decode().splitlines()[0]
    assert head == "mode,label_energy,pred_energy,residual_energy,normalized_residual"
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["plan"]["kind"] == "cross_resolution"


def test_parallel_rows_match_serial(master_path):
    plan = _plan(master_path, kind="cross_resolution", train_axis=[8, 16], test_axis=[16])
    serial = D.run_experiment(plan, n_jobs=1)
    parallel = D.run_experiment(plan, n_jobs=2)
    assert np.array_equal(serial.cells, parallel.cells)


def test_plan_validation(master_path, tmp_path):
    with pytest.raises(ValueError, match="unknown experiment kind"):
        D.ExperimentPlan(kind="nope", master=master_path, train_axis=[8], test_axis=[8])
    with pytest.raises(ValueError, match="unknown plan keys"):
        D.ExperimentPlan.from_dict({"kind": "interpolation", "master": "x", "bogus": 1})
    plan = _plan(str(tmp_path / "missing.gpk"), kind="cross_resolution", train_axis=[8], test_axis=[8])
    with pytest.raises(FileNotFoundError, match="missing.gpk"):
        D.run_experiment(plan, n_jobs=1)


def test_rel_l2_metric(master_path):
    plan = _plan(master_path, kind="cross_resolution", train_axis=[8], test_axis=[8], metric="rel_l2")
    rep = D.run_experiment(plan, n_jobs=1)
    assert 0.0 < rep.cells[0, 0] < 10.0
