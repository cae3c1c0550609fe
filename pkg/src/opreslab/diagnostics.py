"""Experiment protocols: train on one setting, test on many, report MSE grids and spectra.

Every experiment is a grid. Rows are training settings (a resolution, a
low-pass limit, a mix, a loss) and columns are test settings. One model is
trained per row; rows are independent jobs and may run in parallel.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .generators import derive_resolutions
from .gridpack import GridPack, load_pack
from .models import BandLimitWrapper, FnoSpec, bandlimited_forward, init_params, predict
from .spectral import SpectrumReport, report_from_arrays
from .training import MixSpec, TrainConfig, TrainingSet, average_pixels, compose_mix, log_csv, train

KINDS = ("interpolation", "extrapolation", "cross_resolution", "mix_sweep", "modes_sweep", "loss_compare")


@dataclass
class ExperimentPlan:
    """JSON-serialisable description of one experiment grid.

    ``master`` is the path of a master-resolution pack. Axis meanings by
    kind: interpolation rows/cols are resolutions at fixed ``limit``;
    extrapolation rows/cols are limits at fixed ``resolution``;
    cross_resolution rows/cols are unfiltered resolutions; mix_sweep rows
    are ``mixes`` (``"16:0.5,32:0.5"``); loss_compare rows are physics
    weights at ``resolution``; modes_sweep repeats ``base_kind`` once per
    entry of ``m_values``.
    """

    kind: str
    master: str
    train_axis: list = field(default_factory=list)
    test_axis: list = field(default_factory=list)
    limit: int | None = None
    resolution: int | None = None
    mixes: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    m_values: list = field(default_factory=list)
    base_kind: str = "interpolation"
    wrapper: str = "none"
    w: float = 0.0
    n_train: int = 512
    n_test: int = 128
    n_val: int = 32
    seed: int = 0
    metric: str = "mse"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.metric not in ("mse", "rel_l2"):
            raise ValueError(f"metric must be 'mse' or 'rel_l2', got {self.metric!r}")
        if self.wrapper not in ("none", "bandlimit"):
            raise ValueError(f"wrapper must be 'none' or 'bandlimit', got {self.wrapper!r}")
        if self.kind == "mix_sweep":
            if not self.mixes:
                raise ValueError("mix_sweep needs a non-empty 'mixes' list")
        elif self.kind == "loss_compare":
            if not self.weights or self.resolution is None:
                raise ValueError("loss_compare needs 'weights' and 'resolution'")
        elif self.kind == "modes_sweep":
            if not self.m_values:
                raise ValueError("modes_sweep needs a non-empty 'm_values' list")
            if self.base_kind not in ("interpolation", "extrapolation"):
                raise ValueError("modes_sweep base_kind must be interpolation or extrapolation")
        elif not self.train_axis:
            raise ValueError(f"{self.kind} needs a non-empty train_axis")
        if self.kind != "modes_sweep" and not self.test_axis:
            raise ValueError(f"{self.kind} needs a non-empty test_axis")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown plan keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeatmapReport:
    """Mean test error per (train setting, test setting) plus residual spectra."""

    rows: list
    cols: list
    cells: np.ndarray
    spectra: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)
    metric: str = "mse"

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.shape != (len(self.rows), len(self.cols)):
            raise ValueError(f"cells {self.cells.shape} do not match {len(self.rows)} rows x {len(self.cols)} cols")

    def cell(self, row, col) -> float:
        return float(self.cells[self.rows.index(row), self.cols.index(col)])

    def row_losses(self, row) -> dict:
        return {c: self.cell(row, c) for c in self.cols}

    def max_loss(self, row) -> float:
        return float(np.max(self.cells[self.rows.index(row)]))

    def to_json(self) -> dict:
        return {
            "rows": [str(r) for r in self.rows],
            "cols": [str(c) for c in self.cols],
            "metric": self.metric,
            "cells": [[None if not math.isfinite(v) else v for v in row] for row in self.cells.tolist()],
            "failed": {f"{r}_{c}": msg for (r, c), msg in self.failed.items()},
        }


# data preparation ---------------------------------------------------------------------------

def _load_master(plan: ExperimentPlan) -> GridPack:
    pack = load_pack(plan.master)
    need = plan.n_train + plan.n_test
    if pack.count < need:
        raise ValueError(f"{plan.master}: has {pack.count} samples, plan needs {need} (n_train + n_test)")
    return pack


def _split(pack: GridPack, n_train: int, n_test: int) -> tuple:
    return pack.subset(range(n_train)), pack.subset(range(n_train, n_train + n_test))


def _test_arrays(pack: GridPack, plan: ExperimentPlan) -> tuple:
    test = _split(pack, plan.n_train, plan.n_test)[1]
    return test.inputs, test.labels


def _model_spec(plan: ExperimentPlan, dims: int, resolution: int) -> FnoSpec:
    kw = dict(plan.model)
    kw.setdefault("max_modes", max(1, resolution // 2))
    return FnoSpec(dims=dims, **kw)


def _train_config(plan: ExperimentPlan, pde: str, w: float | None = None) -> TrainConfig:
    w = plan.w if w is None else w
    loss = "data+physics" if w > 0 else "data"
    try:
        base = TrainConfig.preset(pde, loss).to_dict()
    except ValueError:
        base = TrainConfig(loss=loss, w=w).to_dict()
    base.update({"loss": loss, "w": w, "seed": plan.seed})
    base.update(plan.train)
    return TrainConfig(**base)


@dataclass
class _RowJob:
    key: object
    spec: FnoSpec
    config: TrainConfig
    tset: TrainingSet
    val: dict
    tests: dict
    anchor: int | None
    metric: str


def score_predictions(pred: np.ndarray, label: np.ndarray, metric: str) -> float:
    if metric == "mse":
        return float(np.mean((pred - label) ** 2))
    axes = tuple(range(1, pred.ndim))
    num = np.sqrt(np.sum((pred - label) ** 2, axis=axes))
    den = np.sqrt(np.sum(label ** 2, axis=axes))
    return float(np.mean(num / den))


def _run_row(job: _RowJob):
    params = init_params(job.spec, job.config.seed)
    try:
        result = train(params, job.spec, job.tset, job.config, job.val)
    except Exception as exc:  # a failed row is reported, not fatal to the grid
        return job.key, None, {c: (math.nan, None, f"{type(exc).__name__}: {exc}") for c in job.tests}
    out = {}
    for col, (x, y) in job.tests.items():
        chunk = max(1, job.config.chunk_pixels // x.shape[-1] ** job.spec.dims)
        if job.anchor is not None:
            pred = bandlimited_forward(BandLimitWrapper(params, job.spec, job.anchor), x, chunk)
        else:
            pred = predict(params, job.spec, x, chunk)
        rep = report_from_arrays(pred, y, job.spec.dims)
        out[col] = (score_predictions(pred, y, job.metric), rep, None)
    return job.key, result.log, out


def run_rows(jobs: Sequence[_RowJob], cols: list, metric: str, n_jobs: int = 1) -> HeatmapReport:
    """Execute row jobs (in parallel when ``n_jobs > 1``) and assemble in row order."""
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as pool:
            results = list(pool.map(_run_row, jobs))
    else:
        results = [_run_row(j) for j in jobs]
    rows = [j.key for j in jobs]
    cells = np.full((len(rows), len(cols)), np.nan)
    spectra, logs, failed = {}, {}, {}
    for i, (key, log, out) in enumerate(results):
        logs[key] = log
        for j, col in enumerate(cols):
            score, rep, err = out[col]
            cells[i, j] = score
            if rep is not None:
                spectra[(key, col)] = rep
            if err is not None:
                failed[(key, col)] = err
    return HeatmapReport(rows, cols, cells, spectra, logs, failed, metric)


def _val_sets(tests: Mapping, n_val: int) -> dict:
    return {k: (x[:n_val], y[:n_val]) for k, (x, y) in tests.items()} if n_val > 0 else {}


# protocols ---------------------------------------------------------------------------------

def run_interpolation(plan: ExperimentPlan, master: GridPack | None = None, n_jobs: int = 1) -> HeatmapReport:
    """Fixed band (``plan.limit``), varying sampling rate."""
    master = master if master is not None else _load_master(plan)
    limit = plan.limit
    if limit is None:
        raise ValueError("interpolation needs 'limit'")
    res = sorted(set(plan.train_axis) | set(plan.test_axis))
    low = [r for r in res if r < 2 * limit]
    if low:
        raise ValueError(f"resolutions {low} cannot hold low-pass limit {limit} (need >= {2 * limit})")
    packs = {p.resolution: p for p in derive_resolutions(master, res, limit)}
    tests = {r: _test_arrays(packs[r], plan) for r in plan.test_axis}
    pde = master.meta.get("pde") or ""
    jobs = []
    for r in plan.train_axis:
        trn = _split(packs[r], plan.n_train, plan.n_test)[0]
        spec = _model_spec(plan, master.dims, r)
        jobs.append(_RowJob(r, spec, _train_config(plan, pde), TrainingSet.from_pack(trn),
                            _val_sets(tests, plan.n_val), tests, None, plan.metric))
    return run_rows(jobs, list(plan.test_axis), plan.metric, n_jobs)


def run_extrapolation(plan: ExperimentPlan, master: GridPack | None = None, n_jobs: int = 1) -> HeatmapReport:
    """Fixed resolution, varying band (rows/cols are low-pass limits)."""
    master = master if master is not None else _load_master(plan)
    res = plan.resolution or master.resolution
    limits = sorted(set(plan.train_axis) | set(plan.test_axis))
    high = [lim for lim in limits if 2 * lim > res]
    if high:
        raise ValueError(f"limits {high} exceed the Nyquist wavenumber {res // 2} of resolution {res}")
    packs = {lim: derive_resolutions(master, [res], lim)[0] for lim in limits}
    tests = {lim: _test_arrays(packs[lim], plan) for lim in plan.test_axis}
    pde = master.meta.get("pde") or ""
    jobs = []
    for lim in plan.train_axis:
        trn = _split(packs[lim], plan.n_train, plan.n_test)[0]
        jobs.append(_RowJob(lim, _model_spec(plan, master.dims, res), _train_config(plan, pde),
                            TrainingSet.from_pack(trn), _val_sets(tests, plan.n_val), tests, None, plan.metric))
    return run_rows(jobs, list(plan.test_axis), plan.metric, n_jobs)


def _native_packs(master: GridPack, resolutions) -> dict:
    return {p.resolution: p for p in derive_resolutions(master, sorted(set(resolutions)))}


def run_cross_resolution(plan: ExperimentPlan, master: GridPack | None = None, n_jobs: int = 1) -> HeatmapReport:
    """Native (unfiltered) data at each resolution; ``wrapper='bandlimit'`` anchors at the train resolution."""
    master = master if master is not None else _load_master(plan)
    packs = _native_packs(master, list(plan.train_axis) + list(plan.test_axis))
    tests = {r: _test_arrays(packs[r], plan) for r in plan.test_axis}
    pde = master.meta.get("pde") or ""
    jobs = []
    for r in plan.train_axis:
        trn = _split(packs[r], plan.n_train, plan.n_test)[0]
        anchor = r if plan.wrapper == "bandlimit" else None
        jobs.append(_RowJob(r, _model_spec(plan, master.dims, r), _train_config(plan, pde),
                            TrainingSet.from_pack(trn), _val_sets(tests, plan.n_val), tests, anchor, plan.metric))
    return run_rows(jobs, list(plan.test_axis), plan.metric, n_jobs)


def mix_sweep(plan: ExperimentPlan, master: GridPack | None = None, n_jobs: int = 1) -> HeatmapReport:
    """One model per mix (rows keyed by the mix text), tested at each resolution."""
    master = master if master is not None else _load_master(plan)
    mixes = [MixSpec.parse(m, plan.n_train) for m in plan.mixes]
    all_res = {r for m in mixes for r in m.resolutions} | set(plan.test_axis)
    packs = _native_packs(master, all_res)
    train_packs = {r: p.subset(range(plan.n_train)) for r, p in packs.items()}
    tests = {r: _test_arrays(packs[r], plan) for r in plan.test_axis}
    pde = master.meta.get("pde") or ""
    jobs = []
    for text, mix in zip(plan.mixes, mixes):
        tset = compose_mix(train_packs, mix, plan.seed)
        spec = _model_spec(plan, master.dims, max(mix.resolutions))
        jobs.append(_RowJob(text, spec, _train_config(plan, pde), tset,
                            _val_sets(tests, plan.n_val), tests, None, plan.metric))
    return run_rows(jobs, list(plan.test_axis), plan.metric, n_jobs)


def loss_compare(plan: ExperimentPlan, master: GridPack | None = None, n_jobs: int = 1) -> HeatmapReport:
    """Data-only vs dual objectives at one training resolution (rows are ``w``)."""
    master = master if master is not None else _load_master(plan)
    r = plan.resolution
    packs = _native_packs(master, [r] + list(plan.test_axis))
    tests = {c: _test_arrays(packs[c], plan) for c in plan.test_axis}
    pde = master.meta.get("pde") or ""
    trn = _split(packs[r], plan.n_train, plan.n_test)[0]
    jobs = [
        _RowJob(float(w), _model_spec(plan, master.dims, r), _train_config(plan, pde, float(w)),
                TrainingSet.from_pack(trn), _val_sets(tests, plan.n_val), tests, None, plan.metric)
        for w in plan.weights
    ]
    return run_rows(jobs, list(plan.test_axis), plan.metric, n_jobs)


def modes_sweep(plan: ExperimentPlan, master: GridPack | None = None, n_jobs: int = 1) -> dict:
    """Repeat ``plan.base_kind`` with ``max_modes`` set to each of ``plan.m_values``."""
    master = master if master is not None else _load_master(plan)
    out = {}
    for m in plan.m_values:
        sub = ExperimentPlan.from_dict({**plan.to_dict(), "kind": plan.base_kind,
                                        "model": {**plan.model, "max_modes": int(m)}})
        out[int(m)] = PROTOCOLS[plan.base_kind](sub, master, n_jobs)
    return out


PROTOCOLS = {
    "interpolation": run_interpolation,
    "extrapolation": run_extrapolation,
    "cross_resolution": run_cross_resolution,
    "mix_sweep": mix_sweep,
    "loss_compare": loss_compare,
    "modes_sweep": modes_sweep,
}


# Pareto ------------------------------------------------------------------------------------

def pareto_report(runs: Sequence[tuple], dims: int = 2) -> list[dict]:
    """Rows ``{mix, avg_pixels, losses, max_loss, pareto}`` sorted by data size.

    ``runs`` holds ``(MixSpec, {test_resolution: loss})`` pairs. A row is
    Pareto-optimal when no other row is strictly smaller in both average
    data size and max loss.
    """
    if not runs:
        raise ValueError("pareto_report needs at least one run")
    rows = []
    for mix, losses in runs:
        losses = dict(losses)
        rows.append({"mix": mix.label(), "avg_pixels": average_pixels(mix, dims),
                     "losses": losses, "max_loss": max(losses.values())})
    rows.sort(key=lambda r: (r["avg_pixels"], r["max_loss"]))
    for r in rows:
        r["pareto"] = not any(o["avg_pixels"] < r["avg_pixels"] and o["max_loss"] < r["max_loss"] for o in rows)
    return rows


# report directory ----------------------------------------------------------------------------

PLOT_SCRIPT = '''"""Plot spectrum.csv files of a report directory (needs matplotlib)."""
import csv
import json
import sys
from pathlib import Path

import matplotlib.pyplot as plt


def main(root):
    root = Path(root)
    report = json.loads((root / "report.json").read_text())
    for name, grid in report["grids"].items():
        rows, cols = grid["rows"], grid["cols"]
        fig, axes = plt.subplots(len(rows), len(cols), figsize=(3 * len(cols), 2.5 * len(rows)), squeeze=False)
        for i, r in enumerate(rows):
            for j, c in enumerate(cols):
                path = root / "cells" / (name + r + "_" + c) / "spectrum.csv"
                ax = axes[i][j]
                if not path.exists():
                    ax.set_axis_off()
                    continue
                data = list(csv.DictReader(path.open()))
                k = [int(d["mode"]) for d in data]
                for col in ("label_energy", "pred_energy", "residual_energy"):
                    ax.semilogy(k, [max(float(d[col]), 1e-30) for d in data], label=col.split("_")[0])
                ax.set_title(f"train {r} / test {c}", fontsize=8)
        axes[0][0].legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(root / f"spectra{('_' + name.rstrip('_')) if name else ''}.png", dpi=120)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else ".")
'''


def _cell_dir(root: Path, prefix: str, row, col) -> Path:
    return root / "cells" / f"{prefix}{row}_{col}"


def write_report(out_dir, plan: ExperimentPlan, reports) -> Path:
    """Write ``report.json``, ``cells/<train>_<test>/`` and ``plot_spectra.py``.

    ``reports`` is a HeatmapReport or, for modes sweeps, ``{m: HeatmapReport}``
    (cell directories are then prefixed ``m<m>_``).
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    grids = {"": reports} if isinstance(reports, HeatmapReport) else {f"m{m}_": r for m, r in reports.items()}
    index = {"plan": plan.to_dict(), "grids": {}}
    for prefix, rep in grids.items():
        entry = rep.to_json()
        entry["cells_dir"] = {}
        for row in rep.rows:
            log = rep.logs.get(row)
            cols = ["epoch", "train_loss"] + (sorted(k for k in log[0] if k.startswith("val_loss@")) if log else [])
            for col in rep.cols:
                d = _cell_dir(root, prefix, row, col)
                d.mkdir(parents=True, exist_ok=True)
                if log:
                    (d / "log.csv").write_text(log_csv(log, cols))
                (d / "mse.txt").write_text(repr(rep.cell(row, col)) + "\n")
                spec = rep.spectra.get((row, col))
                if spec is not None:
                    (d / "spectrum.csv").write_text(spec.to_csv())
                entry["cells_dir"][f"{row}_{col}"] = str(d.relative_to(root))
        index["grids"][prefix] = entry
    (root / "report.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    (root / "plot_spectra.py").write_text(PLOT_SCRIPT)
    return root


def run_experiment(plan: ExperimentPlan, out_dir=None, n_jobs: int | None = None):
    """Run ``plan`` and, if ``out_dir`` is given, write the report directory."""
    n_jobs = n_jobs if n_jobs is not None else (os.cpu_count() or 1)
    reports = PROTOCOLS[plan.kind](plan, None, n_jobs)
    if out_dir is not None:
        write_report(out_dir, plan, reports)
    return reports


def spectrum_sanity(report: SpectrumReport) -> bool:
    """``residual <= 2 (pred + label)`` per bin (with round-off slack)."""
    bound = 2.0 * (report.pred_energy + report.label_energy)
    slack = 1e-12 * max(1.0, float(np.max(bound)))
    return bool(np.all(report.residual_energy <= bound + slack))
