"""Losses, multi-resolution training sets and the training loop."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .generators import BURGERS_NU, interior_mask
from .gridpack import GridPack
from .models import FnoSpec, ModelParams, fno_forward, predict, save_checkpoint
from .rng import substream
from .tensor import DiffTensor, ShapeError


class TrainingError(RuntimeError):
    pass


# losses ----------------------------------------------------------------------------------

def data_loss(pred, label) -> DiffTensor:
    """Mean squared error over batch and grid."""
    pred = T._wrap(pred)
    label = np.asarray(label.data if isinstance(label, DiffTensor) else label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match label shape {label.shape}")
    return T.mean(T.square(T.sub(pred, label)))


def _darcy_residual_op(pred: DiffTensor, a: np.ndarray, f: float = 1.0) -> DiffTensor:
    # r = M (A u - f) with A the solver's symmetric stencil and M the interior mask,
    # so the adjoint is A (M g)
    n = a.shape[-1]
    inv_h2 = float(n * n)
    mask = interior_mask(n)
    a = np.ascontiguousarray(a, dtype=np.float64)
    u = np.ascontiguousarray(pred.data)
    out = np.stack([kernels.darcy_stencil(a[b], u[b], inv_h2) for b in range(len(u))])
    out = (out - f) * mask

    def back(g):
        g = np.ascontiguousarray(g * mask)
        return (np.stack([kernels.darcy_stencil(a[b], g[b], inv_h2) for b in range(len(g))]),)

    return T.make_op("darcy_residual", out, (pred,), back)


def _spectral_derivatives(u: DiffTensor, n: int) -> tuple:
    k = 2.0 * np.pi * np.fft.rfftfreq(n, d=1.0 / n)
    ik = 1j * k
    if n % 2 == 0:
        ik[-1] = 0.0
    c = T.rfftn(u, axes=(-1,))
    ux = T.irfftn(T.mul(c, ik), s=(n,), axes=(-1,))
    uxx = T.irfftn(T.mul(c, -(k * k)), s=(n,), axes=(-1,))
    return ux, uxx


def physics_loss(pred, inputs, pde: str, *, T_final: float = 1.0, nu: float = BURGERS_NU) -> DiffTensor:
    """Mean squared PDE residual of ``pred`` given the model ``inputs``.

    Darcy: ``-div(a grad u) - 1`` on interior nodes with the solver's own
    stencil (``inputs`` is the coefficient ``a``).
    Burgers: ``(uT - u0)/T + (ubar^2/2)_x - (nu/pi) ubar_xx`` with
    ``ubar = (uT + u0)/2`` and pseudo-spectral derivatives (``inputs`` is
    ``u0``).
    """
    pred = T._wrap(pred)
    inputs = np.asarray(inputs, dtype=np.float64)
    if pred.shape != inputs.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match input shape {inputs.shape}")
    if pde == "darcy":
        if pred.ndim != 3:
            raise ShapeError(f"Darcy physics loss needs (batch, N, N), got {pred.shape}")
        n = pred.shape[-1]
        r = _darcy_residual_op(pred, inputs)
        return T.mul(T.sum(T.square(r)), 1.0 / (pred.shape[0] * (n - 1) ** 2))
    if pde == "burgers":
        if pred.ndim != 2:
            raise ShapeError(f"Burgers physics loss needs (batch, N), got {pred.shape}")
        n = pred.shape[-1]
        ubar = T.mul(T.add(pred, inputs), 0.5)
        flux_x, _ = _spectral_derivatives(T.mul(T.square(ubar), 0.5), n)
        _, ubar_xx = _spectral_derivatives(ubar, n)
        r = T.add(T.mul(T.sub(pred, inputs), 1.0 / T_final), T.sub(flux_x, T.mul(ubar_xx, nu / math.pi)))
        return T.mean(T.square(r))
    raise ValueError(f"no physics loss for pde {pde!r}")


def dual_loss(pred, label, inputs, pde: str, w: float, **pde_params) -> DiffTensor:
    """``(1 - w) * data + w * physics``; ``w = 0`` is the data loss itself."""
    if not 0.0 <= w < 1.0:
        raise ValueError(f"physics weight must satisfy 0 <= w < 1, got {w}")
    if w == 0.0:
        return data_loss(pred, label)
    d = data_loss(pred, label)
    p = physics_loss(pred, inputs, pde, **pde_params)
    return T.add(T.mul(d, 1.0 - w), T.mul(p, w))


# multi-resolution sets --------------------------------------------------------------------

@dataclass(frozen=True)
class MixSpec:
    """Proportions of the training set drawn at each resolution."""

    entries: tuple
    total_samples: int

    def __post_init__(self):
        entries = tuple((int(r), float(p)) for r, p in self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise ValueError("mix needs at least one resolution")
        res = [r for r, _ in entries]
        if len(set(res)) != len(res):
            raise ValueError(f"duplicate resolutions in mix: {res}")
        if any(p < 0 for _, p in entries):
            raise ValueError(f"negative proportion in mix: {entries}")
        total = math.fsum(p for _, p in entries)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mix proportions sum to {total}, expected 1")
        if self.total_samples < 0:
            raise ValueError(f"total_samples must be >= 0, got {self.total_samples}")

    @classmethod
    def single(cls, resolution: int, total: int) -> "MixSpec":
        return cls(((resolution, 1.0),), total)

    @classmethod
    def parse(cls, text: str, total: int) -> "MixSpec":
        """``"16:0.25,32:0.75"`` -> MixSpec; a bare ``"64"`` means all at 64."""
        entries = []
        for part in text.split(","):
            part = part.strip()
            if ":" in part:
                r, p = part.split(":")
                entries.append((int(r), float(p)))
            else:
                entries.append((int(part), 1.0))
        return cls(tuple(entries), total)

    @property
    def resolutions(self) -> list[int]:
        return [r for r, _ in self.entries]

    def label(self) -> str:
        return "+".join(f"{r}x{p:g}" for r, p in self.entries)

    def counts(self) -> dict[int, int]:
        return largest_remainder_counts(self.entries, self.total_samples)


def largest_remainder_counts(entries: Sequence[tuple], total: int) -> dict[int, int]:
    """Hamilton apportionment of ``total`` over ``(resolution, proportion)``.

    Proportions are read through their decimal repr so that ties are exact;
    ties in the remainder go to the lower resolution.
    """
    shares = [(int(r), Fraction(repr(float(p))) * total) for r, p in entries]
    counts = {r: int(math.floor(s)) for r, s in shares}
    left = total - sum(counts.values())
    order = sorted(shares, key=lambda rs: (-(rs[1] - math.floor(rs[1])), rs[0]))
    for r, _ in order[:left]:
        counts[r] += 1
    return counts


def average_pixels(mix: MixSpec, dims: int = 2) -> float:
    """Expected number of grid points per training sample."""
    return math.fsum(p * r ** dims for r, p in mix.entries)


@dataclass
class TrainingSet:
    """Resolution buckets of (inputs, labels); ``indices`` are source sample ids."""

    buckets: dict
    indices: dict
    dims: int
    pde: str | None = None
    pde_params: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(len(v) for v in self.indices.values()))

    @classmethod
    def from_pack(cls, pack: GridPack) -> "TrainingSet":
        idx = np.arange(pack.count)
        return cls({pack.resolution: (pack.inputs, pack.labels)}, {pack.resolution: idx},
                   pack.dims, pack.meta.get("pde"), dict(pack.meta.get("params") or {}))


def compose_mix(packs: Mapping[int, GridPack], mix: MixSpec, seed: int) -> TrainingSet:
    """Draw the mix from resolution-aligned packs without reusing a physical sample.

    Packs must share sample order (derived from one master). One permutation
    of the sample ids is cut into consecutive runs, one per resolution.
    """
    counts = mix.counts()
    missing = [r for r in counts if r not in packs]
    if missing:
        raise ValueError(f"no pack for resolution(s) {missing}")
    pool = min(packs[r].count for r in counts)
    if mix.total_samples > pool:
        short = min(counts, key=lambda r: packs[r].count)
        raise ValueError(f"resolution {short}: mix needs {mix.total_samples} distinct samples, pack has {pool}")
    perm = substream(seed, "mix").permutation(pool)
    buckets, indices = {}, {}
    start = 0
    first = packs[mix.resolutions[0]]
    for r, _ in mix.entries:
        take = np.sort(perm[start:start + counts[r]])
        start += counts[r]
        if len(take) == 0:
            continue
        indices[r] = take
        buckets[r] = (packs[r].inputs[take], packs[r].labels[take])
    return TrainingSet(buckets, indices, first.dims, first.meta.get("pde"),
                       dict(first.meta.get("params") or {}))


# training ---------------------------------------------------------------------------------

PRESETS = {
    ("darcy", "data"): dict(lr=1e-3, weight_decay=1e-5, batch_size=128, w=0.0),
    ("darcy", "data+physics"): dict(lr=1e-2, weight_decay=1e-5, batch_size=128, w=0.1),
    ("burgers", "data"): dict(lr=1e-3, weight_decay=1e-5, batch_size=64, w=0.0),
    ("burgers", "data+physics"): dict(lr=1e-3, weight_decay=1e-5, batch_size=64, w=0.1),
    ("navier_stokes", "data"): dict(lr=1e-2, weight_decay=1e-6, batch_size=4, w=0.0),
    ("navier_stokes", "data+physics"): dict(lr=1e-4, weight_decay=1e-5, batch_size=4, w=0.1),
}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 128
    epochs: int = 50
    loss: str = "data"
    w: float = 0.0
    seed: int = 0
    # forward/backward runs in chunks of at most this many grid points
    chunk_pixels: int = 1 << 17

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in ("data", "data+physics"):
            raise ValueError(f"loss must be 'data' or 'data+physics', got {self.loss!r}")
        if not 0.0 <= self.w < 1.0:
            raise ValueError(f"physics weight must satisfy 0 <= w < 1, got {self.w}")
        if self.loss == "data" and self.w != 0.0:
            raise ValueError("w > 0 requires loss 'data+physics'")
        if self.loss == "data+physics" and self.w == 0.0:
            raise ValueError("loss 'data+physics' needs w > 0")

    @classmethod
    def preset(cls, pde: str, loss: str = "data", **overrides) -> "TrainConfig":
        try:
            base = dict(PRESETS[(pde, loss)])
        except KeyError:
            raise ValueError(f"no preset for pde={pde!r} loss={loss!r}") from None
        base.update(overrides)
        return cls(loss=loss, **base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    log: list
    val_resolutions: list


def _pde_kwargs(tset: TrainingSet) -> dict:
    if tset.pde == "burgers":
        p = tset.pde_params
        return {"T_final": float(p.get("T", 1.0)), "nu": float(p.get("nu", BURGERS_NU))}
    return {}


def mse(pred: np.ndarray, label: np.ndarray) -> float:
    return float(np.mean((pred - label) ** 2))


def evaluate(params, spec: FnoSpec, inputs: np.ndarray, labels: np.ndarray, chunk_pixels: int = 1 << 17) -> float:
    n = inputs.shape[-1]
    chunk = max(1, chunk_pixels // n ** spec.dims)
    return mse(predict(params, spec, inputs, chunk), labels)


def train(params: ModelParams, spec: FnoSpec, tset: TrainingSet, config: TrainConfig,
          val_sets: Mapping[int, tuple] | None = None, progress=None) -> TrainResult:
    """Adam training over resolution-homogeneous batches.

    Each epoch shuffles every bucket, cuts it into batches and visits all
    batches in a shuffled order, so buckets are sampled in proportion to
    their size. Large batches are processed in chunks whose gradients are
    summed with weights ``len(chunk) / len(batch)``.
    """
    if tset.total == 0:
        raise TrainingError("empty training set")
    if tset.dims != spec.dims:
        raise TrainingError(f"training data is {tset.dims}D, model is {spec.dims}D")
    val_sets = dict(val_sets or {})
    val_res = sorted(val_sets)
    pde_kw = _pde_kwargs(tset)
    if config.w > 0 and tset.pde not in ("darcy", "burgers"):
        raise TrainingError(f"no physics loss for pde {tset.pde!r}")
    log = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        batches = []
        for r in sorted(tset.buckets):
            n_r = len(tset.indices[r])
            order = substream(config.seed, "batches", epoch, r).permutation(n_r)
            for s in range(0, n_r, config.batch_size):
                batches.append((r, order[s:s + config.batch_size]))
        visit = substream(config.seed, "visit", epoch).permutation(len(batches))
        loss_sum, seen = 0.0, 0
        for bi in visit:
            r, sel = batches[bi]
            inputs, labels = tset.buckets[r]
            step += 1
            params.zero_grad()
            chunk = max(1, config.chunk_pixels // r ** spec.dims)
            batch_loss = 0.0
            for c in range(0, len(sel), chunk):
                part = sel[c:c + chunk]
                x, y = inputs[part], labels[part]
                loss = dual_loss(fno_forward(params, spec, x), y, x, tset.pde or "", config.w, **pde_kw)
                frac = len(part) / len(sel)
                T.backward(T.mul(loss, frac))
                batch_loss += frac * loss.item()
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step} (resolution {r})")
            T.adam_step(params, config.lr, config.weight_decay, t=step)
            loss_sum += batch_loss * len(sel)
            seen += len(sel)
        row = {"epoch": epoch, "train_loss": loss_sum / seen}
        for r in val_res:
            row[f"val_loss@{r}"] = evaluate(params, spec, *val_sets[r], config.chunk_pixels)
        row["seconds"] = time.perf_counter() - t0
        log.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(params, log, val_res)


# run directories --------------------------------------------------------------------------

def log_csv(log: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in log:
        w.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in columns])
    return buf.getvalue()


def write_run(run_dir, result: TrainResult, spec: FnoSpec, config: TrainConfig,
              mix: MixSpec | None = None, extra: dict | None = None) -> Path:
    """config.json, log.csv, timings.csv and checkpoint/ under ``run_dir``.

    Wall-clock seconds go to timings.csv so that log.csv is a pure function
    of the seed.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = {"train": config.to_dict(), "model": spec.to_dict(),
           "mix": {"entries": [list(e) for e in mix.entries], "total_samples": mix.total_samples} if mix else None}
    cfg.update(extra or {})
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    cols = ["epoch", "train_loss"] + [f"val_loss@{r}" for r in result.val_resolutions]
    (run_dir / "log.csv").write_text(log_csv(result.log, cols))
    (run_dir / "timings.csv").write_text(log_csv(result.log, ["epoch", "seconds"]))
    save_checkpoint(run_dir / "checkpoint", result.params, spec, {"seed": config.seed, "run": str(run_dir)})
    return run_dir
