"""Fourier neural operator and a band-limiting wrapper around it.

Activations are channels-last: ``(batch, N, channels)`` in 1D and
``(batch, N, N, channels)`` in 2D. One parameter set evaluates at any grid
size; only the number of Fourier modes that fit on the grid changes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .rng import substream
from .spectral import resample_values
from .tensor import DiffTensor, ParamSet, ShapeError


@dataclass(frozen=True)
class FnoSpec:
    """Architecture of an FNO.

    ``coords`` appends the grid coordinates ``i / N`` as extra input
    channels. ``bypass`` and ``activation`` exist so the linear spectral
    path can be isolated.
    """

    dims: int = 2
    width: int = 32
    layers: int = 4
    max_modes: int = 8
    lift_dim: int = 128
    proj_dim: int = 128
    in_channels: int = 1
    out_channels: int = 1
    activation: str = "gelu"
    bypass: bool = True
    coords: bool = True

    def __post_init__(self):
        if self.dims not in (1, 2):
            raise ValueError(f"dims must be 1 or 2, got {self.dims}")
        if self.max_modes < 1:
            raise ValueError(f"max_modes must be >= 1, got {self.max_modes}")
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if min(self.width, self.lift_dim, self.proj_dim, self.in_channels, self.out_channels) < 1:
            raise ValueError("channel widths must be >= 1")
        if self.activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def lift_in(self) -> int:
        return self.in_channels + (self.dims if self.coords else 0)

    @classmethod
    def for_resolution(cls, resolution: int, **kw) -> "FnoSpec":
        """Spec whose mode cap covers the full band of ``resolution``."""
        kw.setdefault("max_modes", resolution // 2)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


ModelParams = ParamSet


def _spectral_shape(spec: FnoSpec) -> tuple:
    m = spec.max_modes
    if spec.dims == 1:
        return (spec.width, spec.width, m)
    return (spec.width, spec.width, 2 * m - 1, m)


def param_shapes(spec: FnoSpec) -> dict:
    shapes = {
        "lift0.w": (spec.lift_in, spec.lift_dim),
        "lift0.b": (spec.lift_dim,),
        "lift1.w": (spec.lift_dim, spec.width),
        "lift1.b": (spec.width,),
    }
    for i in range(spec.layers):
        shapes[f"layer{i}.R"] = _spectral_shape(spec)
        if spec.bypass:
            shapes[f"layer{i}.W"] = (spec.width, spec.width)
            shapes[f"layer{i}.b"] = (spec.width,)
    shapes.update({
        "proj0.w": (spec.width, spec.proj_dim),
        "proj0.b": (spec.proj_dim,),
        "proj1.w": (spec.proj_dim, spec.out_channels),
        "proj1.b": (spec.out_channels,),
    })
    return shapes


def init_params(spec: FnoSpec, seed: int = 0) -> ModelParams:
    """Complex Gaussian spectral weights scaled by ``1 / width**2``; uniform fan-in init elsewhere.

    Each tensor draws from its own named substream, so adding a layer does
    not change the others.
    """
    shapes = param_shapes(spec)
    params = ModelParams()
    for name, shape in shapes.items():
        rng = substream(seed, "init:" + name)
        if name.endswith(".R"):
            scale = 1.0 / (spec.width * spec.width)
            params[name] = scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        else:
            owner = name.rsplit(".", 1)[0]
            fan_in = (shapes.get(owner + ".w") or shapes[owner + ".W"])[0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# layers ---------------------------------------------------------------------------------

def retained_rows(n: int, m: int) -> np.ndarray:
    """Indices along a full FFT axis with ``|k| < min(m, n/2)``."""
    mm = min(m, n // 2)
    return np.concatenate([np.arange(mm), np.arange(n - mm + 1, n)])


def spectral_conv(x, R, m: int) -> DiffTensor:
    """Multiply the lowest ``min(m, N/2)`` modes per axis by ``R``; drop the rest.

    ``x`` is channels-last; ``R`` is ``(in, out, m)`` in 1D and
    ``(in, out, 2m - 1, m)`` in 2D, where rows ``[0, m)`` act on
    wavenumbers ``0..m-1`` and rows ``[m, 2m - 1)`` on ``-(m-1)..-1`` of the
    full axis.
    """
    x, R = T._wrap(x), T._wrap(R)
    if m < 1:
        raise ValueError(f"mode count must be >= 1, got {m}")
    dims = x.ndim - 2
    if dims not in (1, 2) or R.ndim != dims + 2:
        raise ShapeError(f"spectral_conv: input {x.shape} with weights {R.shape}")
    if x.shape[-1] != R.shape[0]:
        raise ShapeError(f"spectral_conv: {x.shape[-1]} input channels, weights expect {R.shape[0]}")
    if R.shape[-1] < m:
        raise ShapeError(f"spectral_conv: weights hold {R.shape[-1]} modes, asked for {m}")
    n = x.shape[1]
    batch, c_out = x.shape[0], R.shape[1]
    mm = min(m, n // 2)
    if mm == 0:
        raise ShapeError(f"spectral_conv: resolution {n} holds no modes")
    if dims == 1:
        coeffs = T.rfftn(x, axes=(1,))
        kept = T.getitem(coeffs, (slice(None), slice(0, mm), slice(None)))
        w = T.transpose(T.getitem(R, (slice(None), slice(None), slice(0, mm))), (2, 0, 1))
        mixed = T.mode_contract(kept, w)
        full = T.embed(mixed, (batch, n // 2 + 1, c_out), (slice(None), slice(0, mm), slice(None)))
        return T.irfftn(full, s=(n,), axes=(1,))

    rows = retained_rows(n, m)
    cols = np.arange(mm)
    m_cap = R.shape[-1]
    r_rows = np.concatenate([np.arange(mm), np.arange(2 * m_cap - mm, 2 * m_cap - 1)])
    coeffs = T.rfftn(x, axes=(1, 2))
    idx = (slice(None), rows[:, None], cols[None, :], slice(None))
    nk = rows.size * mm
    kept = T.reshape(T.getitem(coeffs, idx), (batch, nk, x.shape[-1]))
    w = T.getitem(R, (slice(None), slice(None), r_rows[:, None], cols[None, :]))
    w = T.reshape(T.transpose(w, (2, 3, 0, 1)), (nk, R.shape[0], c_out))
    mixed = T.reshape(T.mode_contract(kept, w), (batch, rows.size, mm, c_out))
    full = T.embed(mixed, (batch, n, n // 2 + 1, c_out), idx)
    return T.irfftn(full, s=(n, n), axes=(1, 2))


def _act(spec: FnoSpec, x: DiffTensor) -> DiffTensor:
    return T.gelu(x) if spec.activation == "gelu" else x


def _affine(x, params, prefix, weight="w") -> DiffTensor:
    return T.add(T.matmul(x, params[f"{prefix}.{weight}"]), params[prefix + ".b"])


def grid_coords(n: int, dims: int) -> np.ndarray:
    x = np.arange(n) / n
    if dims == 1:
        return x[:, None]
    gx, gy = np.meshgrid(x, x, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def _prepare_input(spec: FnoSpec, x) -> DiffTensor:
    x = T._wrap(x)
    if x.ndim == spec.dims + 1:
        x = T.reshape(x, x.shape + (1,))
    if x.ndim != spec.dims + 2:
        raise ShapeError(f"expected a batch of {spec.dims}D fields, got shape {x.shape}")
    if x.shape[-1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, model expects {spec.in_channels}")
    n = x.shape[1]
    if n < 2 or any(s != n for s in x.shape[1:-1]):
        raise ShapeError(f"fields must be square with resolution >= 2, got {x.shape[1:-1]}")
    if spec.coords:
        grid = np.broadcast_to(grid_coords(n, spec.dims), (x.shape[0],) + x.shape[1:-1] + (spec.dims,))
        x = T.concat([x, grid], axis=-1)
    return x


def fno_forward(params: Mapping[str, DiffTensor], spec: FnoSpec, x) -> DiffTensor:
    """Lift, ``layers`` spectral blocks, project.

    ``x`` is ``(batch, N[, N])`` or channels-last. The output has the input
    grid; a single output channel is squeezed away.
    """
    h = _prepare_input(spec, x)
    h = _affine(T.gelu(_affine(h, params, "lift0")), params, "lift1")
    for i in range(spec.layers):
        y = spectral_conv(h, params[f"layer{i}.R"], spec.max_modes)
        if spec.bypass:
            y = T.add(y, _affine(h, params, f"layer{i}", "W"))
        h = _act(spec, y) if i < spec.layers - 1 else y
    out = _affine(T.gelu(_affine(h, params, "proj0")), params, "proj1")
    if spec.out_channels == 1:
        out = T.reshape(out, out.shape[:-1])
    return out


def frozen(params: Mapping[str, DiffTensor]) -> dict:
    """Views of ``params`` that record no graph (inference)."""
    return {k: DiffTensor(v.data) for k, v in params.items()}


def predict(params: Mapping[str, DiffTensor], spec: FnoSpec, values: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Inference in chunks of ``chunk`` samples; returns a numpy array."""
    values = np.asarray(values, dtype=np.float64)
    fixed = frozen(params)
    outs = [fno_forward(fixed, spec, values[i:i + chunk]).data for i in range(0, len(values), chunk)]
    return np.concatenate(outs, axis=0)


# band-limited inference --------------------------------------------------------------

@dataclass
class BandLimitWrapper:
    """Evaluate ``params`` only at ``anchor_resolution``, resampling around it."""

    params: ModelParams
    spec: FnoSpec
    anchor_resolution: int

    def __post_init__(self):
        if self.anchor_resolution < 2:
            raise ValueError(f"anchor resolution must be >= 2, got {self.anchor_resolution}")


def bandlimited_forward(wrapper: BandLimitWrapper, values: np.ndarray, chunk: int = 32) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    dims = wrapper.spec.dims
    n = values.shape[-1]
    inner = resample_values(values, wrapper.anchor_resolution, dims)
    out = predict(wrapper.params, wrapper.spec, inner, chunk)
    return resample_values(out, n, dims)


# checkpoints ---------------------------------------------------------------------------

def save_checkpoint(directory, params: ModelParams, spec: FnoSpec, meta: dict | None = None) -> Path:
    """``manifest.json`` plus one little-endian float64 file per parameter.

    Complex tensors are stored as interleaved real/imaginary pairs.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in params.items():
        fname = name + ".f64"
        arr = np.ascontiguousarray(p.data)
        raw = arr.view(np.float64) if np.iscomplexobj(arr) else arr
        (directory / fname).write_bytes(raw.astype("<f8").tobytes())
        entries.append({"name": name, "file": fname, "shape": list(arr.shape),
                        "complex": bool(np.iscomplexobj(arr))})
    manifest = {"spec": spec.to_dict(), "params": entries, "meta": meta or {}}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory) -> tuple[ModelParams, FnoSpec, dict]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {path}")
    manifest = json.loads(path.read_text())
    spec = FnoSpec(**manifest["spec"])
    params = ModelParams()
    for e in manifest["params"]:
        raw = np.frombuffer((directory / e["file"]).read_bytes(), dtype="<f8").astype(np.float64)
        arr = raw.view(np.complex128) if e["complex"] else raw
        params[e["name"]] = arr.reshape(e["shape"])
    expected = param_shapes(spec)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise ValueError(f"checkpoint tensors do not match the stored spec in {directory}")
    return params, spec, manifest.get("meta", {})
