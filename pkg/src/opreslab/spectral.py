"""Fourier-domain utilities: band limits, spectral resampling, energy spectra.

Fields live on uniform periodic grids over the unit interval or square: node
``i`` sits at ``x = i / N``. Wavenumbers are integers (cycles per unit
length), so a low-pass limit ``L`` keeps ``|k| <= L`` on every axis.

Energy spectra use Fourier-series coefficients ``fft(u) / N**dims``. With
that scaling the spectrum of a field does not depend on the grid it is
sampled on, and the bins sum to the mean of ``u**2``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


@dataclass
class GridField:
    """One sample of a field on a regular 1D or 2D grid."""

    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim not in (1, 2):
            raise ValueError(f"GridField must be 1D or 2D, got shape {self.values.shape}")
        if self.values.ndim == 2 and self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"2D GridField must be square, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("GridField values must be finite")

    @property
    def dims(self) -> int:
        return self.values.ndim

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def with_values(self, values, **meta) -> "GridField":
        return replace(self, values=values, meta={**self.meta, **meta})


def alias_of(n: int, r: int) -> int:
    """Frequency at which content of frequency ``n`` appears when sampled at rate ``r``.

    ``n mod r`` exactly at ``r / 2`` is mapped to ``r / 2`` (the Nyquist bin
    folds onto itself).
    """
    if r < 2:
        raise ValueError(f"sampling rate must be >= 2, got {r}")
    if n < 0:
        raise ValueError(f"frequency must be >= 0, got {n}")
    m = n % r
    if 2 * m <= r:
        return m
    return r - m


def wavenumbers(n: int) -> np.ndarray:
    """Signed integer wavenumbers in FFT order (Nyquist reported as ``-n/2``)."""
    return np.fft.fftfreq(n, d=1.0 / n).round().astype(np.int64)


def _spatial_axes(ndim: int, dims: int) -> tuple:
    if dims not in (1, 2) or ndim < dims:
        raise ValueError(f"array with {ndim} axes cannot hold {dims}D fields")
    return tuple(range(ndim - dims, ndim))


# low-pass ---------------------------------------------------------------------------

def lowpass_values(values: np.ndarray, limit: int, dims: int) -> np.ndarray:
    """Zero every Fourier coefficient with any axis ``|k| > limit``.

    Works on a batch: the trailing ``dims`` axes are spatial.
    """
    values = np.asarray(values, dtype=np.float64)
    axes = _spatial_axes(values.ndim, dims)
    n = values.shape[-1]
    if limit < 0 or 2 * limit > n:
        raise ValueError(f"low-pass limit {limit} outside [0, {n // 2}] for resolution {n}")
    keep = np.abs(wavenumbers(n)) <= limit
    if keep.all():
        return values.copy()
    coeffs = np.fft.fftn(values, axes=axes)
    for ax in axes:
        shape = [1] * values.ndim
        shape[ax] = n
        coeffs = coeffs * keep.reshape(shape)
    return np.fft.ifftn(coeffs, axes=axes).real


def lowpass(f: GridField, limit: int) -> GridField:
    """Band-limit a field to per-axis wavenumber ``limit``.

    A field whose metadata already records a limit no larger than ``limit``
    is returned as an unchanged copy, so repeated filtering is exact.
    """
    prior = f.meta.get("lowpass_limit")
    if prior is not None and prior <= limit and 2 * limit <= f.resolution:
        return f.with_values(f.values.copy())
    return f.with_values(lowpass_values(f.values, limit, f.dims), lowpass_limit=int(limit))


# resampling ---------------------------------------------------------------------------

def _resample_axis(coeffs: np.ndarray, axis: int, n_new: int) -> np.ndarray:
    c = np.moveaxis(coeffs, axis, -1)
    n_old = c.shape[-1]
    out = np.zeros(c.shape[:-1] + (n_new,), dtype=np.complex128)
    if n_new < n_old:
        h = n_new // 2
        if n_new % 2 == 0:
            out[..., :h] = c[..., :h]
            if h > 1:
                out[..., n_new - h + 1:] = c[..., n_old - h + 1:]
            # +h and -h both land on the new Nyquist bin
            out[..., h] = c[..., h] + c[..., n_old - h]
        else:
            out[..., :h + 1] = c[..., :h + 1]
            out[..., n_new - h:] = c[..., n_old - h:]
    else:
        h = n_old // 2
        if n_old % 2 == 0:
            out[..., :h] = c[..., :h]
            if h > 1:
                out[..., n_new - h + 1:] = c[..., n_old - h + 1:]
            out[..., h] = 0.5 * c[..., h]
            out[..., n_new - h] += 0.5 * c[..., h]
        else:
            out[..., :h + 1] = c[..., :h + 1]
            out[..., n_new - h:] = c[..., n_old - h:]
    out *= n_new / n_old
    return np.moveaxis(out, -1, axis)


def resample_values(values: np.ndarray, new_resolution: int, dims: int) -> np.ndarray:
    """Spectral resampling of a batch of fields to ``new_resolution`` per axis.

    Downsampling truncates (folding the two half-Nyquist modes together),
    upsampling zero-pads (splitting the old Nyquist mode evenly). Point
    values keep their amplitude.
    """
    values = np.asarray(values, dtype=np.float64)
    if new_resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {new_resolution}")
    axes = _spatial_axes(values.ndim, dims)
    if all(values.shape[ax] == new_resolution for ax in axes):
        return values.copy()
    out = values
    for ax in axes:
        coeffs = np.fft.fft(out, axis=ax)
        out = np.fft.ifft(_resample_axis(coeffs, ax, new_resolution), axis=ax).real
    return out


def resample(f: GridField, new_resolution: int) -> GridField:
    return f.with_values(resample_values(f.values, new_resolution, f.dims))


# energy spectra -----------------------------------------------------------------------

# bins holding less than this fraction of the total label energy count as empty;
# FFT round-off leaves ~1e-32 relative energy in bins that are exactly zero
EMPTY_BIN_FRACTION = 1e-20

_BIN_CACHE: dict = {}


def _bin_matrix(n: int, dims: int) -> np.ndarray:
    key = (n, dims)
    if key not in _BIN_CACHE:
        k = wavenumbers(n)
        if dims == 1:
            shell = np.abs(k)
        else:
            shell = np.rint(np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)).astype(np.int64).ravel()
        # corner shells beyond Nyquist are folded into the last bin
        shell = np.minimum(shell, n // 2)
        onehot = np.zeros((shell.size, n // 2 + 1))
        onehot[np.arange(shell.size), shell] = 1.0
        _BIN_CACHE[key] = onehot
    return _BIN_CACHE[key]


def energy_spectra(values: np.ndarray, dims: int) -> np.ndarray:
    """Per-sample binned energy spectra, shape ``batch + (N // 2 + 1,)``.

    1D bins are ``|k|``; 2D bins are round-to-nearest radial shells over
    the full (both-sign) spectrum, which counts each conjugate pair once at
    doubled weight. Energy in shells past ``N / 2`` goes into the last bin.
    """
    values = np.asarray(values, dtype=np.float64)
    axes = _spatial_axes(values.ndim, dims)
    n = values.shape[-1]
    coeffs = np.fft.fftn(values, axes=axes, norm="forward")
    power = (coeffs.real ** 2 + coeffs.imag ** 2).reshape(values.shape[:values.ndim - dims] + (-1,))
    return power @ _bin_matrix(n, dims)


def energy_spectrum(f: GridField) -> np.ndarray:
    return energy_spectra(f.values, f.dims)


def energy_above(values: np.ndarray, limit: int, dims: int) -> float:
    """Fraction of total energy in modes with any axis ``|k| > limit``.

    This is the square band that :func:`lowpass_values` and resampling
    respect; radial shells would also count the band's corners (up to
    ``sqrt(2) * limit``).
    """
    values = np.asarray(values, dtype=np.float64)
    axes = _spatial_axes(values.ndim, dims)
    n = values.shape[-1]
    power = np.abs(np.fft.fftn(values, axes=axes, norm="forward")) ** 2
    k = np.abs(wavenumbers(n))
    outside = k > limit
    if dims == 2:
        outside = outside[:, None] | outside[None, :]
    total = power.sum()
    return float(power[..., outside].sum() / total) if total > 0 else 0.0


@dataclass
class SpectrumReport:
    """Dataset-averaged label, prediction and residual spectra."""

    modes: np.ndarray
    label_energy: np.ndarray
    pred_energy: np.ndarray
    residual_energy: np.ndarray
    normalized_residual: np.ndarray
    n_samples: int

    def band_sum(self, lo: int, hi: int) -> float:
        """Sum of the normalized residual over bins ``lo..hi`` that exist and are defined."""
        sel = (self.modes >= lo) & (self.modes <= hi)
        vals = self.normalized_residual[sel]
        return float(np.sum(vals[np.isfinite(vals)]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "label_energy", "pred_energy", "residual_energy", "normalized_residual"])
        for row in zip(self.modes, self.label_energy, self.pred_energy,
                       self.residual_energy, self.normalized_residual):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n_samples: int = 0) -> "SpectrumReport":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        cols = list(zip(*rows))
        return cls(
            modes=np.array([int(v) for v in cols[0]]),
            label_energy=np.array([float(v) for v in cols[1]]),
            pred_energy=np.array([float(v) for v in cols[2]]),
            residual_energy=np.array([float(v) for v in cols[3]]),
            normalized_residual=np.array([float(v) for v in cols[4]]),
            n_samples=n_samples,
        )


def report_from_arrays(preds: np.ndarray, labels: np.ndarray, dims: int) -> SpectrumReport:
    """:func:`spectrum_report` for stacked arrays ``(count, N[, N])``."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"prediction batch {preds.shape} does not match label batch {labels.shape}")
    if preds.ndim != dims + 1 or preds.shape[0] == 0:
        raise ValueError(f"expected a non-empty batch of {dims}D fields, got shape {preds.shape}")
    lab = energy_spectra(labels, dims).mean(axis=0)
    pred = energy_spectra(preds, dims).mean(axis=0)
    res = energy_spectra(preds - labels, dims).mean(axis=0)
    norm = np.full_like(lab, np.nan)
    pos = lab > EMPTY_BIN_FRACTION * lab.sum()
    norm[pos] = res[pos] / lab[pos]
    return SpectrumReport(np.arange(lab.size), lab, pred, res, norm, preds.shape[0])


def spectrum_report(preds: Sequence[GridField], labels: Sequence[GridField]) -> SpectrumReport:
    """Average spectra of labels, predictions and residuals over a test set.

    Bins with no label energy (below ``EMPTY_BIN_FRACTION`` of the total)
    report the normalized residual as NaN.
    """
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions but {len(labels)} labels")
    if not preds:
        raise ValueError("empty test set")
    for i, (p, y) in enumerate(zip(preds, labels)):
        if p.values.shape != y.values.shape:
            raise ValueError(f"pair {i}: prediction shape {p.values.shape} vs label shape {y.values.shape}")
    shapes = {p.values.shape for p in preds}
    if len(shapes) > 1:
        raise ValueError(f"mixed resolutions in one report: {sorted(shapes)}")
    dims = preds[0].dims
    return report_from_arrays(np.stack([p.values for p in preds]),
                              np.stack([y.values for y in labels]), dims)
