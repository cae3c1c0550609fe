"""Synthetic Darcy and Burgers datasets at a master resolution.

Darcy: ``-div(a grad u) = 1`` on the unit square with ``u = 0`` on the
boundary. Nodes sit at ``(i/N, j/N)``; row 0 and column 0 are the boundary
(``x = 1`` is the same storage row as ``x = 0``), so every field is a
periodic array and the spectral tools apply unchanged.

Burgers: ``u_t + (u^2/2)_x = (nu/pi) u_xx`` on the periodic unit interval,
mapping ``u(x, 0)`` to ``u(x, T)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .gridpack import GridPack
from .rng import substream
from .spectral import GridField, lowpass_values, resample_values

DARCY_LEVELS = (3.0, 12.0)
BURGERS_NU = 0.001


class SolverError(RuntimeError):
    """A PDE solve failed (no convergence or a non-finite state)."""


@dataclass
class DarcySample:
    a: GridField
    u: GridField
    f: float = 1.0


@dataclass
class BurgersSample:
    u0: GridField
    uT: GridField
    nu: float = BURGERS_NU


def _map(fn, args, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, args))
    return [fn(a) for a in args]


# Darcy ---------------------------------------------------------------------------------

def interior_mask(n: int) -> np.ndarray:
    mask = np.ones((n, n))
    mask[0, :] = 0.0
    mask[:, 0] = 0.0
    return mask


def darcy_coefficient(rng: np.random.Generator, n: int, flip: bool = False) -> np.ndarray:
    """Two-level coefficient: 12 where a smoothed Gaussian field is >= 0, else 3.

    The Gaussian field has covariance ``(-Laplacian + 9)^-2``; ``flip``
    swaps the two levels.
    """
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / n)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    noise = rng.standard_normal((n, n))
    psi = np.fft.ifft2(np.fft.fft2(noise) / (k2 + 9.0)).real
    hi, lo = DARCY_LEVELS[1], DARCY_LEVELS[0]
    if flip:
        hi, lo = lo, hi
    return np.where(psi >= 0.0, hi, lo)


def darcy_operator(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Apply the solver's 5-point stencil, zero on boundary nodes."""
    n = a.shape[0]
    return kernels.darcy_stencil(a, u, float(n * n)) * interior_mask(n)


def darcy_residual(a: np.ndarray, u: np.ndarray, f: float = 1.0) -> float:
    """``||-div(a grad u) - f|| / ||f||`` over interior nodes."""
    n = a.shape[0]
    mask = interior_mask(n)
    r = (darcy_operator(a, u) - f) * mask
    return float(np.linalg.norm(r) / np.linalg.norm(f * mask))


def solve_darcy(a: np.ndarray, f: float = 1.0, tol: float = 1e-8, maxiter: int | None = None) -> np.ndarray:
    """Solve for ``u`` with Jacobi-preconditioned CG to relative residual ``tol``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    n = a.shape[0]
    if np.any(a <= 0):
        raise ValueError("Darcy coefficient must be positive everywhere")
    maxiter = maxiter if maxiter is not None else max(2000, 20 * n)
    b = np.full((n, n), float(f))
    u, iters, rel = kernels.darcy_pcg(a, b, float(n * n), tol, maxiter)
    if not rel <= tol:
        raise SolverError(f"CG did not converge: relative residual {rel:.3e} after {iters} iterations")
    return u


def _darcy_one(job) -> tuple:
    seed, i, n, flip, coeff, tol = job
    a = coeff if coeff is not None else darcy_coefficient(substream(seed, "darcy", i), n, flip)
    return a, solve_darcy(a, 1.0, tol)


def gen_darcy(n: int, master_res: int = 128, seed: int = 0, *, flip: bool = False,
              coeff: np.ndarray | None = None, tol: float = 1e-8, workers: int = 1,
              start: int = 0) -> list[DarcySample]:
    """Draw ``n`` coefficient fields and solve for each.

    Sample ``i`` depends only on ``(seed, start + i)``. ``coeff`` replaces
    the random coefficient (used to check the solver on a known problem).
    """
    if master_res < 16:
        raise ValueError(f"Darcy master resolution must be >= 16, got {master_res}")
    if coeff is not None:
        coeff = np.asarray(coeff, dtype=np.float64)
        if coeff.shape != (master_res, master_res):
            raise ValueError(f"coefficient shape {coeff.shape} != ({master_res}, {master_res})")
    jobs = [(seed, start + i, master_res, flip, coeff, tol) for i in range(n)]
    out = []
    for a, u in _map(_darcy_one, jobs, workers):
        out.append(DarcySample(GridField(a, {"pde": "darcy"}), GridField(u, {"pde": "darcy"})))
    return out


def darcy_pack(samples: Sequence[DarcySample], seed: int, flip: bool = False) -> GridPack:
    return GridPack(
        np.stack([s.a.values for s in samples]),
        np.stack([s.u.values for s in samples]),
        {
            "pde": "darcy",
            "params": {"a_levels": list(DARCY_LEVELS), "f": 1.0, "flip": flip,
                       "coefficient_law": "thresholded GRF, covariance (-Lap+9)^-2"},
            "lowpass_limit": None,
            "seed": seed,
            "lineage": {"master": None, "derivation": "generated"},
        },
    )


# Burgers ------------------------------------------------------------------------------

def burgers_initial(rng: np.random.Generator, n: int, kmax: int = 8) -> np.ndarray:
    """Random sinusoids with ``1 <= k <= kmax`` and Gaussian amplitudes scaled by ``1/k^2``."""
    x = np.arange(n) / n
    u = np.zeros(n)
    for k in range(1, kmax + 1):
        a, b = rng.standard_normal(2) / k**2
        u += a * np.cos(2 * np.pi * k * x) + b * np.sin(2 * np.pi * k * x)
    return u


def solve_burgers(u0: np.ndarray, T: float = 1.0, nu: float = BURGERS_NU, *, advection: bool = True,
                  cfl: float = 0.4, dt: float | None = None) -> np.ndarray:
    """Pseudo-spectral integrating-factor RK4 with 2/3-rule dealiasing.

    The diffusion term is integrated exactly; the step is bounded by
    ``cfl * dx / max|u0|`` (Burgers never raises ``max|u|``) unless ``dt``
    is given. The step count is rounded up so the run ends exactly at ``T``.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    n = u0.size
    if T <= 0:
        raise ValueError(f"terminal time must be positive, got {T}")
    k = 2.0 * np.pi * np.fft.rfftfreq(n, d=1.0 / n)
    ik = 1j * k
    if n % 2 == 0:
        ik[-1] = 0.0
    keep = np.abs(np.fft.rfftfreq(n, d=1.0 / n)) <= n / 3.0
    lin = -(nu / math.pi) * k * k

    umax = float(np.max(np.abs(u0)))
    if dt is None:
        dt = cfl * (1.0 / n) / umax if (advection and umax > 0) else T
    steps = max(1, int(math.ceil(T / dt - 1e-12)))
    h = T / steps
    e_half = np.exp(lin * h / 2)
    e_full = e_half * e_half

    def nonlinear(v):
        if not advection:
            return np.zeros_like(v)
        u = np.fft.irfft(v * keep, n=n)
        return -ik * keep * np.fft.rfft(0.5 * u * u)

    v = np.fft.rfft(u0)
    for step in range(steps):
        k1 = h * nonlinear(v)
        k2 = h * nonlinear(e_half * (v + 0.5 * k1))
        k3 = h * nonlinear(e_half * v + 0.5 * k2)
        k4 = h * nonlinear(e_full * v + e_half * k3)
        v = e_full * v + (e_full * k1 + 2.0 * e_half * (k2 + k3) + k4) / 6.0
        if not np.all(np.isfinite(v)):
            raise SolverError(f"non-finite Burgers state at step {step + 1} of {steps}")
    return np.fft.irfft(v, n=n)


def _burgers_one(job):
    seed, i, n, T, nu, cfl = job
    u0 = burgers_initial(substream(seed, "burgers", i), n)
    return u0, solve_burgers(u0, T, nu, cfl=cfl)


def gen_burgers(n: int, master_res: int = 1024, T: float = 1.0, seed: int = 0, *,
                nu: float = BURGERS_NU, cfl: float = 0.4, workers: int = 1,
                start: int = 0) -> list[BurgersSample]:
    if master_res < 128:
        raise ValueError(f"Burgers master resolution must be >= 128, got {master_res}")
    if T <= 0:
        raise ValueError(f"terminal time must be positive, got {T}")
    jobs = [(seed, start + i, master_res, T, nu, cfl) for i in range(n)]
    return [
        BurgersSample(GridField(u0, {"pde": "burgers"}), GridField(uT, {"pde": "burgers"}), nu)
        for u0, uT in _map(_burgers_one, jobs, workers)
    ]


def burgers_pack(samples: Sequence[BurgersSample], seed: int, T: float = 1.0) -> GridPack:
    return GridPack(
        np.stack([s.u0.values for s in samples]),
        np.stack([s.uT.values for s in samples]),
        {
            "pde": "burgers",
            "params": {"nu": samples[0].nu if samples else BURGERS_NU, "T": T,
                       "pairing": "u(x,0) -> u(x,T)"},
            "lowpass_limit": None,
            "seed": seed,
            "lineage": {"master": None, "derivation": "generated"},
        },
    )


# derived resolutions ---------------------------------------------------------------------

def derive_resolutions(pack: GridPack, resolutions: Sequence[int],
                       lowpass_limit: int | None = None) -> list[GridPack]:
    """Filter at the master resolution (optional), then resample to each target.

    Sample order is preserved, so index ``i`` is the same physical state in
    every derived pack.
    """
    master = pack.resolution
    for r in resolutions:
        if r > master:
            raise ValueError(f"target resolution {r} exceeds master resolution {master}")
        if r < 2:
            raise ValueError(f"target resolution must be >= 2, got {r}")
    inputs, labels = pack.inputs, pack.labels
    if lowpass_limit is not None:
        inputs = lowpass_values(inputs, lowpass_limit, pack.dims)
        labels = lowpass_values(labels, lowpass_limit, pack.dims)
    src = (pack.meta.get("lineage") or {}).get("master") or pack.meta.get("source")
    out = []
    for r in resolutions:
        meta = dict(pack.meta)
        meta.pop("created_at", None)
        meta["lowpass_limit"] = lowpass_limit if lowpass_limit is not None else pack.meta.get("lowpass_limit")
        meta["lineage"] = {
            "master": src,
            "master_resolution": master,
            "derivation": f"lowpass={lowpass_limit} then spectral resample {master}->{r}",
        }
        out.append(GridPack(resample_values(inputs, r, pack.dims), resample_values(labels, r, pack.dims), meta))
    return out
