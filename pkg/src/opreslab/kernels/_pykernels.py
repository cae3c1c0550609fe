"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``OPRESLAB_PURE_PYTHON=1`` is set. The compiled module must export the
same names with the same semantics.
"""
import numpy as np


def _faces(a):
    # face coefficient towards the +1 neighbour along each axis (periodic wrap)
    return 0.5 * (a + np.roll(a, -1, axis=0)), 0.5 * (a + np.roll(a, -1, axis=1))


def darcy_stencil(a, v, inv_h2):
    """Variable-coefficient 5-point operator ``-div(a grad v)`` at every node.

    Neighbours wrap periodically; face coefficients are arithmetic means of
    the two adjacent nodes.
    """
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cx, cy = _faces(a)
    fx = cx * (v - np.roll(v, -1, axis=0))
    fy = cy * (v - np.roll(v, -1, axis=1))
    out = fx - np.roll(fx, 1, axis=0) + fy - np.roll(fy, 1, axis=1)
    return out * inv_h2


def darcy_diagonal(a, inv_h2):
    cx, cy = _faces(a)
    return (cx + np.roll(cx, 1, axis=0) + cy + np.roll(cy, 1, axis=1)) * inv_h2


def darcy_pcg(a, b, inv_h2, tol, maxiter):
    """Jacobi-preconditioned CG on the interior nodes (row 0 / column 0 fixed at 0).

    Returns ``(u, iterations, relative_residual)``; the caller decides what
    to do with a non-converged result.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    n = a.shape[0]
    mask = np.ones((n, n))
    mask[0, :] = 0.0
    mask[:, 0] = 0.0
    r = np.asarray(b, dtype=np.float64) * mask
    bnorm = np.sqrt(np.sum(r * r))
    u = np.zeros((n, n))
    if bnorm == 0.0:
        return u, 0, 0.0
    dinv = np.zeros((n, n))
    inner = mask > 0
    dinv[inner] = 1.0 / darcy_diagonal(a, inv_h2)[inner]
    z = r * dinv
    p = z.copy()
    rz = np.sum(r * z)
    rnorm = bnorm
    it = 0
    while it < maxiter:
        q = darcy_stencil(a, p, inv_h2) * mask
        alpha = rz / np.sum(p * q)
        u += alpha * p
        r -= alpha * q
        it += 1
        rnorm = np.sqrt(np.sum(r * r))
        if rnorm <= tol * bnorm:
            break
        z = r * dinv
        rz_new = np.sum(r * z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return u, it, rnorm / bnorm


def mode_contract(x, r):
    """``out[b, m, o] = sum_i x[b, m, i] * r[m, i, o]`` for complex arrays."""
    return np.matmul(x.transpose(1, 0, 2), r).transpose(1, 0, 2)


def mode_contract_grads(x, r, g):
    """Adjoints of :func:`mode_contract` (gradient convention dL/dRe + i dL/dIm)."""
    gt = g.transpose(1, 0, 2)
    gx = np.matmul(gt, np.conj(r).transpose(0, 2, 1)).transpose(1, 0, 2)
    gr = np.matmul(np.conj(x).transpose(1, 2, 0), gt)
    return gx, gr
