"""Pure-numpy voxel kernels.

Reference implementation of the hot loops; the compiled ``_ckernels``
extension mirrors these signatures exactly.  Positions are given in
continuous voxel-index coordinates: voxel ``i`` has its center at ``q = i``
and covers ``[i - 0.5, i + 0.5)``.
"""

import numpy as np

# corner offsets of the trilinear stencil, in (dx, dy, dz) order
_CORNERS = np.array(
    [[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64
)


def _stencil(q, n):
    """Flat indices, per-axis weights and in-grid mask of the 8 corners.

    Built from per-axis outer products; corner order matches ``_CORNERS``.
    Returns ``flat (m, 8)``, ``f (m, 8, 3)`` and ``ok (m, 8)``.
    """
    base = np.floor(q)
    frac = q - base
    lo = base.astype(np.int64)
    ax = [np.stack([lo[:, a], lo[:, a] + 1], axis=1) for a in range(3)]            # (m, 2) each
    inside = [(i >= 0) & (i < n) for i in ax]
    wts = [np.stack([1.0 - frac[:, a], frac[:, a]], axis=1) for a in range(3)]
    m = q.shape[0]
    flat = ((ax[0][:, :, None, None] * n + ax[1][:, None, :, None]) * n + ax[2][:, None, None, :]).reshape(m, 8)
    ok = (inside[0][:, :, None, None] & inside[1][:, None, :, None] & inside[2][:, None, None, :]).reshape(m, 8)
    f = np.empty((m, 8, 3))
    f[..., 0] = np.broadcast_to(wts[0][:, :, None, None], (m, 2, 2, 2)).reshape(m, 8)
    f[..., 1] = np.broadcast_to(wts[1][:, None, :, None], (m, 2, 2, 2)).reshape(m, 8)
    f[..., 2] = np.broadcast_to(wts[2][:, None, None, :], (m, 2, 2, 2)).reshape(m, 8)
    return flat, f, ok


def scatter_trilinear(q, w, n):
    """Distribute weights ``w`` at positions ``q`` over an ``n**3`` grid.

    Corners falling outside the grid are dropped (open boundary).
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(w, dtype=np.float64)
    if q.shape[0] == 0:
        return np.zeros((n, n, n))
    flat, f, ok = _stencil(q, n)
    wt = w[:, None] * f[..., 0] * f[..., 1] * f[..., 2]
    return np.bincount(flat[ok], weights=wt[ok], minlength=n * n * n).reshape(n, n, n)


def scatter_nearest(q, w, n):
    """Assign each weight wholly to the voxel containing its position."""
    q = np.asarray(q, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(n * n * n)
    if q.shape[0] == 0:
        return out.reshape(n, n, n)
    idx = np.floor(q + 0.5).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < n), axis=1)
    flat = (idx[ok, 0] * n + idx[ok, 1]) * n + idx[ok, 2]
    out += np.bincount(flat, weights=w[ok], minlength=n * n * n)
    return out.reshape(n, n, n)


def gather_trilinear(img, q):
    """Trilinear interpolation of ``img`` at ``q`` and its spatial gradient.

    Returns ``(values, grad)`` where ``grad[k]`` is d(value)/dq.  This is the
    adjoint of :func:`scatter_trilinear`: for any ``h``,
    ``sum(h * scatter(q, w)) == sum(w * gather(h, q)[0])``.
    """
    img = np.asarray(img, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = img.shape[0]
    m = q.shape[0]
    grad = np.zeros((m, 3))
    if m == 0:
        return np.zeros(m), grad
    flat, f, ok = _stencil(q, n)
    v = np.where(ok, img.reshape(-1)[np.where(ok, flat, 0)], 0.0)          # (m, 8)
    s = np.where(_CORNERS == 1, 1.0, -1.0)                                   # (8, 3)
    f0, f1, f2 = f[..., 0], f[..., 1], f[..., 2]
    val = np.sum(v * f0 * f1 * f2, axis=1)
    grad[:, 0] = np.sum(v * s[:, 0] * f1 * f2, axis=1)
    grad[:, 1] = np.sum(v * f0 * s[:, 1] * f2, axis=1)
    grad[:, 2] = np.sum(v * f0 * f1 * s[:, 2], axis=1)
    return val, grad


def crosstalk(img, frac):
    """Single-pass face leakage; light leaving the grid is lost."""
    img = np.asarray(img, dtype=np.float64)
    out = (1.0 - 6.0 * frac) * img
    out[1:, :, :] += frac * img[:-1, :, :]
    out[:-1, :, :] += frac * img[1:, :, :]
    out[:, 1:, :] += frac * img[:, :-1, :]
    out[:, :-1, :] += frac * img[:, 1:, :]
    out[:, :, 1:] += frac * img[:, :, :-1]
    out[:, :, :-1] += frac * img[:, :, 1:]
    return out
