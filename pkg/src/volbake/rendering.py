"""Quadrature volume rendering along rays.

Samples along a ray carry density and color; compositing follows the
standard transmittance form

    C = sum_i exp(-sum_{j<i} tau_j * delta_j) * (1 - exp(-tau_i * delta_i)) * c_i

with ``delta_i = t_i - t_{i-1}`` and ``t_0`` the near plane.  The weight in
front of ``c_i`` is exact for density that is constant on each segment, so a
closed-form product of segment transmittances is used as the test oracle.
The backward pass here feeds the trainer; it is hand-derived like the rest
of the gradient machinery.
"""

from __future__ import annotations

import numpy as np

from .contraction import contract
from .density import DensityParams, density_from_sdf

__all__ = [
    "stratified_ts",
    "deltas_from_ts",
    "composite",
    "composite_backward",
    "render_rays",
    "render_image",
]


def stratified_ts(near: float, far: float, n_samples: int, n_rays: int, rng=None, dtype=np.float64):
    """Per-ray sorted sample distances; jittered within strata when rng is given."""
    if not near < far:
        raise ValueError(f"degenerate ray bounds: near={near} far={far}")
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    edges = np.linspace(0.0, 1.0, n_samples + 1, dtype=dtype)
    lo = edges[:-1]
    if rng is None:
        u = np.full((n_rays, n_samples), 0.5, dtype=dtype)
    else:
        u = rng.random((n_rays, n_samples), dtype=np.float64).astype(dtype)
    s = lo[None, :] + u / n_samples
    return near + (far - near) * s


def deltas_from_ts(ts: np.ndarray, near: float) -> np.ndarray:
    """delta_i = t_i - t_{i-1} with t_0 = near."""
    d = np.diff(ts, axis=-1, prepend=near)
    return d


def composite(deltas: np.ndarray, densities: np.ndarray, colors: np.ndarray):
    """Composite per-ray samples into colors.

    deltas, densities: (n_rays, n_samples); colors: (n_rays, n_samples, 3).
    Returns (color (n_rays, 3), weights (n_rays, n_samples)).
    """
    if np.any(densities < 0):
        raise ValueError("negative density")
    od = densities * deltas
    acc = np.cumsum(od, axis=-1)
    trans = np.exp(-(acc - od))  # transmittance up to the segment start
    weights = trans * -np.expm1(-od)
    color = (weights[..., None] * colors).sum(axis=-2)
    return color, weights


def composite_backward(deltas, densities, colors, weights, dC):
    """Gradients of a loss through :func:`composite`.

    dC is (n_rays, 3).  Returns (d_density (n_rays, n), d_colors (n_rays, n, 3)).
    """
    od = densities * deltas
    acc = np.cumsum(od, axis=-1)
    trans_after = np.exp(-acc)  # transmittance past each sample
    s = (colors * dC[:, None, :]).sum(axis=-1)  # upstream dotted with sample color
    sw = s * weights
    suffix = np.cumsum(sw[:, ::-1], axis=-1)[:, ::-1] - sw  # sum over later samples
    d_density = deltas * (s * trans_after - suffix)
    d_colors = weights[..., None] * dC[:, None, :]
    return d_density, d_colors


def render_rays(
    field,
    color_fn,
    origins: np.ndarray,
    dirs: np.ndarray,
    near: float,
    far: float,
    params: DensityParams,
    n_samples: int = 128,
    rng=None,
):
    """Render world-space rays against a contracted-space field.

    ``color_fn(points_contracted, view_dirs) -> (n, 3)`` supplies emitted
    color.  Returns (colors (n_rays, 3), weights, ts).
    """
    n_rays = origins.shape[0]
    ts = stratified_ts(near, far, n_samples, n_rays, rng)
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    q = contract(pts.reshape(-1, 3))
    f = np.asarray(field.value(q), dtype=np.float64).reshape(n_rays, n_samples)
    dens = density_from_sdf(f, params)
    view = np.broadcast_to(dirs[:, None, :], pts.shape).reshape(-1, 3)
    cols = np.asarray(color_fn(q, view), dtype=np.float64).reshape(n_rays, n_samples, 3)
    color, weights = composite(deltas_from_ts(ts, near), dens, cols)
    return color, weights, ts


def render_image(field, color_fn, camera, near, far, params, n_samples=128, chunk=4096):
    """Deterministic (stratum-midpoint) volume render of a full camera frame."""
    o, d = camera.rays()
    out = np.empty((o.shape[0], 3))
    for i in range(0, o.shape[0], chunk):
        c, _, _ = render_rays(
            field, color_fn, o[i : i + chunk], d[i : i + chunk], near, far, params, n_samples
        )
        out[i : i + chunk] = c
    return np.clip(out, 0.0, 1.0).reshape(camera.height, camera.width, 3)
