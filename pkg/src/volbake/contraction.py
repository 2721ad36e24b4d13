"""Radial coordinate contraction mapping all of R^3 into the open ball of radius 2.

Points inside the unit ball are left untouched; beyond it, distance from the
origin is remapped so that infinity lands on the sphere of radius 2.  All
field evaluation, grid sampling and mesh extraction happen in contracted
coordinates; meshes are mapped back with :func:`uncontract` before rendering.
"""

from __future__ import annotations

import numpy as np

__all__ = ["contract", "uncontract", "contract_max_norm"]

# Open upper bound on the norm of any contracted point.
contract_max_norm = 2.0


def contract(p: np.ndarray) -> np.ndarray:
    """Map world points (..., 3) into the radius-2 ball.

    Identity for ``|p| <= 1``; otherwise ``(2 - 1/|p|) * p/|p|``.  Direction is
    preserved and the output norm is strictly below 2 for finite input.
    """
    p = np.asarray(p, dtype=np.float64)
    norm = np.linalg.norm(p, axis=-1, keepdims=True)
    # Safe divisor: the branch where it matters has norm > 1.
    safe = np.maximum(norm, 1.0)
    out = np.where(norm <= 1.0, p, (2.0 - 1.0 / safe) * (p / safe))
    return out


def uncontract(q: np.ndarray) -> np.ndarray:
    """Inverse of :func:`contract`; requires ``|q| < 2``.

    Raises ``ValueError`` for points at or beyond norm 2, which have no
    finite preimage.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm >= contract_max_norm):
        bad = float(norm.max())
        raise ValueError(f"uncontract: point norm {bad} is outside the contracted domain [0, 2)")
    safe = np.maximum(norm, 1.0)
    # |p| = 1 / (2 - |q|), p parallel to q.
    out = np.where(norm <= 1.0, q, q / (safe * (2.0 - safe)))
    return out
