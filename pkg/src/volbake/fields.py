"""Signed distance fields over contracted coordinates.

Three interchangeable variants: analytic primitives (sphere, plane), CSG
composites built from min/max, and a network-parameterized field.  Every
field evaluates on contracted points; world-space geometry is whatever the
zero level set maps to under :func:`volbake.contraction.uncontract`.

Analytic primitives are exact distance functions, so their gradients have
unit norm away from CSG kinks; at a kink the gradient of the winning operand
is taken, which keeps evaluation deterministic.
"""

from __future__ import annotations

import numpy as np

from .mlp import FeatureEncoding, Mlp

__all__ = [
    "SphereSdf",
    "PlaneSdf",
    "CsgUnion",
    "CsgIntersection",
    "MlpSdf",
    "sdf_gradient",
]


class SphereSdf:
    """Distance to a sphere; positive outside."""

    def __init__(self, center, radius: float, material: int = 0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.material = material

    def value(self, q: np.ndarray) -> np.ndarray:
        return np.linalg.norm(q - self.center, axis=-1) - self.radius

    def gradient(self, q: np.ndarray) -> np.ndarray:
        d = q - self.center
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.maximum(n, 1e-30)

    def material_ids(self, q: np.ndarray) -> np.ndarray:
        return np.full(q.shape[:-1], self.material, dtype=np.int32)


class PlaneSdf:
    """Half-space boundary; positive on the side the (unit) normal points to."""

    def __init__(self, normal, offset: float, material: int = 0):
        n = np.asarray(normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)
        self.material = material

    def value(self, q: np.ndarray) -> np.ndarray:
        return q @ self.normal - self.offset

    def gradient(self, q: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.normal, q.shape).copy()

    def material_ids(self, q: np.ndarray) -> np.ndarray:
        return np.full(q.shape[:-1], self.material, dtype=np.int32)


class _CsgBase:
    """Pointwise combination of child fields; ties go to the first child."""

    def __init__(self, children):
        if not children:
            raise ValueError("CSG node needs at least one child")
        self.children = list(children)

    def _stack(self, q, attr):
        return np.stack([getattr(c, attr)(q) for c in self.children], axis=0)

    def _winner(self, q: np.ndarray) -> np.ndarray:
        vals = self._stack(q, "value")
        return self._select(vals)

    def value(self, q: np.ndarray) -> np.ndarray:
        vals = self._stack(q, "value")
        return np.take_along_axis(vals, self._select(vals)[None], axis=0)[0]

    def gradient(self, q: np.ndarray) -> np.ndarray:
        vals = self._stack(q, "value")
        win = self._select(vals)
        grads = self._stack(q, "gradient")
        return np.take_along_axis(grads, win[None, ..., None], axis=0)[0]

    def material_ids(self, q: np.ndarray) -> np.ndarray:
        vals = self._stack(q, "value")
        win = self._select(vals)
        mats = self._stack(q, "material_ids")
        return np.take_along_axis(mats, win[None], axis=0)[0]


class CsgUnion(_CsgBase):
    def _select(self, vals: np.ndarray) -> np.ndarray:
        return np.argmin(vals, axis=0)


class CsgIntersection(_CsgBase):
    def _select(self, vals: np.ndarray) -> np.ndarray:
        return np.argmax(vals, axis=0)


class MlpSdf:
    """Network-parameterized distance field with sinusoidal input features.

    Gradients come from the same forward-mode machinery the trainer uses, so
    training-time and evaluation-time normals are identical by construction.
    """

    def __init__(
        self,
        hidden: int = 128,
        layers: int = 4,
        n_freq: int = 6,
        rng: np.random.Generator | None = None,
        act_scale: float = 100.0,
        dtype=np.float32,
        init_radius: float = 1.2,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.encoding = FeatureEncoding(n_freq)
        sizes = [self.encoding.dim] + [hidden] * layers + [1]
        self.net = Mlp(sizes, rng, act_scale=act_scale, dtype=dtype, geometric_radius=init_radius)
        self.hidden = hidden
        self.layers = layers
        self.n_freq = n_freq
        self.init_radius = init_radius

    def value(self, q: np.ndarray, batch: int = 262144) -> np.ndarray:
        q = np.asarray(q, dtype=self.net.dtype)
        out = np.empty(q.shape[0], dtype=self.net.dtype)
        for i in range(0, q.shape[0], batch):
            chunk = q[i : i + batch]
            out[i : i + batch] = self.net.forward(self.encoding.encode(chunk))[:, 0]
        return out.astype(np.float64)

    def value_and_gradient(self, q: np.ndarray):
        q = np.asarray(q, dtype=self.net.dtype)
        y, G, cache = self.net.forward_jvp(self.encoding.encode(q), self.encoding.jacobian(q))
        return y[:, 0], G[:, 0, :], cache

    def gradient(self, q: np.ndarray, batch: int = 65536) -> np.ndarray:
        q = np.asarray(q, dtype=self.net.dtype)
        out = np.empty((q.shape[0], 3), dtype=self.net.dtype)
        for i in range(0, q.shape[0], batch):
            _, g, _ = self.value_and_gradient(q[i : i + batch])
            out[i : i + batch] = g
        return out.astype(np.float64)


def sdf_gradient(field, q: np.ndarray) -> np.ndarray:
    """Gradient of any field variant at contracted points (n, 3)."""
    return field.gradient(np.asarray(q))
