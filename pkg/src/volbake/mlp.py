"""Small fully-connected networks with hand-derived gradients.

Everything the trainer differentiates lives here: smooth rectifier
activations with first and second derivatives, sinusoidal feature encodings
with their input Jacobians, forward/backward passes, a forward-mode pass
producing the network gradient with respect to its input, and the
corresponding double-backward pass that yields parameter gradients of losses
defined on that input gradient (the Eikonal penalty is a function of the
spatial gradient, so its parameter gradient needs second derivatives).

The rectifier is the squareplus ``0.5 * (x + sqrt(x^2 + b))``: the same
smooth-ReLU shape as a sharp softplus but built from a single square root,
which keeps CPU training affordable, and both derivatives fall out of the
cached root for free:

    f'(x) = 0.5 * (1 + x / r),   f''(x) = 0.5 * b / r^3,   r = sqrt(x^2 + b)

``scale`` controls sharpness through ``b = (2/scale)^2`` so that
``f''(0) = scale / 4``, matching a softplus of the same scale.

No computation graph is built; each pass is explicit numpy.  Layer count and
widths are free, so the same machinery drives both the distance field and the
per-point appearance head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "squareplus",
    "squareplus_d1",
    "squareplus_d2",
    "FeatureEncoding",
    "Mlp",
    "Adam",
    "lr_log_linear",
]




def _act_b(scale: float) -> float:
    return (2.0 / scale) ** 2


def _act_root(x: np.ndarray, scale: float) -> np.ndarray:
    x = np.asarray(x)
    return np.sqrt(x * x + np.asarray(_act_b(scale), dtype=x.dtype))


def squareplus(x: np.ndarray, scale: float) -> np.ndarray:
    return 0.5 * (x + _act_root(x, scale))


def squareplus_d1(x: np.ndarray, scale: float, root: np.ndarray | None = None) -> np.ndarray:
    r = _act_root(x, scale) if root is None else root
    return 0.5 + 0.5 * (x / r)


def squareplus_d2(x: np.ndarray, scale: float, root: np.ndarray | None = None) -> np.ndarray:
    r = _act_root(x, scale) if root is None else root
    return (0.5 * _act_b(scale)) / (r * r * r)


class FeatureEncoding:
    """Raw coordinates concatenated with sin/cos features at octave frequencies.

    ``encode`` maps (n, 3) points to (n, 3 + 6*n_freq) features; ``jacobian``
    returns the (n, dim, 3) derivative of the features with respect to the
    point, used to seed forward-mode passes.
    """

    def __init__(self, n_freq: int, n_in: int = 3):
        self.n_freq = n_freq
        self.n_in = n_in
        self.freqs = 2.0 ** np.arange(n_freq, dtype=np.float64)
        self.dim = n_in * (1 + 2 * n_freq)

    def encode(self, p: np.ndarray) -> np.ndarray:
        if self.n_freq == 0:
            return p
        n = p.shape[0]
        freqs = self.freqs.astype(p.dtype)
        ang = p[:, None, :] * freqs[None, :, None]  # (n, F, 3)
        out = np.empty((n, self.dim), dtype=p.dtype)
        out[:, : self.n_in] = p
        F3 = self.n_freq * self.n_in
        np.sin(ang.reshape(n, F3), out=out[:, self.n_in : self.n_in + F3])
        np.cos(ang.reshape(n, F3), out=out[:, self.n_in + F3 :])
        return out

    def jacobian(self, p: np.ndarray) -> np.ndarray:
        n = p.shape[0]
        J = np.zeros((n, self.dim, self.n_in), dtype=p.dtype)
        idx = np.arange(self.n_in)
        J[:, idx, idx] = 1.0
        if self.n_freq == 0:
            return J
        freqs = self.freqs.astype(p.dtype)
        ang = p[:, None, :] * freqs[None, :, None]
        dsin = (np.cos(ang) * freqs[None, :, None]).reshape(n, -1)
        dcos = (-np.sin(ang) * freqs[None, :, None]).reshape(n, -1)
        base = self.n_in
        F = self.n_freq
        for k in range(F):
            for j in range(self.n_in):
                J[:, base + k * self.n_in + j, j] = dsin[:, k * self.n_in + j]
                J[:, base + F * self.n_in + k * self.n_in + j, j] = dcos[:, k * self.n_in + j]
        return J


@dataclass
class Adam:
    """First/second-moment optimizer state over a list of arrays."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_log_linear(step: int, total: int, lr0: float, lr1: float, warmup: int = 0) -> float:
    """Log-linear interpolation from lr0 to lr1 with a linear warmup ramp."""
    t = step / max(total - 1, 1)
    lr = float(np.exp((1.0 - t) * np.log(lr0) + t * np.log(lr1)))
    if warmup > 0:
        lr *= min(1.0, (step + 1) / warmup)
    return lr


class Mlp:
    """Plain feedforward net: softplus hidden layers, linear output.

    Parameters are a flat list ``[W1, b1, ..., Wout, bout]`` shared with the
    optimizer.  All passes take pre-encoded features.
    """

    def __init__(
        self,
        sizes: list[int],
        rng: np.random.Generator,
        act_scale: float = 100.0,
        dtype=np.float32,
        geometric_radius: float | None = None,
        n_raw_in: int = 3,
    ):
        """``sizes`` is [d_in, h1, ..., hk, d_out].

        When ``geometric_radius`` is set, weights are initialized so the
        scalar output approximates ``|p| - radius``: encoding channels beyond
        the first ``n_raw_in`` are zeroed in the first layer and the output
        layer starts at the mean-field value for a radial function.
        """
        self.sizes = list(sizes)
        self.act_scale = act_scale
        self.dtype = dtype
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(sizes) - 1
        for l in range(n_layers):
            d_in, d_out = sizes[l], sizes[l + 1]
            last = l == n_layers - 1
            if geometric_radius is not None:
                if last:
                    W = rng.normal(np.sqrt(np.pi) / np.sqrt(d_in), 1e-4, size=(d_in, d_out))
                    b = np.full((d_out,), -geometric_radius)
                else:
                    W = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(d_out), size=(d_in, d_out))
                    b = np.zeros((d_out,))
                    if l == 0 and d_in > n_raw_in:
                        W[n_raw_in:, :] = 0.0
            else:
                W = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
                b = np.zeros((d_out,))
            self.weights.append(W.astype(dtype))
            self.biases.append(b.astype(dtype))

    # -- parameter plumbing -------------------------------------------------

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.params():
            p[...] = flat[i : i + p.size].reshape(p.shape).astype(self.dtype)
            i += p.size
        assert i == flat.size

    @staticmethod
    def flatten_grads(grads: list[np.ndarray]) -> np.ndarray:
        return np.concatenate([g.ravel() for g in grads])

    # -- passes ---------------------------------------------------------------

    def forward(self, x: np.ndarray, want_cache: bool = False):
        a = x
        zs, roots, acts = [], [], [x]
        H = len(self.weights) - 1
        b_act = self.dtype(_act_b(self.act_scale))
        for l in range(H):
            z = a @ self.weights[l]
            z += self.biases[l]
            r = z * z
            r += b_act
            np.sqrt(r, out=r)
            a = z + r
            a *= 0.5
            if want_cache:
                zs.append(z)
                roots.append(r)
                acts.append(a)
        y = a @ self.weights[H] + self.biases[H]
        if want_cache:
            return y, {"zs": zs, "roots": roots, "acts": acts}
        return y

    def backward(self, cache: dict, dY: np.ndarray, want_dx: bool = False):
        """Parameter gradients for an upstream dL/dY; optionally dL/dx too."""
        zs, roots, acts = cache["zs"], cache["roots"], cache["acts"]
        H = len(self.weights) - 1
        grads = [None] * (2 * (H + 1))
        grads[2 * H] = acts[H].T @ dY
        grads[2 * H + 1] = dY.sum(axis=0)
        dA = dY @ self.weights[H].T
        for l in range(H - 1, -1, -1):
            dZ = zs[l] / roots[l]  # activation derivative folded into upstream
            dZ += 1.0
            dZ *= 0.5
            dZ *= dA
            grads[2 * l] = acts[l].T @ dZ
            grads[2 * l + 1] = dZ.sum(axis=0)
            dA = dZ @ self.weights[l].T
        if want_dx:
            return grads, dA
        return grads

    @staticmethod
    def _tdot(T: np.ndarray, W: np.ndarray) -> np.ndarray:
        # (n, d, k) x (d, h) -> (n, h, k) via one GEMM
        return np.tensordot(T, W, axes=([1], [0])).transpose(0, 2, 1)

    def forward_jvp(self, x: np.ndarray, Tx: np.ndarray):
        """Forward pass carrying input tangents.

        Tx has shape (n, d_in, k); returns (y, G, cache) where G (n, d_out, k)
        is the directional derivative of the output along each tangent.
        """
        a, T = x, Tx
        zs, roots, acts, Us, Ts = [], [], [x], [], [Tx]
        H = len(self.weights) - 1
        for l in range(H):
            z = a @ self.weights[l] + self.biases[l]
            U = self._tdot(T, self.weights[l])
            r = _act_root(z, self.act_scale)
            s1 = squareplus_d1(z, self.act_scale, r)
            a = 0.5 * (z + r)
            T = s1[:, :, None] * U
            zs.append(z)
            roots.append(r)
            acts.append(a)
            Us.append(U)
            Ts.append(T)
        y = a @ self.weights[H] + self.biases[H]
        G = self._tdot(T, self.weights[H])
        return y, G, {"zs": zs, "roots": roots, "acts": acts, "Us": Us, "Ts": Ts}

    def backward_jvp(self, cache: dict, dY: np.ndarray | None, dG: np.ndarray):
        """Parameter gradients when the loss depends on both y and its input gradient.

        dY is (n, d_out) or None, dG is (n, d_out, k) matching forward_jvp's G.
        """
        zs, roots, acts = cache["zs"], cache["roots"], cache["acts"]
        Us, Ts = cache["Us"], cache["Ts"]
        H = len(self.weights) - 1
        grads = [None] * (2 * (H + 1))

        gW = np.tensordot(Ts[H], dG, axes=([0, 2], [0, 2]))
        if dY is not None:
            gW += acts[H].T @ dY
            grads[2 * H + 1] = dY.sum(axis=0)
            dA = dY @ self.weights[H].T
        else:
            grads[2 * H + 1] = np.zeros_like(self.biases[H])
            dA = None
        grads[2 * H] = gW
        dT = self._tdot(dG, self.weights[H].T)

        for l in range(H - 1, -1, -1):
            z, r = zs[l], roots[l]
            s1 = squareplus_d1(z, self.act_scale, r)
            s2 = squareplus_d2(z, self.act_scale, r)
            dZ = s2 * (dT * Us[l]).sum(axis=-1)
            if dA is not None:
                dZ += dA * s1
            dU = s1[:, :, None] * dT
            gW = acts[l].T @ dZ
            gW += np.tensordot(Ts[l], dU, axes=([0, 2], [0, 2]))
            grads[2 * l] = gW
            grads[2 * l + 1] = dZ.sum(axis=0)
            dA = dZ @ self.weights[l].T
            dT = self._tdot(dU, self.weights[l].T)
        return grads
