"""Fully connected tanh policy network in plain numpy.

Parameters live in one flat float64 vector. Layer ``l`` contributes its weight
matrix (``out x in``, row-major) followed by its bias vector, layers in input
to output order. Hidden layers use tanh, the output layer is linear.

Inputs may be a single vector ``(d_z,)`` or a batch ``(B, d_z)``. Parameter
gradients are always summed over the batch.

Besides the usual reverse pass, :func:`second_order_vjp` differentiates the
forward-mode tangent computation, giving the mixed second derivatives needed to
differentiate through gradient-ascent updates of an input perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

ACTIVATIONS = ("tanh",)


@dataclass
class MlpParams:
    layer_dims: tuple
    flat: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ContractError(f"invalid layer_dims {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}")
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (n_params(self.layer_dims),):
            raise ContractError(f"expected {n_params(self.layer_dims)} parameters, got {self.flat.shape}")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    def layers(self):
        """(W, b) views into ``flat`` for each layer."""
        out = []
        off = 0
        for d_in, d_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            W = self.flat[off: off + d_in * d_out].reshape(d_out, d_in)
            off += d_in * d_out
            b = self.flat[off: off + d_out]
            off += d_out
            out.append((W, b))
        return out

    def with_flat(self, flat):
        return MlpParams(self.layer_dims, flat, self.activation)

    def copy(self):
        return self.with_flat(self.flat.copy())

    @property
    def d_in(self):
        return self.layer_dims[0]

    @property
    def d_out(self):
        return self.layer_dims[-1]


def n_params(layer_dims):
    return sum(i * o + o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


def init(layer_dims, seed) -> MlpParams:
    """LeCun-normal weights (std ``1/sqrt(fan_in)``) and zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        chunks.append(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=d_in * d_out))
        chunks.append(np.zeros(d_out))
    return MlpParams(tuple(layer_dims), np.concatenate(chunks))


def _as_batch(W, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != W.d_in:
        raise ContractError(f"policy expects input dim {W.d_in}, got {z.shape[-1]}")
    return z.reshape(-1, W.d_in), z.ndim == 1


def _forward_cache(W: MlpParams, z):
    acts = [z]
    layers = W.layers()
    a = z
    for Wl, bl in layers[:-1]:
        a = np.tanh(a @ Wl.T + bl)
        acts.append(a)
    Wl, bl = layers[-1]
    return acts, a @ Wl.T + bl


def forward(W: MlpParams, z):
    zb, single = _as_batch(W, z)
    u = _forward_cache(W, zb)[1]
    return u[0] if single else u


def vjp(W: MlpParams, z, upstream):
    """Gradients of ``sum <upstream, forward(W, z)>`` w.r.t. parameters and input."""
    zb, single = _as_batch(W, z)
    up = np.asarray(upstream, dtype=np.float64).reshape(-1, W.d_out)
    acts, _ = _forward_cache(W, zb)
    layers = W.layers()
    grads = []
    g = up
    for l in range(len(layers) - 1, -1, -1):
        Wl, _ = layers[l]
        a_prev = acts[l]
        grads.append((g.sum(0), g.T @ a_prev))
        g = g @ Wl
        if l > 0:
            g = g * (1.0 - a_prev**2)
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gb, gW in reversed(grads)])
    return flat, (g[0] if single else g)


def grad_params(W: MlpParams, z, upstream):
    return vjp(W, z, upstream)[0]


def grad_input(W: MlpParams, z, upstream):
    return vjp(W, z, upstream)[1]


def jvp(W: MlpParams, z, v):
    """Output and its directional derivative ``J(z) v``."""
    zb, single = _as_batch(W, z)
    vb = np.asarray(v, dtype=np.float64).reshape(zb.shape)
    layers = W.layers()
    a, ad = zb, vb
    for Wl, bl in layers[:-1]:
        a = np.tanh(a @ Wl.T + bl)
        ad = (1.0 - a**2) * (ad @ Wl.T)
    Wl, bl = layers[-1]
    u, ud = a @ Wl.T + bl, ad @ Wl.T
    return (u[0], ud[0]) if single else (u, ud)


def input_jacobian(W: MlpParams, z):
    """Full Jacobian ``d forward / d z`` of shape ``(..., d_out, d_in)``."""
    zb, single = _as_batch(W, z)
    B = zb.shape[0]
    rep = np.repeat(zb, W.d_in, axis=0)
    eye = np.tile(np.eye(W.d_in), (B, 1))
    _, ud = jvp(W, rep, eye)
    jac = ud.reshape(B, W.d_in, W.d_out).transpose(0, 2, 1)
    return jac[0] if single else jac


def second_order_vjp(W: MlpParams, z, v, cot_out, cot_tangent):
    """Reverse pass through the tangent-augmented forward pass.

    With ``u = forward(W, z)`` and ``ud = J(z) v`` (``v`` held fixed), returns the
    gradients w.r.t. parameters and ``z`` of::

        phi = sum <cot_out, u> + <cot_tangent, ud>

    The ``cot_tangent`` part is the mixed second derivative contraction
    ``d/dW [grad_z(<cot_tangent, pi>) . v]`` and ``d/dz`` likewise.
    """
    zb, single = _as_batch(W, z)
    vb = np.asarray(v, dtype=np.float64).reshape(zb.shape)
    co = np.asarray(cot_out, dtype=np.float64).reshape(-1, W.d_out)
    ct = np.asarray(cot_tangent, dtype=np.float64).reshape(-1, W.d_out)
    layers = W.layers()
    acts, tans, pre_tans = [zb], [vb], []
    a, ad = zb, vb
    for Wl, bl in layers[:-1]:
        hd = ad @ Wl.T
        a = np.tanh(a @ Wl.T + bl)
        ad = (1.0 - a**2) * hd
        acts.append(a)
        tans.append(ad)
        pre_tans.append(hd)

    grads = []
    g, gd = co, ct  # adjoints of layer output and of its tangent
    for l in range(len(layers) - 1, -1, -1):
        Wl, _ = layers[l]
        a_prev, ad_prev = acts[l], tans[l]
        grads.append((g.sum(0), g.T @ a_prev + gd.T @ ad_prev))
        g, gd = g @ Wl, gd @ Wl
        if l > 0:
            s = 1.0 - a_prev**2
            hd = pre_tans[l - 1]
            g, gd = s * g + gd * hd * (-2.0 * a_prev * s), s * gd
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gb, gW in reversed(grads)])
    return flat, (g[0] if single else g)
