"""Reverse-mode gradients over the layered graph and masked Adam updates.

The forward pass caches every affine node z and unit output; `backward` seeds
the chain rule with dLoss/dOutput per data row (plus optional direct dLoss/dZ
contributions, used by the singularity penalty on division denominators) and
propagates layer by layer.  Divide units transmit zero gradient through the
guarded-off branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netgraph import LayerCache, Network, UnitKind


class NumericalError(RuntimeError):
    """Raised when a backward pass produces a non-finite gradient."""


def backward(net: Network, caches: list[LayerCache], d_out: np.ndarray,
             d_z: dict[int, np.ndarray] | None = None,
             trainable_mask: np.ndarray | None = None) -> np.ndarray:
    """Accumulate dLoss/dw for every weight from per-row output gradients.

    d_out: (rows, n_out) gradient of the scalar loss w.r.t. network outputs.
    d_z: optional {layer index: (rows, n_z)} direct gradients w.r.t. affine nodes.
    Entries outside trainable_mask are forced to exactly 0.
    """
    d_out = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
    grad = np.zeros(net.n_weights)
    g_y = d_out  # gradient w.r.t. the current layer's output, walking backwards
    for li in range(len(net.layout) - 1, -1, -1):
        lay = net.layout[li]
        cache = caches[li]
        if lay.has_copies:
            d_units = g_y[:, :lay.n_units]
            d_copy = g_y[:, lay.n_units:]
        else:
            d_units = g_y
            d_copy = None
        dz = np.zeros_like(cache.z)
        for kind, urows, zrows in lay.unary_groups:
            du = d_units[:, urows]
            v = cache.z[:, zrows]
            if kind is UnitKind.SIN:
                dz[:, zrows] = du * np.cos(v)
            elif kind is UnitKind.TANH:
                dz[:, zrows] = du * (1.0 - cache.units[:, urows] ** 2)
            elif kind is UnitKind.ARCTAN:
                dz[:, zrows] = du / (1.0 + v * v)
            else:
                dz[:, zrows] = du
        if lay.mul_units.size:
            du = d_units[:, lay.mul_units]
            dz[:, lay.mul_z[:, 0]] = du * cache.z[:, lay.mul_z[:, 1]]
            dz[:, lay.mul_z[:, 1]] = du * cache.z[:, lay.mul_z[:, 0]]
        if lay.div_units.size:
            du = d_units[:, lay.div_units]
            den = cache.z[:, lay.div_z[:, 1]]
            ok = cache.div_ok
            safe_den = np.where(ok, den, 1.0)
            dz[:, lay.div_z[:, 0]] = np.where(ok, du / safe_den, 0.0)
            dz[:, lay.div_z[:, 1]] = np.where(
                ok, -du * cache.units[:, lay.div_units] / safe_den, 0.0)
        if d_z is not None and li in d_z:
            dz = dz + d_z[li]
        grad[lay.w_offset:lay.b_offset] = (dz.T @ cache.y_in).reshape(-1)
        grad[lay.b_offset:lay.end_offset] = dz.sum(axis=0)
        g_y = dz @ net.layer_w(li)
        if d_copy is not None:
            g_y = g_y.copy()
            g_y[:, :d_copy.shape[1]] += d_copy
    if trainable_mask is not None:
        grad[~trainable_mask] = 0.0
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NumericalError(f"non-finite gradient at weight index {int(bad[0])}")
    return grad


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: Network, lr: float = 1e-3, beta1: float = 0.9,
                    beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(net.n_weights), v=np.zeros(net.n_weights),
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def reset(self) -> None:
        self.m[:] = 0.0
        self.v[:] = 0.0
        self.t = 0


def adam_step(net: Network, grad: np.ndarray, state: AdamState,
              trainable_mask: np.ndarray | None = None) -> tuple[Network, AdamState]:
    """Bias-corrected Adam update applied only to the trainable index set."""
    state.t += 1
    if trainable_mask is None:
        idx = slice(None)
    else:
        idx = trainable_mask
    g = grad[idx]
    state.m[idx] = state.beta1 * state.m[idx] + (1.0 - state.beta1) * g
    state.v[idx] = state.beta2 * state.v[idx] + (1.0 - state.beta2) * g * g
    m_hat = state.m[idx] / (1.0 - state.beta1 ** state.t)
    v_hat = state.v[idx] / (1.0 - state.beta2 ** state.t)
    net.weights[idx] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return net, state


def zero_masked(net: Network, trainable_mask: np.ndarray) -> Network:
    """Set every weight outside the trainable set to exactly 0."""
    net.weights[~trainable_mask] = 0.0
    return net
