"""Dense tanh networks with hand-written reverse mode, a flat parameter store, and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def mlp_forward(layers, x):
    """Run ``x`` through ``[(W, b), ...]``; tanh between layers, linear output.

    ``x`` is ``(in,)`` or ``(batch, in)``. Returns ``(output, cache)`` where the
    cache holds each layer's input and pre-activation.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    cache = []
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        if h.shape[1] != w.shape[0]:
            raise ShapeMismatch(f"layer {i} expects {w.shape[0]} inputs, got {h.shape[1]}")
        z = h @ w + b
        cache.append((h, z))
        h = z if i == last else np.tanh(z)
    return (h[0] if squeeze else h), cache


def mlp_backward(layers, cache, grad_out):
    """Gradients of ``sum(grad_out * output)`` w.r.t. every weight and the input.

    Returns ``([(dW, db), ...], d_input)`` with shapes matching the forward call.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    squeeze = g.ndim == 1
    if squeeze:
        g = g[None, :]
    out_dim = layers[-1][0].shape[1]
    if g.shape != (cache[-1][1].shape[0], out_dim):
        raise ShapeMismatch(f"grad_out shape {g.shape} does not match output {(cache[-1][1].shape[0], out_dim)}")
    grads = [None] * len(layers)
    last = len(layers) - 1
    for i in range(last, -1, -1):
        w, _ = layers[i]
        h, z = cache[i]
        if i != last:
            a = cache[i + 1][0]  # tanh(z), the next layer's input
            g = g * (1.0 - a * a)
        grads[i] = (h.T @ g, g.sum(axis=0))
        g = g @ w.T
    return grads, (g[0] if squeeze else g)


class ParamStore:
    """Named tensors laid out in one flat float64 vector, with a matching gradient vector.

    ``nets[name]`` is a list of ``(W, b)`` views into ``flat``; ``grads[name]``
    the same views into ``grad``.
    """

    def __init__(self, net_sizes: dict):
        self.net_sizes = {k: list(v) for k, v in net_sizes.items()}
        self.layout = []
        offset = 0
        self.slices = {}
        for name, sizes in self.net_sizes.items():
            start = offset
            for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                self.layout.append((name, i, "W", (n_in, n_out), offset))
                offset += n_in * n_out
                self.layout.append((name, i, "b", (n_out,), offset))
                offset += n_out
            self.slices[name] = slice(start, offset)
        self.size = offset
        self.flat = np.zeros(offset)
        self.grad = np.zeros(offset)
        self.nets = self._views(self.flat)
        self.grads = self._views(self.grad)

    def _views(self, buf):
        out = {name: [] for name in self.net_sizes}
        for name, i, kind, shape, off in self.layout:
            n = int(np.prod(shape))
            view = buf[off : off + n].reshape(shape)
            if kind == "W":
                out[name].append([view, None])
            else:
                out[name][i][1] = view
        return {k: [tuple(p) for p in v] for k, v in out.items()}

    def init(self, rng) -> None:
        """LeCun-normal weights, zero biases."""
        for name, i, kind, shape, off in self.layout:
            n = int(np.prod(shape))
            if kind == "W":
                self.flat[off : off + n] = rng.standard_normal(n) / np.sqrt(shape[0])
            else:
                self.flat[off : off + n] = 0.0

    def set_grads(self, name: str, grads) -> None:
        for (dw, db), (gw, gb) in zip(self.grads[name], grads):
            dw[...] = gw
            db[...] = gb


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> AdamState:
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_update(param, grad, state: AdamState, lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS):
    """One bias-corrected Adam step. Returns ``(new_param, new_state)``; inputs are not modified.

    ``sqrt(v_hat)`` is evaluated as ``sqrt(v) / sqrt(1 - b2^t)``, the order the
    in-place variant uses, so both give bit-identical results.
    """
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * (grad * grad)
    denom = np.sqrt(v) * (1.0 / math.sqrt(1.0 - b2**t)) + eps
    new = param - (m / denom) * (lr / (1.0 - b1**t))
    return new, AdamState(m, v, t)


def adam_update_(param, grad, state: AdamState, lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """In-place variant of :func:`adam_update` for the training loop."""
    b1, b2 = betas
    state.t += 1
    tmp = np.multiply(grad, 1.0 - b1)
    state.m *= b1
    state.m += tmp
    np.multiply(grad, grad, out=tmp)
    tmp *= 1.0 - b2
    state.v *= b2
    state.v += tmp
    np.sqrt(state.v, out=tmp)
    tmp *= 1.0 / math.sqrt(1.0 - b2**state.t)
    tmp += eps
    np.divide(state.m, tmp, out=tmp)
    tmp *= lr / (1.0 - b1**state.t)
    param -= tmp
