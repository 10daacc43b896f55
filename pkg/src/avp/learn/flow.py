"""Conditional flow matching on straight paths from Gaussian noise to action chunks."""

from __future__ import annotations

import numpy as np

from .nn import mlp_backward, mlp_forward


def expert_input(x, tau, cond):
    """Network input ``[x_tau, tau, cond]`` for a batch (or a single row)."""
    x = np.atleast_2d(x)
    cond = np.atleast_2d(cond)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1, 1), (x.shape[0], 1))
    return np.concatenate([x, tau, cond], axis=1)


def draw_path(a, rng):
    """Noise ``x0`` and times ``tau`` for a batch of flattened targets ``a``."""
    x0 = rng.standard_normal(a.shape)
    tau = rng.uniform(0.0, 1.0, size=(a.shape[0], 1))
    return x0, tau


def fm_loss(layers, cond, a, rng):
    """Flow-matching loss and its exact gradient for one draw of ``(x0, tau)``.

    ``a`` is ``(batch, dim)`` (or ``(dim,)``), ``cond`` matching rows of
    conditioning features. The loss is the batch mean of
    ``|v(x_tau, tau, cond) - (a - x0)|^2`` with ``x_tau = (1 - tau) x0 + tau a``.
    Returns ``(loss, grads)``; ``grads`` follows the layer structure.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    x0, tau = draw_path(a, rng)
    loss, grads, _ = fm_loss_given(layers, cond, a, x0, tau)
    return loss, grads


def fm_loss_given(layers, cond, a, x0, tau):
    """Same as :func:`fm_loss` with the path sample supplied. Also returns per-row losses."""
    a = np.atleast_2d(a)
    xt = (1.0 - tau) * x0 + tau * a
    pred, cache = mlp_forward(layers, expert_input(xt, tau, cond))
    diff = pred - (a - x0)
    per_row = np.sum(diff * diff, axis=1)
    n = a.shape[0]
    grads, _ = mlp_backward(layers, cache, (2.0 / n) * diff)
    return float(per_row.mean()), grads, per_row


def expert_velocity(layers):
    def velocity(x, tau, cond):
        out, _ = mlp_forward(layers, expert_input(x, tau, cond))
        return out

    return velocity


def fm_sample(velocity, cond, steps: int, rng, shape, clip=None):
    """Euler-integrate ``dx/dtau = velocity(x, tau, cond)`` from ``x0 ~ N(0, I)`` over [0, 1].

    ``velocity`` is a callable (see :func:`expert_velocity`). ``clip=(lo, hi)``
    is applied once, to the final sample.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = rng.standard_normal(shape)
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * velocity(x, k * dt, cond)
    if clip is not None:
        x = np.clip(x, clip[0], clip[1])
    return x
