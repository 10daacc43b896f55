"""Minibatch training loop over a :class:`TrainingSet`."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .data import TrainingSet
from .model import ModelDims, ModelParams, TrainConfig, train_step

LOG_EVERY = 100


def init_params(ds: TrainingSet, sim_cfg, sup_cfg, tcfg: TrainConfig) -> ModelParams:
    """Fresh parameters for ``tcfg.seed`` with normalizers fitted to ``ds``."""
    params = ModelParams(ModelDims.build(sim_cfg, sup_cfg, tcfg), seed=tcfg.seed)
    params.fit_normalizers(ds.expert_obs, ds.raw_obs)
    return params


def fit(
    ds: TrainingSet,
    sim_cfg,
    sup_cfg,
    tcfg: TrainConfig,
    params: Optional[ModelParams] = None,
    log_every: int = LOG_EVERY,
    on_log: Optional[Callable[[dict], None]] = None,
):
    """Run ``tcfg.steps`` Adam steps; returns ``(params, curve)``.

    ``curve`` holds one entry per ``log_every`` steps with the losses averaged
    over that window. Batches are drawn with replacement from a generator
    seeded by ``tcfg.seed``, so equal inputs give identical parameters.
    """
    if params is None:
        params = init_params(ds, sim_cfg, sup_cfg, tcfg)
    rng = np.random.default_rng([tcfg.seed, 1])
    render = ds.render_predicted(sim_cfg, sup_cfg) if tcfg.mode == "primpred" else None
    curve = []
    window = []
    for k in range(tcfg.steps):
        idx = rng.integers(len(ds), size=tcfg.batch_size)
        m = train_step(params, ds.batch(idx), tcfg, rng, render)
        window.append((m["L_act"], m["L_vp"], m["L"]))
        if (k + 1) % log_every == 0:
            mean = np.mean(window, axis=0)
            entry = {"step": k + 1, "L_act": float(mean[0]), "L_vp": float(mean[1]), "L": float(mean[2])}
            curve.append(entry)
            window = []
            if on_log is not None:
                on_log(entry)
    return params, curve
