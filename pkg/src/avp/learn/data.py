"""Turning expert trajectories into training rows."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import NoKeyframes
from ..render import RenderConfig, VisualPrimitive, compose
from ..supervision import PrimitiveLabel, build_supervision, label_from_cell
from ..trajio import LabeledSample
from .model import Batch, instruction_encoding, normalize_chunk, pool_image, pool_images, proprio_features


def prompt_label(label: PrimitiveLabel, cam, sup_cfg) -> PrimitiveLabel:
    """The label as drawn on images: anchored at its grid-cell center.

    Predicted primitives only carry a cell, so ground-truth ones are drawn the
    same way to keep training and inference images identical in distribution.
    """
    return label_from_cell(label.stage, label.cell_u, label.cell_v, cam, sup_cfg)


def compose_prompt(img, label, history, rcfg: RenderConfig, cam, sup_cfg):
    cur = VisualPrimitive(prompt_label(label, cam, sup_cfg), rcfg)
    return compose(img, cur, [prompt_label(h, cam, sup_cfg) for h in history])


def leg_of_stage(stage_index: int, n_legs: int) -> int:
    # every leg contributes one pick and one place keyframe
    return min(stage_index // 2, n_legs - 1)


def labeled_samples(traj, sup, sim_cfg, sup_cfg, rcfg: RenderConfig, horizon: int):
    """LabeledSamples for steps ``0 .. T - horizon - 1`` of one supervised trajectory."""
    cam = sim_cfg.camera
    acts = traj.actions()
    legs = traj.task.legs()
    for t in range(len(traj.steps) - horizon):
        k = sup.step_stage[t]
        label = sup.label_at(t)
        history = tuple(sup.history_at(t))
        src, dst = legs[leg_of_stage(k, len(legs))]
        raw = traj.steps[t].observation
        obs = compose_prompt(raw, label, history, rcfg, cam, sup_cfg)
        yield LabeledSample(
            observation=obs,
            proprio=traj.steps[t].proprio,
            instruction=instruction_encoding(src, dst, sim_cfg.n_locations),
            primitive_gt=label,
            action_chunk=acts[t : t + horizon].copy(),
            stage_index=k,
            history=history,
            raw_observation=None if rcfg.prompt_type == "none" else raw,
        )


@dataclass
class TrainingSet:
    expert_obs: np.ndarray
    raw_obs: np.ndarray
    proprio: np.ndarray
    instr: np.ndarray
    labels: np.ndarray
    chunks: np.ndarray
    raw_images: Optional[np.ndarray] = None
    history: Optional[list] = None
    render_cfg: Optional[RenderConfig] = None

    def __len__(self):
        return self.chunks.shape[0]

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(
            self.expert_obs[idx].astype(np.float64),
            self.raw_obs[idx].astype(np.float64),
            self.proprio[idx],
            self.instr[idx].astype(np.float64),
            self.labels[idx],
            self.chunks[idx],
            idx,
        )

    def render_predicted(self, sim_cfg, sup_cfg):
        """Renderer for ``train_step`` in predicted-primitive mode."""
        if self.raw_images is None:
            raise ValueError("predicted-primitive training needs the raw images kept")
        cam = sim_cfg.camera

        def render(indices, cells):
            out = np.empty((len(indices), self.expert_obs.shape[1]))
            for r, (i, (st, cu, cv)) in enumerate(zip(indices, cells)):
                lab = label_from_cell(int(st), int(cu), int(cv), cam, sup_cfg)
                out[r] = pool_image(compose_prompt(self.raw_images[i], lab, self.history[i], self.render_cfg, cam, sup_cfg))
            return out

        return render


class TrainingSetBuilder:
    """Accumulates rows without holding full images (unless ``keep_raw``)."""

    def __init__(self, sim_cfg, sup_cfg, keep_raw: bool = False):
        self.sim_cfg = sim_cfg
        self.sup_cfg = sup_cfg
        self.keep_raw = keep_raw
        self.rows = {k: [] for k in ("expert_obs", "raw_obs", "proprio", "instr", "labels", "chunks")}
        self.raw_images = []
        self.history = []

    def add(self, sample: LabeledSample) -> None:
        self.add_many([sample])

    def add_many(self, samples) -> None:
        samples = list(samples)
        if not samples:
            return
        step = self.sim_cfg.step_size
        obs = np.stack([s.observation for s in samples])
        raw = np.stack([s.raw for s in samples])
        r = self.rows
        r["expert_obs"].append(pool_images(obs).astype(np.float32))
        r["raw_obs"].append(pool_images(raw).astype(np.float32))
        r["proprio"].append(np.stack([proprio_features(s.proprio, self.sim_cfg) for s in samples]))
        r["instr"].append(np.stack([s.instruction for s in samples]).astype(np.float32))
        r["labels"].append(np.array([(int(s.primitive_gt.stage), s.primitive_gt.cell_u, s.primitive_gt.cell_v) for s in samples]))
        r["chunks"].append(np.stack([normalize_chunk(s.action_chunk, step).ravel() for s in samples]))
        if self.keep_raw:
            self.raw_images.append(raw.astype(np.float32))
            self.history.extend(s.history for s in samples)

    def build(self, render_cfg: Optional[RenderConfig] = None) -> TrainingSet:
        cols = {}
        for k, parts in self.rows.items():
            cols[k] = np.concatenate(parts) if parts else None
        if cols["chunks"] is None:
            raise ValueError("no training rows")
        raw_images = np.concatenate(self.raw_images) if self.keep_raw else None
        return TrainingSet(
            **cols,
            raw_images=raw_images,
            history=self.history if self.keep_raw else None,
            render_cfg=render_cfg,
        )


def supervise_all(trajs, sim_cfg, sup_cfg):
    """Supervision for each trajectory; unusable ones are skipped and reported."""
    out, drops = [], []
    for traj in trajs:
        try:
            sup = build_supervision(traj, sim_cfg.camera, sup_cfg)
        except NoKeyframes as e:
            drops.extend(getattr(e, "drops", []))
            drops.append({"episode_id": traj.episode_id, "step": None, "reason": "NoKeyframes"})
            continue
        drops.extend(sup.drops)
        out.append((traj, sup))
    return out, drops
