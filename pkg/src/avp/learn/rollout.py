"""Closed-loop execution of a trained policy in the simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..render import RenderConfig
from ..sim import SceneState, SimConfig, evaluate_episode, render_camera, step
from ..supervision import Stage, SupervisionConfig, label_for_point
from .data import compose_prompt
from .model import (
    ModelParams,
    TrainConfig,
    decoder_forward,
    denormalize_chunk,
    expert_conditioning,
    instruction_encoding,
    pool_image,
    predict_label,
    proprio_features,
    sample_chunk,
)


@dataclass(frozen=True)
class PolicySpec:
    sim: SimConfig = field(default_factory=SimConfig)
    supervision: SupervisionConfig = field(default_factory=SupervisionConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def default_budget(task, sim_cfg: SimConfig) -> int:
    """Step budget: 64 steps per leg, about twice what the scripted expert needs."""
    return 64 * len(task.legs())


def oracle_label(scene: SceneState, leg, sim_cfg: SimConfig, sup_cfg: SupervisionConfig):
    """Ground-truth next-stage primitive from the simulator state."""
    src, dst = leg
    holding = scene.held >= 0
    loc, stage = (dst, Stage.PLACE) if holding else (src, Stage.PICK)
    return label_for_point(stage, sim_cfg.cell_point(loc, sim_cfg.grasp_height), sim_cfg.camera, sup_cfg)


def policy_rollout(
    params: ModelParams,
    scene: SceneState,
    task,
    spec: PolicySpec,
    rng,
    budget: int | None = None,
    primitives: str = "predicted",
    trace: list | None = None,
):
    """Run the policy on ``task`` and score the final scene.

    Every ``horizon`` steps the decoder re-predicts the primitive (or, with
    ``primitives="oracle"``, the simulator supplies it), the image is composed,
    and a fresh action chunk is sampled. The episode ends at the first release
    anywhere but the task's staging slot, or when the budget runs out.
    Two-stage tasks switch to their second leg once the piece is released on
    the staging slot.
    """
    rng = np.random.default_rng(rng)
    sim_cfg, sup_cfg, rcfg, tcfg = spec.sim, spec.supervision, spec.render, spec.train
    cam = sim_cfg.camera
    budget = default_budget(task, sim_cfg) if budget is None else budget
    legs = task.legs()
    leg = 0
    history = []
    current = None
    use_prompt = tcfg.mode != "noprim"
    n = 0
    done = False
    while n < budget and not done:
        raw = render_camera(scene, cam, sim_cfg)
        pfeat = proprio_features(scene.proprio(), sim_cfg)
        instr = instruction_encoding(*legs[leg], sim_cfg.n_locations)
        if use_prompt:
            if primitives == "oracle":
                label = oracle_label(scene, legs[leg], sim_cfg, sup_cfg)
            else:
                label = predict_label(params, instr, pool_image(raw), pfeat, cam, sup_cfg)
            if current is not None and not label.same_target(current):
                history.append(current)
            current = label
            obs = compose_prompt(raw, label, history, rcfg, cam, sup_cfg)
            cond = expert_conditioning(pool_image(obs), pfeat, norm=params.expert_norm)
        else:
            cond = expert_conditioning(pool_image(raw), pfeat, instr, params.expert_norm)
        chunk = denormalize_chunk(sample_chunk(params, cond, tcfg.flow_steps, rng), sim_cfg.step_size)
        if trace is not None:
            trace.append({"step": n, "label": current, "chunk": chunk})
        for a in chunk:
            held_before = scene.held
            scene = step(scene, a, sim_cfg)
            n += 1
            if held_before >= 0 and scene.held < 0:
                on_via = task.two_stage and scene.piece_cell[held_before] == task.via_cell
                if on_via and leg == 0:
                    leg = 1
                else:
                    done = True
                    break
            if n >= budget:
                break
    return evaluate_episode(scene, task, sim_cfg), scene
