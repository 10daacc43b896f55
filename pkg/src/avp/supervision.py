"""Primitive labels from robot kinematics.

Gripper transitions mark interaction keyframes; the end-effector position at
each keyframe is projected into the camera and binned on a fixed image grid.
Every step of an episode is then labelled with the primitive of the next
interaction it is heading toward.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AVPError, BehindCamera, NoKeyframes, OffImage
from .geometry import PixelAnchor, project


class Stage(enum.IntEnum):
    PICK = 0
    PLACE = 1


class KeyKind(enum.IntEnum):
    GRASP = 0
    RELEASE = 1


STAGE_OF_KIND = {KeyKind.GRASP: Stage.PICK, KeyKind.RELEASE: Stage.PLACE}


@dataclass(frozen=True)
class SupervisionConfig:
    delta: float = 0.5
    grid_u: int = 32
    grid_v: int = 32
    min_stage_gap: int = 3
    # "command" or "discrepancy" (command minus measured aperture)
    signal: str = "command"
    # True when a falling aperture means the gripper is closing
    closing_decreases: bool = True

    def __post_init__(self):
        if not self.delta > 0:
            raise AVPError("delta must be positive")
        if self.grid_u < 1 or self.grid_v < 1:
            raise AVPError("grid must have at least one bin per axis")
        if self.min_stage_gap < 1:
            raise AVPError("min_stage_gap must be >= 1")
        if self.signal not in ("command", "discrepancy"):
            raise AVPError(f"unknown gripper signal {self.signal!r}")

    @property
    def n_cells(self) -> int:
        return self.grid_u * self.grid_v


@dataclass(frozen=True)
class KeyframeSet:
    indices: tuple = ()
    kinds: tuple = ()

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class PrimitiveLabel:
    stage: Stage
    cell_u: int
    cell_v: int
    cell_index: int
    anchor: PixelAnchor

    def check(self, cfg: SupervisionConfig) -> None:
        if not (0 <= self.cell_u < cfg.grid_u and 0 <= self.cell_v < cfg.grid_v):
            raise AVPError(f"cell ({self.cell_u}, {self.cell_v}) outside {cfg.grid_u}x{cfg.grid_v} grid")
        if self.cell_index != self.cell_v * cfg.grid_u + self.cell_u:
            raise AVPError("cell_index inconsistent with (cell_u, cell_v)")

    def same_target(self, other: PrimitiveLabel) -> bool:
        return (self.stage, self.cell_index) == (other.stage, other.cell_index)


def gripper_signal(traj, selector: str = "command") -> np.ndarray:
    """Per-step gripper signal: commanded aperture, or command minus measurement."""
    cmd = np.array([s.proprio.gripper_cmd for s in traj.steps], dtype=np.float64)
    if selector == "command":
        return cmd
    if selector == "discrepancy":
        meas = np.array([s.proprio.gripper_meas for s in traj.steps], dtype=np.float64)
        return cmd - meas
    raise AVPError(f"unknown gripper signal {selector!r}")


def extract_keyframes(signal, cfg: SupervisionConfig) -> KeyframeSet:
    g = np.asarray(signal, dtype=np.float64)
    if g.ndim != 1 or g.size < 2:
        raise AVPError("signal needs at least two samples")
    dg = np.diff(g)
    raw = np.flatnonzero(np.abs(dg) > cfg.delta) + 1
    kept = []
    for t in raw:
        if not kept or t - kept[-1] >= cfg.min_stage_gap:
            kept.append(int(t))
    kinds = []
    for t in kept:
        closing = (dg[t - 1] < 0) == cfg.closing_decreases
        kinds.append(KeyKind.GRASP if closing else KeyKind.RELEASE)
    return KeyframeSet(tuple(kept), tuple(kinds))


def anchor_for_keyframe(traj, t: int, cam) -> PixelAnchor:
    if not 0 <= t < len(traj.steps):
        raise AVPError(f"step {t} out of range")
    a = project(cam.intrinsics, cam.extrinsic, traj.steps[t].proprio.ee_pos)
    if not (0 <= a.u < cam.image_width and 0 <= a.v < cam.image_height):
        raise OffImage(f"anchor ({a.u:.2f}, {a.v:.2f}) outside {cam.image_width}x{cam.image_height} image")
    return a


def discretize_anchor(a: PixelAnchor, cam, cfg: SupervisionConfig) -> tuple[int, int, int]:
    cu = min(int(math.floor(a.u * cfg.grid_u / cam.image_width)), cfg.grid_u - 1)
    cv = min(int(math.floor(a.v * cfg.grid_v / cam.image_height)), cfg.grid_v - 1)
    return cu, cv, cv * cfg.grid_u + cu


def cell_center(cell_u: int, cell_v: int, cam, cfg: SupervisionConfig) -> PixelAnchor:
    """Pixel center of a grid cell. Depth is unknown and reported as 0."""
    return PixelAnchor(
        (cell_u + 0.5) * cam.image_width / cfg.grid_u,
        (cell_v + 0.5) * cam.image_height / cfg.grid_v,
        0.0,
    )


def label_from_cell(stage, cell_u: int, cell_v: int, cam, cfg: SupervisionConfig) -> PrimitiveLabel:
    """Label whose anchor sits at the cell center (used for predicted primitives)."""
    return PrimitiveLabel(Stage(stage), cell_u, cell_v, cell_v * cfg.grid_u + cell_u, cell_center(cell_u, cell_v, cam, cfg))


def label_for_point(stage, p, cam, cfg: SupervisionConfig) -> PrimitiveLabel:
    """Project a base-frame point and bin it. Raises BehindCamera / OffImage."""
    a = project(cam.intrinsics, cam.extrinsic, p)
    if not (0 <= a.u < cam.image_width and 0 <= a.v < cam.image_height):
        raise OffImage(f"anchor ({a.u:.2f}, {a.v:.2f}) off image")
    cu, cv, ci = discretize_anchor(a, cam, cfg)
    return PrimitiveLabel(Stage(stage), cu, cv, ci, a)


@dataclass
class Supervision:
    """Labels for one trajectory.

    ``labels[k]`` is the k-th retained keyframe as ``(stage_index, t, label)``;
    ``step_stage[t]`` indexes the label that step ``t`` is supervised with.
    """

    episode_id: str
    keyframes: KeyframeSet
    labels: list
    step_stage: list
    drops: list = field(default_factory=list)

    def label_at(self, t: int) -> PrimitiveLabel:
        return self.labels[self.step_stage[t]][2]

    def history_at(self, t: int) -> list:
        """Labels of the stages completed before step ``t``, oldest first."""
        return [lab for _, _, lab in self.labels[: self.step_stage[t]]]


def build_supervision(traj, cam, cfg: SupervisionConfig) -> Supervision:
    signal = gripper_signal(traj, cfg.signal)
    kf = extract_keyframes(signal, cfg)
    labels, drops = [], []
    for t, kind in zip(kf.indices, kf.kinds):
        try:
            a = anchor_for_keyframe(traj, t, cam)
        except (BehindCamera, OffImage) as e:
            drops.append({"episode_id": traj.episode_id, "step": t, "reason": type(e).__name__})
            continue
        cu, cv, ci = discretize_anchor(a, cam, cfg)
        labels.append((len(labels), t, PrimitiveLabel(STAGE_OF_KIND[kind], cu, cv, ci, a)))
    if not labels:
        err = NoKeyframes(f"episode {traj.episode_id!r} yields no usable keyframe")
        err.drops = drops
        raise err
    step_stage = []
    k = 0
    for t in range(len(traj.steps)):
        while k < len(labels) - 1 and labels[k][1] < t:
            k += 1
        step_stage.append(k)
    return Supervision(traj.episode_id, kf, labels, step_stage, drops)
