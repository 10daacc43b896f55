"""Toy tabletop pick-and-place world, a scripted demonstrator, and a camera renderer.

The table is the plane ``z = 0`` of the robot-base frame. Board cells form a
``board_u x board_v`` grid; one extra row of staging slots sits just off the
board, nearer the robot. Location indices address board cells first
(``j * board_u + i``) and then the staging slots.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import AVPError, InfeasibleTask, TooManyPieces
from .geometry import CameraIntrinsics, look_at, project
from .task import DIRECT, TWO_STAGE, TaskSpec
from .trajio import CameraModel, ProprioState, Step, Trajectory

BACKGROUND = 0.3
DOT = 0.1
PIECE_RADIUS_PX = 2.0
# measured aperture never drops below this while a piece is between the fingers
HELD_APERTURE = 0.25


def default_camera(board_center=(0.0, 0.30), distance=0.5, elevation_deg=45.0) -> CameraModel:
    """Single fixed camera on the robot side, looking down at the board."""
    el = math.radians(elevation_deg)
    target = np.array([board_center[0], board_center[1] - 0.03, 0.0])
    eye = target + distance * np.array([0.0, -math.cos(el), math.sin(el)])
    return CameraModel("cam0", CameraIntrinsics(85.0, 85.0, 32.0, 32.0), look_at(eye, target), 64, 64)


@dataclass(frozen=True)
class SimConfig:
    board_u: int = 9
    board_v: int = 10
    spacing: float = 0.03
    board_center: tuple = (0.0, 0.30)
    # staging row distance from the first board row, in cell spacings
    slot_offset: float = 2.0
    step_size: float = 0.02
    grasp_tol: Optional[float] = None
    place_tol: Optional[float] = None
    travel_height: float = 0.06
    grasp_height: float = 0.01
    home: tuple = (0.0, 0.22, 0.10)
    table_extent: tuple = ((-0.20, 0.20), (0.10, 0.50), (0.0, 0.20))
    noise: float = 0.001
    dt: float = 0.1
    n_pieces: int = 8
    # fraction of the remaining gap the measured aperture closes per step
    gripper_lag: float = 0.3
    # the demonstrator moves this fraction of the remaining horizontal error per step
    approach_gain: float = 0.5
    # the demonstrator treats a waypoint as reached within this distance per axis
    waypoint_tol: float = 0.003
    # steps the demonstrator waits at grasp height before actuating the gripper
    settle_steps: int = 2
    camera: CameraModel = field(default_factory=default_camera)

    def __post_init__(self):
        if self.grasp_tol is None:
            object.__setattr__(self, "grasp_tol", 0.4 * self.spacing)
        if self.place_tol is None:
            object.__setattr__(self, "place_tol", 0.5 * self.spacing)
        if not (self.grasp_tol > 0 and self.place_tol > 0):
            raise AVPError("tolerances must be positive")
        if not self.camera.extrinsic.is_valid(1e-6):
            raise AVPError("camera extrinsic is not a rigid transform")

    @property
    def n_board(self) -> int:
        return self.board_u * self.board_v

    @property
    def n_slots(self) -> int:
        return self.board_u

    @property
    def n_locations(self) -> int:
        return self.n_board + self.n_slots

    @cached_property
    def location_xy(self) -> np.ndarray:
        """(n_locations, 2) table coordinates of every board cell and staging slot."""
        s = self.spacing
        i = np.arange(self.board_u) - (self.board_u - 1) / 2
        j = np.arange(self.board_v) - (self.board_v - 1) / 2
        bx = self.board_center[0] + s * np.tile(i, self.board_v)
        by = self.board_center[1] + s * np.repeat(j, self.board_u)
        sy = self.board_center[1] + s * (j[0] - self.slot_offset)
        xs = np.concatenate([bx, self.board_center[0] + s * i])
        ys = np.concatenate([by, np.full(self.board_u, sy)])
        return np.column_stack([xs, ys])

    def is_slot(self, loc: int) -> bool:
        return loc >= self.n_board

    def cell_point(self, loc: int, z: float = 0.0) -> np.ndarray:
        x, y = self.location_xy[loc]
        return np.array([x, y, z])

    def clamp_position(self, p: np.ndarray) -> np.ndarray:
        lo = np.array([e[0] for e in self.table_extent])
        hi = np.array([e[1] for e in self.table_extent])
        return np.minimum(np.maximum(p, lo), hi)


@dataclass(eq=False)
class SceneState:
    piece_xy: np.ndarray
    # location index per piece; -1 while held or when dropped between cells
    piece_cell: np.ndarray
    start_cell: tuple
    ee: np.ndarray
    gripper: float = 1.0
    gripper_meas: float = 1.0
    held: int = -1
    attach_log: tuple = ()

    def copy(self) -> SceneState:
        return replace(self, piece_xy=self.piece_xy.copy(), piece_cell=self.piece_cell.copy(), ee=self.ee.copy())

    def piece_at(self, loc: int) -> int:
        hit = np.flatnonzero(self.piece_cell == loc)
        return int(hit[0]) if hit.size else -1

    def occupied(self, loc: int) -> bool:
        return self.piece_at(loc) >= 0

    def proprio(self) -> ProprioState:
        return ProprioState(self.ee.copy(), float(self.gripper), float(self.gripper_meas))

    def same_as(self, other: SceneState) -> bool:
        return (
            np.array_equal(self.piece_xy, other.piece_xy)
            and np.array_equal(self.piece_cell, other.piece_cell)
            and np.array_equal(self.ee, other.ee)
            and self.gripper == other.gripper
            and self.gripper_meas == other.gripper_meas
            and self.held == other.held
            and self.attach_log == other.attach_log
        )


@dataclass(frozen=True)
class EpisodeResult:
    instr_ok: bool
    pick_ok: bool
    place_ok: bool


def init_scene(seed, cfg: SimConfig, n_pieces: Optional[int] = None) -> SceneState:
    n = cfg.n_pieces if n_pieces is None else n_pieces
    if n > cfg.n_board:
        raise TooManyPieces(f"{n} pieces do not fit on {cfg.n_board} board cells")
    rng = np.random.default_rng(seed)
    cells = rng.choice(cfg.n_board, size=n, replace=False).astype(np.int64)
    return SceneState(
        piece_xy=cfg.location_xy[cells].copy(),
        piece_cell=cells,
        start_cell=tuple(int(c) for c in cells),
        ee=np.array(cfg.home, dtype=np.float64),
    )


def clamp_action(action, cfg: SimConfig) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(4)
    out = np.empty(4)
    out[:3] = np.clip(a[:3], -cfg.step_size, cfg.step_size)
    out[3] = min(max(a[3], 0.0), 1.0)
    return out


def step(scene: SceneState, action, cfg: SimConfig) -> SceneState:
    """Advance one control step. ``action = (dx, dy, dz, gripper_command)``."""
    a = clamp_action(action, cfg)
    s = scene.copy()
    s.ee = cfg.clamp_position(s.ee + a[:3])
    s.gripper = float(a[3])
    m0 = s.gripper_meas
    meas = m0 + cfg.gripper_lag * (s.gripper - m0)
    if s.held >= 0:
        meas = max(meas, HELD_APERTURE)
        # the piece falls once the fingers have physically opened
        if s.gripper >= 0.5 and meas >= 0.5:
            _release(s, cfg)
    elif m0 >= 0.5 > meas:
        # fingers physically closing over a piece grab it
        d = np.hypot(*(s.piece_xy - s.ee[:2]).T)
        if d.size and d.min() <= cfg.grasp_tol:
            k = int(np.argmin(d))
            s.held = k
            s.piece_cell[k] = -1
            s.attach_log = s.attach_log + (k,)
            meas = max(meas, HELD_APERTURE)
    s.gripper_meas = float(meas)
    if s.held >= 0:
        s.piece_xy[s.held] = s.ee[:2]
    return s


def _release(s: SceneState, cfg: SimConfig) -> None:
    k = s.held
    s.held = -1
    d = np.hypot(*(cfg.location_xy - s.ee[:2]).T)
    loc = int(np.argmin(d))
    if d[loc] <= cfg.place_tol and not s.occupied(loc):
        s.piece_cell[k] = loc
        s.piece_xy[k] = cfg.location_xy[loc]
    else:
        s.piece_xy[k] = s.ee[:2]


def replay(scene: SceneState, actions, cfg: SimConfig) -> SceneState:
    for a in actions:
        scene = step(scene, a, cfg)
    return scene


def piece_color(piece_id: int) -> tuple:
    hue = 0.5 + 0.35 * ((piece_id * 0.618034) % 1.0)
    return colorsys.hsv_to_rgb(hue, 0.6, 0.95)


class _Painter:
    """Caches the static part of the camera image for one (config, camera)."""

    def __init__(self, cfg: SimConfig, cam: CameraModel):
        self.cfg = cfg
        self.cam = cam
        h, w = cam.image_height, cam.image_width
        base = np.full((3, h, w), BACKGROUND, dtype=np.float32)
        for loc in range(cfg.n_locations):
            a = project(cam.intrinsics, cam.extrinsic, cfg.cell_point(loc))
            i, j = int(math.floor(a.u)), int(math.floor(a.v))
            if 0 <= i < w and 0 <= j < h:
                base[:, j, i] = DOT
        self.base = base
        r = int(math.floor(PIECE_RADIUS_PX))
        di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
        keep = di**2 + dj**2 <= PIECE_RADIUS_PX**2
        self.stencil = (di[keep], dj[keep])

    def disc(self, img, p, color):
        try:
            a = project(self.cam.intrinsics, self.cam.extrinsic, p)
        except AVPError:
            return
        i = int(math.floor(a.u)) + self.stencil[0]
        j = int(math.floor(a.v)) + self.stencil[1]
        ok = (i >= 0) & (i < img.shape[2]) & (j >= 0) & (j < img.shape[1])
        img[:, j[ok], i[ok]] = np.asarray(color, dtype=np.float32)[:, None]


_PAINTERS: dict = {}


def _painter(cfg: SimConfig, cam: CameraModel) -> _Painter:
    key = (id(cfg), id(cam))
    p = _PAINTERS.get(key)
    if p is None or p.cam is not cam or p.cfg is not cfg:
        if len(_PAINTERS) > 64:
            _PAINTERS.clear()
        p = _PAINTERS[key] = _Painter(cfg, cam)
    return p


def render_camera(scene: SceneState, cam: CameraModel, cfg: SimConfig) -> np.ndarray:
    """64x64 RGB observation: gray table, dark location dots, colored piece discs."""
    painter = _painter(cfg, cam)
    img = painter.base.copy()
    for k in range(len(scene.piece_xy)):
        if k == scene.held:
            continue
        x, y = scene.piece_xy[k]
        painter.disc(img, (x, y, 0.0), piece_color(k))
    if scene.held >= 0:
        painter.disc(img, scene.ee, piece_color(scene.held))
    return img


def evaluate_episode(scene: SceneState, task: TaskSpec, cfg: SimConfig) -> EpisodeResult:
    try:
        src = scene.start_cell.index(task.source_cell)
    except ValueError:
        raise AVPError(f"no piece started on source cell {task.source_cell}") from None
    instr_ok = bool(scene.attach_log) and scene.attach_log[0] == src
    pick_ok = src in scene.attach_log
    dist = float(np.hypot(*(scene.piece_xy[src] - cfg.location_xy[task.target_cell])))
    place_ok = pick_ok and scene.held != src and dist <= cfg.place_tol
    return EpisodeResult(bool(instr_ok), bool(pick_ok), bool(place_ok))


def sample_task(rng, scene: SceneState, cfg: SimConfig, mode: str = TWO_STAGE, pairs=None) -> TaskSpec:
    """Draw a feasible task on ``scene``.

    ``pairs`` restricts (source, target) board cells; the source must hold a
    piece and the target must be free. Two-stage tasks get a uniformly drawn
    staging slot.
    """
    occupied = {int(c) for c in scene.piece_cell if c >= 0}
    if pairs is None:
        src = int(rng.choice(sorted(occupied)))
        free = [c for c in range(cfg.n_board) if c not in occupied]
        tgt = int(rng.choice(free))
    else:
        ok = [p for p in pairs if p[0] in occupied and p[1] not in occupied]
        if not ok:
            raise InfeasibleTask("no admissible (source, target) pair on this scene")
        src, tgt = ok[int(rng.integers(len(ok)))]
    if mode == TWO_STAGE:
        via = cfg.n_board + int(rng.integers(cfg.n_slots))
        return TaskSpec(int(src), int(tgt), TWO_STAGE, via)
    return TaskSpec(int(src), int(tgt), DIRECT)


def scripted_expert(
    scene: SceneState,
    task: TaskSpec,
    cfg: SimConfig,
    rng=None,
    episode_id: str = "episode",
    render: bool = True,
) -> Trajectory:
    """Demonstrate ``task`` from ``scene``.

    Each leg visits the source and then the target. At each it moves above the
    location at travel height, descends, settles for ``cfg.settle_steps``,
    ramps the gripper over three steps, and lifts. Horizontal motion closes
    ``cfg.approach_gain`` of the remaining error per step (clipped to the step
    size); position deltas carry Gaussian jitter of scale ``cfg.noise``.
    """
    if not scene.occupied(task.source_cell):
        raise InfeasibleTask(f"source cell {task.source_cell} is empty")
    if scene.occupied(task.target_cell):
        raise InfeasibleTask(f"target cell {task.target_cell} is occupied")
    if task.two_stage and scene.occupied(task.via_cell):
        raise InfeasibleTask(f"via cell {task.via_cell} is occupied")
    if scene.held >= 0:
        raise InfeasibleTask("gripper already holds a piece")
    rng = np.random.default_rng(rng)
    cam = cfg.camera
    steps = []
    state = scene.copy()
    gain = np.array([cfg.approach_gain, cfg.approach_gain, 1.0])

    def record():
        obs = render_camera(state, cam, cfg) if render else None
        steps.append(Step(len(steps) * cfg.dt, state.proprio(), obs))

    def push(a):
        nonlocal state
        a = clamp_action(a, cfg)
        steps[-1].action = a
        state = step(state, a, cfg)
        record()

    def move_to(goal):
        for _ in range(500):
            err = goal - state.ee
            if np.max(np.abs(err)) <= cfg.waypoint_tol:
                return
            d = np.clip(gain * err, -cfg.step_size, cfg.step_size) + cfg.noise * rng.standard_normal(3)
            push([*d, state.gripper])
        raise InfeasibleTask("expert failed to reach a waypoint")

    def hold(goal, values):
        # keep servoing on the waypoint while the gripper command follows ``values``
        for g in values:
            d = np.clip(gain * (goal - state.ee), -cfg.step_size, cfg.step_size)
            push([*(d + cfg.noise * rng.standard_normal(3)), g])

    record()
    for src, dst in task.legs():
        for loc, closing in ((src, True), (dst, False)):
            x, y = cfg.location_xy[loc]
            move_to(np.array([x, y, cfg.travel_height]))
            low = np.array([x, y, cfg.grasp_height])
            move_to(low)
            hold(low, [state.gripper] * cfg.settle_steps)
            hold(low, (0.4, 0.1, 0.0) if closing else (0.6, 0.9, 1.0))
            move_to(np.array([x, y, cfg.travel_height]))
    if not evaluate_episode(state, task, cfg).place_ok:
        raise InfeasibleTask("expert rollout did not place the piece")
    return Trajectory(episode_id, cam.camera_id, task, steps)


def expert_final_scene(scene: SceneState, traj: Trajectory, cfg: SimConfig) -> SceneState:
    return replay(scene, traj.actions(), cfg)
