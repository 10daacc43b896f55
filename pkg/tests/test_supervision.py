import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avp.errors import AVPError, NoKeyframes
from avp.geometry import PixelAnchor, project
from avp.supervision import (
    KeyKind,
    Stage,
    SupervisionConfig,
    build_supervision,
    cell_center,
    discretize_anchor,
    extract_keyframes,
    gripper_signal,
)
from avp.trajio import ProprioState, Step, Trajectory
from avp.task import TaskSpec


def scan(signal, delta, gap):
    """Oracle: every above-threshold jump not within ``gap`` of the previous kept one."""
    kept = []
    for t in range(1, len(signal)):
        if abs(signal[t] - signal[t - 1]) > delta and (not kept or t - kept[-1] >= gap):
            kept.append(t)
    return kept


def test_keyframes_match_brute_force_scan(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        sig = rng.choice([0.0, 0.1, 0.5, 0.9, 1.0], size=n) if rng.uniform() < 0.5 else rng.uniform(0, 1, n)
        delta, gap = float(rng.uniform(0.01, 0.95)), int(rng.integers(1, 6))
        kf = extract_keyframes(sig, SupervisionConfig(delta=delta, min_stage_gap=gap))
        assert list(kf.indices) == scan(sig, delta, gap)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 5.0), st.integers(1, 8), st.integers(1, 12), st.floats(0.001, 0.999))
def test_square_wave_count_law(amplitude, periods, half, frac):
    sig = np.tile(np.r_[np.full(half, amplitude), np.zeros(half)], periods)
    kf = extract_keyframes(sig, SupervisionConfig(delta=frac * amplitude, min_stage_gap=1))
    assert len(kf) == 2 * periods - 1
    # falling edges close the gripper, rising edges open it, alternating
    assert kf.kinds == tuple(KeyKind.GRASP if i % 2 == 0 else KeyKind.RELEASE for i in range(len(kf)))


def test_delta_at_amplitude_finds_nothing():
    sig = np.tile([1.0, 1.0, 0.0, 0.0], 3)
    assert len(extract_keyframes(sig, SupervisionConfig(delta=1.0))) == 0


def test_opening_direction_convention_flips_kinds():
    sig = [0.0, 0.0, 1.0, 1.0]
    a = extract_keyframes(sig, SupervisionConfig())
    b = extract_keyframes(sig, SupervisionConfig(closing_decreases=False))
    assert a.kinds == (KeyKind.RELEASE,) and b.kinds == (KeyKind.GRASP,)


def test_signal_needs_two_samples():
    with pytest.raises(AVPError):
        extract_keyframes([1.0], SupervisionConfig())


@pytest.mark.parametrize("kw", [{"delta": 0.0}, {"grid_u": 0}, {"min_stage_gap": 0}, {"signal": "torque"}])
def test_config_validation(kw):
    with pytest.raises(AVPError):
        SupervisionConfig(**kw)


def test_discretize_and_cell_center(sim_cfg):
    cam, cfg = sim_cfg.camera, SupervisionConfig()
    assert discretize_anchor(PixelAnchor(0.0, 0.0, 1.0), cam, cfg) == (0, 0, 0)
    assert discretize_anchor(PixelAnchor(63.999, 63.999, 1.0), cam, cfg) == (31, 31, 1023)
    assert discretize_anchor(PixelAnchor(5.0, 3.0, 1.0), cam, cfg) == (2, 1, 34)
    c = cell_center(2, 1, cam, cfg)
    assert (c.u, c.v) == (5.0, 3.0)
    for u in range(cfg.grid_u):
        for v in (0, 17):
            a = cell_center(u, v, cam, cfg)
            assert discretize_anchor(a, cam, cfg)[:2] == (u, v)


def interaction_points(task, cfg):
    """Where the expert's gripper acts: every leg grasps at its source, releases at its target."""
    out = []
    for src, dst in task.legs():
        out += [(Stage.PICK, src), (Stage.PLACE, dst)]
    return [(stage, cfg.cell_point(loc, cfg.grasp_height)) for stage, loc in out]


def test_two_stage_episode_yields_four_labels_near_true_points(two_stage_episode, sim_cfg):
    _, task, traj = two_stage_episode
    cfg = SupervisionConfig()
    sup = build_supervision(traj, sim_cfg.camera, cfg)
    assert sup.drops == [] and len(sup.labels) == 4
    cam = sim_cfg.camera
    for (k, t, lab), (stage, p) in zip(sup.labels, interaction_points(task, sim_cfg)):
        truth = project(cam.intrinsics, cam.extrinsic, p)
        tu, tv, _ = discretize_anchor(truth, cam, cfg)
        assert lab.stage == stage
        assert abs(lab.cell_u - tu) <= 1 and abs(lab.cell_v - tv) <= 1


def test_step_labels_point_at_next_interaction(two_stage_episode, sim_cfg):
    _, _, traj = two_stage_episode
    sup = build_supervision(traj, sim_cfg.camera, SupervisionConfig())
    key_steps = [t for _, t, _ in sup.labels]
    for t in range(len(traj.steps)):
        k = sup.step_stage[t]
        # label of the first keyframe at or after t (the last one holds afterwards)
        want = next((i for i, kt in enumerate(key_steps) if kt >= t), len(key_steps) - 1)
        assert k == want
        assert [h.stage for h in sup.history_at(t)] == [lab.stage for _, _, lab in sup.labels[:k]]


def test_discrepancy_signal_finds_same_number_of_events(two_stage_episode, sim_cfg):
    _, _, traj = two_stage_episode
    sig = gripper_signal(traj, "discrepancy")
    assert sig.shape == (len(traj.steps),)
    kf = extract_keyframes(sig, SupervisionConfig(delta=0.3, signal="discrepancy"))
    assert len(kf) >= 1


def flat_trajectory(n=5):
    steps = [Step(0.1 * i, ProprioState(np.array([0.0, 0.3, 0.05]), 1.0, 1.0)) for i in range(n)]
    return Trajectory("flat", "cam0", TaskSpec(0, 1), steps)


def test_no_gripper_events_raises(sim_cfg):
    with pytest.raises(NoKeyframes):
        build_supervision(flat_trajectory(), sim_cfg.camera, SupervisionConfig())


def test_off_image_keyframes_are_dropped_and_reported(sim_cfg):
    traj = flat_trajectory(8)
    for i, s in enumerate(traj.steps):
        ee = np.array([0.0, 0.3, 0.01]) if i < 4 else np.array([5.0, 0.3, 0.01])
        s.proprio = ProprioState(ee, 1.0 if i in (0, 1, 2, 5) else 0.0, 1.0)
    sup = build_supervision(traj, sim_cfg.camera, SupervisionConfig())
    assert [t for _, t, _ in sup.labels] == [3]
    # jumps at 3, 5 and 6; 5 is too close to 3, and 6 is off the image
    assert sup.drops == [{"episode_id": "flat", "step": 6, "reason": "OffImage"}]
