"""Fast invariant suite behind ``avp selftest``.

Each property compares the implementation with an independent oracle (a
homogeneous-matrix projection, a brute-force keyframe scan, central finite
differences, a closed-form flow) or checks an exact identity or round trip.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..geometry import CameraIntrinsics, PixelAnchor, RigidTransform, project, unproject
from ..learn import flow, model, nn
from ..learn.checkpoint import checkpoint_bytes, params_from_bytes
from ..render import RenderConfig, render_box, render_box_mask
from ..sim import SimConfig, init_scene, scripted_expert
from ..supervision import PrimitiveLabel, Stage, SupervisionConfig, build_supervision, extract_keyframes
from ..task import TWO_STAGE, TaskSpec
from ..trajio import (
    LabeledSample,
    read_calibration,
    read_dataset,
    read_trajectory_log,
    write_calibration,
    write_dataset,
    write_trajectory_log,
)
from .metrics import MetricsTable

FD_STEP = 1e-5
FD_TOL = 1e-4
# gradients smaller than this are compared in absolute terms
FD_FLOOR = 1e-6
N_POINTS = 20


@dataclass(frozen=True)
class PropertyResult:
    name: str
    ok: bool
    detail: str
    seconds: float


# ---------------------------------------------------------------- oracles and helpers


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def homogeneous_projection(k: CameraIntrinsics, t: RigidTransform, p) -> np.ndarray:
    """``K [R | t] [p; 1]`` divided by its last coordinate."""
    kmat = np.array([[k.fx, 0.0, k.cx], [0.0, k.fy, k.cy], [0.0, 0.0, 1.0]])
    rt = np.hstack([t.rotation, t.translation[:, None]])
    x = kmat @ rt @ np.append(p, 1.0)
    return np.array([x[0] / x[2], x[1] / x[2], x[2]])


def brute_force_keyframes(signal, delta: float, gap: int) -> list:
    """Every index whose step exceeds ``delta``, skipping ones too close to the last kept."""
    kept = []
    for t in range(1, len(signal)):
        if abs(signal[t] - signal[t - 1]) > delta:
            if all(t - k >= gap for k in kept[-1:]):
                kept.append(t)
    return kept


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), FD_FLOOR)


def finite_difference_check(f: Callable[[], float], flat: np.ndarray, analytic: np.ndarray, rng, n=N_POINTS) -> float:
    """Worst relative error between ``analytic`` and central differences of ``f`` at ``n`` coordinates of ``flat``."""
    worst = 0.0
    for i in rng.choice(flat.size, size=min(n, flat.size), replace=False):
        old = flat[i]
        flat[i] = old + FD_STEP
        up = f()
        flat[i] = old - FD_STEP
        down = f()
        flat[i] = old
        worst = max(worst, rel_error(analytic[i], (up - down) / (2 * FD_STEP)))
    return worst


def _small_net(rng, sizes):
    store = nn.ParamStore({"net": sizes})
    store.init(rng)
    # nonzero biases exercise the bias gradients too
    for _, b in store.nets["net"]:
        b[...] = 0.1 * rng.standard_normal(b.shape)
    return store


def _flat_grads(store, grads) -> np.ndarray:
    store.set_grads("net", grads)
    return store.grad.copy()


# ---------------------------------------------------------------- properties


def prop_projection(rng) -> str:
    worst_proj = worst_round = 0.0
    for _ in range(100):
        k = CameraIntrinsics(*rng.uniform(50, 500, 2), *rng.uniform(0, 640, 2))
        t = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        cam_p = np.append(rng.uniform(-1, 1, 2), rng.uniform(0.5, 5.0))
        p = t.rotation.T @ (cam_p - t.translation)
        a = project(k, t, p)
        oracle = homogeneous_projection(k, t, p)
        worst_proj = max(worst_proj, float(np.max(np.abs(np.array([a.u, a.v, a.depth]) - oracle))))
        worst_round = max(worst_round, float(np.max(np.abs(unproject(k, t, a) - p))))
    assert worst_proj < 1e-9 and worst_round < 1e-9, f"projection {worst_proj:.3g}, round trip {worst_round:.3g}"
    return f"max error {max(worst_proj, worst_round):.2e}"


def prop_keyframes(rng) -> str:
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        sig = np.round(rng.uniform(0, 1, n), 1) if rng.uniform() < 0.5 else rng.uniform(0, 1, n)
        delta = float(rng.uniform(0.05, 0.9))
        gap = int(rng.integers(1, 5))
        got = list(extract_keyframes(sig, SupervisionConfig(delta=delta, min_stage_gap=gap)).indices)
        want = brute_force_keyframes(sig, delta, gap)
        assert got == want, f"keyframes {got} != brute force {want}"
    for _ in range(50):
        amp = float(rng.uniform(0.1, 2.0))
        half = int(rng.integers(3, 10))
        periods = int(rng.integers(1, 6))
        sig = np.tile(np.r_[np.full(half, amp), np.zeros(half)], periods)
        delta = float(rng.uniform(0.0, amp * 0.999))
        kf = extract_keyframes(sig, SupervisionConfig(delta=delta, min_stage_gap=1))
        assert len(kf.indices) == 2 * periods - 1, "square wave keyframe count"
    return "1000 random signals and 50 square waves"


def prop_expert_gradient(rng) -> str:
    store = _small_net(rng, [7, 16, 16, 5])
    layers = store.nets["net"]
    x = rng.standard_normal((4, 7))
    w = rng.standard_normal((4, 5))

    def f():
        return float(np.sum(w * nn.mlp_forward(layers, x)[0]))

    out, cache = nn.mlp_forward(layers, x)
    grads, dx = nn.mlp_backward(layers, cache, w)
    err = finite_difference_check(f, store.flat, _flat_grads(store, grads), rng)
    err_x = finite_difference_check(f, x.reshape(-1), dx.reshape(-1), rng)
    assert max(err, err_x) < FD_TOL, f"relative error {max(err, err_x):.3g}"
    return f"max relative error {max(err, err_x):.2e}"


def prop_fm_gradient(rng) -> str:
    store = _small_net(rng, [6 + 1 + 3, 16, 6])
    layers = store.nets["net"]
    a = rng.standard_normal((5, 6))
    cond = rng.standard_normal((5, 3))
    x0 = rng.standard_normal(a.shape)
    tau = rng.uniform(size=(5, 1))
    _, grads, _ = flow.fm_loss_given(layers, cond, a, x0, tau)
    err = finite_difference_check(lambda: flow.fm_loss_given(layers, cond, a, x0, tau)[0], store.flat, _flat_grads(store, grads), rng)
    assert err < FD_TOL, f"relative error {err:.3g}"
    return f"max relative error {err:.2e}"


def prop_ce_gradient(rng) -> str:
    heads = [rng.standard_normal((4, 2)), rng.standard_normal((4, 6)), rng.standard_normal((4, 5))]
    labels = np.column_stack([rng.integers(0, 2, 4), rng.integers(0, 6, 4), rng.integers(0, 5, 4)])
    flat = np.concatenate([h.ravel() for h in heads])

    def unpack(v):
        return [v[:8].reshape(4, 2), v[8:32].reshape(4, 6), v[32:].reshape(4, 5)]

    _, grads = model.ce_loss(heads, labels)
    analytic = np.concatenate([g.ravel() for g in grads])
    err = finite_difference_check(lambda: model.ce_loss(unpack(flat), labels)[0], flat, analytic, rng)
    assert err < FD_TOL, f"relative error {err:.3g}"
    return f"max relative error {err:.2e}"


def prop_decoder_pooling_gradient(rng) -> str:
    """Decoder cross-entropy differentiated all the way back to the raw pixels."""
    gu, gv, n_loc = 4, 3, 5
    img = rng.uniform(size=(3, 8, 8))
    instr = model.instruction_encoding(1, 3, n_loc)
    prop = rng.uniform(-1, 1, model.PROPRIO_DIM)
    obs_dim = 3 * 2 * 2
    norm = model.FeatureNorm(rng.uniform(0.2, 0.8, obs_dim), rng.uniform(0.1, 0.5, obs_dim))
    store = _small_net(rng, [2 * n_loc + obs_dim + model.PROPRIO_DIM, 12, 2 + gu + gv])
    layers = store.nets["net"]
    label = [(1, 2, 0)]

    def loss():
        logits, _ = model.decoder_forward(layers, instr, model.pool_image(img), prop, gu, gv, norm)
        return model.ce_loss(logits, label)[0]

    logits, cache = model.decoder_forward(layers, instr, model.pool_image(img), prop, gu, gv, norm)
    _, dl = model.ce_loss(logits, label)
    grads, dx = nn.mlp_backward(layers, cache, np.concatenate(dl, axis=1))
    d_feat = dx[0, 2 * n_loc : 2 * n_loc + obs_dim] / norm.scale
    d_img = model.pool_image_backward(d_feat, img.shape)
    err_p = finite_difference_check(loss, store.flat, _flat_grads(store, grads), rng)
    err_i = finite_difference_check(loss, img.reshape(-1), d_img.reshape(-1), rng)
    assert max(err_p, err_i) < FD_TOL, f"relative error {max(err_p, err_i):.3g}"
    return f"max relative error {max(err_p, err_i):.2e}"


def prop_euler_exact(rng) -> str:
    worst = 0.0
    for steps in (1, 5, 10):
        target = rng.standard_normal((3, 8))

        def field(x, tau, cond):
            return (target - x) / (1.0 - tau)

        got = flow.fm_sample(field, None, steps, np.random.default_rng(steps), target.shape)
        worst = max(worst, float(np.max(np.abs(got - target))))
    assert worst < 1e-9, f"max error {worst:.3g}"
    return f"max error {worst:.2e}"


def prop_fm_permutation(rng) -> str:
    store = _small_net(rng, [4 + 1 + 2, 8, 4])
    a, cond, x0 = rng.standard_normal((6, 4)), rng.standard_normal((6, 2)), rng.standard_normal((6, 4))
    tau = rng.uniform(size=(6, 1))
    perm = rng.permutation(6)
    l1 = flow.fm_loss_given(store.nets["net"], cond, a, x0, tau)[0]
    l2 = flow.fm_loss_given(store.nets["net"], cond[perm], a[perm], x0[perm], tau[perm])[0]
    assert abs(l1 - l2) <= 1e-12 * max(1.0, abs(l1)), f"{l1} != {l2}"
    return "loss unchanged under batch permutation"


def prop_ce_uniform(rng) -> str:
    heads = [np.zeros((3, 2)), np.zeros((3, 7)), np.zeros((3, 4))]
    labels = np.column_stack([rng.integers(0, 2, 3), rng.integers(0, 7, 3), rng.integers(0, 4, 3)])
    loss, _ = model.ce_loss(heads, labels)
    want = math.log(2) + math.log(7) + math.log(4)
    assert abs(loss - want) < 1e-12, f"{loss} != {want}"
    return "uniform logits give ln(classes) per head"


def _random_label(rng, h=64, w=64) -> PrimitiveLabel:
    u, v = rng.uniform(0, w), rng.uniform(0, h)
    return PrimitiveLabel(Stage(int(rng.integers(2))), int(u // 2), int(v // 2), 0, PixelAnchor(u, v, 1.0))


def prop_render_identity(rng) -> str:
    for _ in range(50):
        img = rng.uniform(size=(3, 64, 64)).astype(np.float32)
        lab = _random_label(rng)
        cfg = RenderConfig(prompt_type="boxmask", alpha=0.0, box_half_width=int(rng.integers(1, 9)))
        a, b = render_box_mask(img, lab, cfg), render_box(img, lab, cfg)
        assert a.tobytes() == b.tobytes(), "box-mask with zero opacity differs from box"
    return "50 cases bit-identical"


def _tiny_episode():
    cfg = SimConfig()
    scene = init_scene(3, cfg)
    occupied = sorted(int(c) for c in scene.piece_cell)
    free = [c for c in range(cfg.n_board) if c not in occupied]
    task = TaskSpec(occupied[0], free[0], TWO_STAGE, cfg.n_board + 4)
    return cfg, scripted_expert(scene, task, cfg, rng=0, episode_id="selftest")


def prop_io_roundtrip(rng) -> str:
    cfg, traj = _tiny_episode()
    buf = io.StringIO()
    write_trajectory_log([traj], buf)
    back = read_trajectory_log(buf.getvalue().encode())[0]
    assert np.array_equal(back.ee_positions(), traj.ee_positions()), "log positions"
    assert np.array_equal(back.actions(), traj.actions()), "log actions"
    cbuf = io.StringIO()
    write_calibration(cfg.camera, cbuf)
    assert read_calibration(cbuf.getvalue().encode()) == cfg.camera, "calibration"
    sup = build_supervision(traj, cfg.camera, SupervisionConfig())
    samples = []
    for t in (0, 5):
        samples.append(
            LabeledSample(
                traj.steps[t].observation,
                traj.steps[t].proprio,
                rng.standard_normal(6),
                sup.label_at(t),
                traj.actions()[t : t + 3],
                sup.step_stage[t],
                tuple(sup.history_at(t)),
            )
        )
    sbuf = io.BytesIO()
    write_dataset(samples, sbuf)
    assert read_dataset(sbuf.getvalue()) == samples, "dataset shard"
    dims = model.ModelDims(12, 6, 4, 4, 2, (8,), (8,))
    params = model.ModelParams(dims, seed=1)
    params.adam.t = 3
    params.adam.m[:] = rng.standard_normal(params.adam.m.size)
    data = checkpoint_bytes(params, {"k": 1})
    back_params, echo = params_from_bytes(data)
    assert np.array_equal(back_params.flat, params.flat) and echo == {"k": 1}, "checkpoint"
    assert checkpoint_bytes(back_params, echo) == data, "checkpoint bytes"
    return "log, calibration, shard and checkpoint"


def prop_metrics_avg(rng) -> str:
    from ..sim import EpisodeResult

    table = MetricsTable()
    for name in ("a", "b"):
        per_seed = {s: [EpisodeResult(*(bool(x) for x in rng.integers(0, 2, 3))) for _ in range(7)] for s in range(3)}
        table.add(name, per_seed)
    for r in table.rows:
        assert round(r.avg_rate, 2) == round((r.instr_rate + r.pick_rate + r.place_rate) / 3, 2), "avg"
    return "avg is the mean of the three rates"


def prop_lambda_zero(rng) -> str:
    dims = model.ModelDims(12, 6, 4, 4, 2, (8,), (8,))
    params = model.ModelParams(dims, seed=2)
    n = 5
    batch = model.Batch(
        rng.uniform(size=(n, 12)),
        rng.uniform(size=(n, 12)),
        rng.uniform(-1, 1, (n, model.PROPRIO_DIM)),
        rng.uniform(size=(n, 6)),
        np.column_stack([rng.integers(0, 2, n), rng.integers(0, 4, n), rng.integers(0, 4, n)]),
        rng.uniform(-1, 1, (n, dims.chunk_dim)),
    )
    before = params.flat[params.section("decoder")].copy()
    tcfg = model.TrainConfig(lam=0.0, horizon=2, expert_hidden=(8,), decoder_hidden=(8,))
    model.train_step(params, batch, tcfg, np.random.default_rng(0))
    assert np.array_equal(params.flat[params.section("decoder")], before), "decoder moved"
    return "decoder parameters unchanged"


def prop_pipeline_closure(rng) -> str:
    cfg, traj = _tiny_episode()
    sup = build_supervision(traj, cfg.camera, SupervisionConfig())
    assert not sup.drops and len(sup.labels) == 4, f"{len(sup.labels)} labels, {len(sup.drops)} drops"
    return "two-stage episode yields 4 labels"


PROPERTIES = [
    ("projection_oracle", prop_projection),
    ("keyframe_oracle", prop_keyframes),
    ("expert_mlp_gradient", prop_expert_gradient),
    ("flow_matching_gradient", prop_fm_gradient),
    ("cross_entropy_gradient", prop_ce_gradient),
    ("decoder_pooling_gradient", prop_decoder_pooling_gradient),
    ("euler_exactness", prop_euler_exact),
    ("fm_loss_permutation", prop_fm_permutation),
    ("ce_uniform_logits", prop_ce_uniform),
    ("lambda_zero_fixed_point", prop_lambda_zero),
    ("render_identity", prop_render_identity),
    ("io_round_trip", prop_io_roundtrip),
    ("metrics_average", prop_metrics_avg),
    ("pipeline_closure", prop_pipeline_closure),
]


def run_selftest(properties=None, seed: int = 0, out=None) -> list:
    """Run each property; print one line per property to ``out`` if given."""
    results = []
    for name, fn in properties or PROPERTIES:
        t0 = time.perf_counter()
        try:
            detail = fn(np.random.default_rng(seed))
            ok = True
        except Exception as e:  # a failing property must not stop the rest
            detail = f"{type(e).__name__}: {e}"
            ok = False
        res = PropertyResult(name, ok, detail, time.perf_counter() - t0)
        results.append(res)
        if out is not None:
            print(f"{'PASS' if ok else 'FAIL'}  {name:<26} {detail} ({res.seconds:.2f}s)", file=out, flush=True)
    return results
