import math

import numpy as np
import pytest

from avp.errors import AVPError, CheckpointMismatch, ChecksumMismatch, LabelOutOfRange, SchemaMismatch, ShapeMismatch, TruncatedFile
from avp.learn import flow, model, nn
from avp.learn.checkpoint import checkpoint_bytes, config_hash, params_from_bytes
from avp.learn.data import TrainingSetBuilder, labeled_samples
from avp.learn.rollout import PolicySpec, policy_rollout
from avp.learn.train import fit
from avp.render import RenderConfig
from avp.sim import init_scene
from avp.supervision import SupervisionConfig, build_supervision
from avp.task import DIRECT, TaskSpec

H = 1e-5


def central_diff(f, x, i):
    old = x.flat[i]
    x.flat[i] = old + H
    up = f()
    x.flat[i] = old - H
    down = f()
    x.flat[i] = old
    return (up - down) / (2 * H)


def assert_grad(f, x, analytic, rng, n=20):
    for i in rng.choice(x.size, size=min(n, x.size), replace=False):
        num = central_diff(f, x, i)
        assert abs(num - analytic.flat[i]) <= 1e-4 * max(abs(num), abs(analytic.flat[i]), 1e-6)


def net(rng, sizes):
    store = nn.ParamStore({"n": sizes})
    store.init(rng)
    for _, b in store.nets["n"]:
        b[...] = 0.1 * rng.standard_normal(b.shape)
    return store


def test_mlp_forward_matches_explicit_layers(rng):
    store = net(rng, [3, 5, 2])
    (w1, b1), (w2, b2) = store.nets["n"]
    x = rng.standard_normal((4, 3))
    out, _ = nn.mlp_forward(store.nets["n"], x)
    np.testing.assert_allclose(out, np.tanh(x @ w1 + b1) @ w2 + b2, atol=1e-14)
    single, _ = nn.mlp_forward(store.nets["n"], x[0])
    np.testing.assert_allclose(single, out[0], atol=1e-14)
    with pytest.raises(ShapeMismatch):
        nn.mlp_forward(store.nets["n"], np.zeros((2, 4)))


def test_mlp_gradients_match_finite_differences(rng):
    store = net(rng, [6, 10, 10, 3])
    layers = store.nets["n"]
    x, w = rng.standard_normal((5, 6)), rng.standard_normal((5, 3))
    f = lambda: float(np.sum(w * nn.mlp_forward(layers, x)[0]))
    _, cache = nn.mlp_forward(layers, x)
    grads, dx = nn.mlp_backward(layers, cache, w)
    store.set_grads("n", grads)
    assert_grad(f, store.flat, store.grad, rng)
    assert_grad(f, x, dx, rng)


def test_fm_loss_gradient_matches_finite_differences(rng):
    store = net(rng, [4 + 1 + 3, 12, 4])
    layers = store.nets["n"]
    a, cond, x0, tau = rng.standard_normal((6, 4)), rng.standard_normal((6, 3)), rng.standard_normal((6, 4)), rng.uniform(size=(6, 1))
    _, grads, per_row = flow.fm_loss_given(layers, cond, a, x0, tau)
    store.set_grads("n", grads)
    assert_grad(lambda: flow.fm_loss_given(layers, cond, a, x0, tau)[0], store.flat, store.grad, rng)
    # loss is the batch mean of squared velocity errors
    pred, _ = nn.mlp_forward(layers, flow.expert_input((1 - tau) * x0 + tau * a, tau, cond))
    np.testing.assert_allclose(per_row, np.sum((pred - (a - x0)) ** 2, axis=1), atol=1e-12)


def test_fm_loss_is_batch_order_invariant(rng):
    store = net(rng, [4 + 1 + 2, 8, 4])
    args = [rng.standard_normal((7, 4)), rng.standard_normal((7, 2)), rng.standard_normal((7, 4)), rng.uniform(size=(7, 1))]
    a, c, x0, tau = args
    p = rng.permutation(7)
    l1 = flow.fm_loss_given(store.nets["n"], c, a, x0, tau)[0]
    l2 = flow.fm_loss_given(store.nets["n"], c[p], a[p], x0[p], tau[p])[0]
    assert l1 == pytest.approx(l2, rel=1e-14)


def test_fm_loss_rng_form_draws_path(rng):
    store = net(rng, [2 + 1 + 1, 4, 2])
    a, cond = rng.standard_normal((3, 2)), rng.standard_normal((3, 1))
    l1, _ = flow.fm_loss(store.nets["n"], cond, a, np.random.default_rng(4))
    g = np.random.default_rng(4)
    x0, tau = flow.draw_path(a, g)
    assert l1 == flow.fm_loss_given(store.nets["n"], cond, a, x0, tau)[0]


@pytest.mark.parametrize("steps", [1, 5, 10])
def test_euler_recovers_point_target_exactly(rng, steps):
    target = rng.standard_normal((2, 8))
    out = flow.fm_sample(lambda x, tau, c: (target - x) / (1 - tau), None, steps, rng, target.shape)
    assert np.max(np.abs(out - target)) < 1e-9


def test_fm_sample_rejects_zero_steps(rng):
    with pytest.raises(ValueError):
        flow.fm_sample(lambda x, t, c: x, None, 0, rng, (1, 2))


def test_ce_loss_uniform_logits_is_log_class_count():
    heads = (np.zeros((2, 2)), np.zeros((2, 32)), np.zeros((2, 32)))
    loss, _ = model.ce_loss(heads, np.array([[0, 5, 7], [1, 31, 0]]))
    assert loss == pytest.approx(math.log(2) + 2 * math.log(32), abs=1e-12)


def test_ce_loss_gradient_and_range_checks(rng):
    heads = [rng.standard_normal((3, 2)), rng.standard_normal((3, 4)), rng.standard_normal((3, 5))]
    y = np.array([[0, 1, 2], [1, 3, 4], [0, 0, 0]])
    _, grads = model.ce_loss(heads, y)
    for k in range(3):
        assert_grad(lambda: model.ce_loss(heads, y)[0], heads[k], grads[k], rng)
    with pytest.raises(LabelOutOfRange):
        model.ce_loss(heads, np.array([[0, 4, 0]]))


def textbook_adam(p, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh, vh = m / (1 - b1**t), v / (1 - b2**t)
    return p - lr * mh / (np.sqrt(vh) + eps), m, v


def test_adam_matches_textbook_update(rng):
    p = rng.standard_normal(50)
    state = nn.AdamState.zeros(50)
    ref_p, m, v = p.copy(), np.zeros(50), np.zeros(50)
    for t in range(1, 6):
        g = rng.standard_normal(50)
        p, state = nn.adam_update(p, g, state, 1e-2)
        ref_p, m, v = textbook_adam(ref_p, g, m, v, t, 1e-2)
    np.testing.assert_allclose(p, ref_p, rtol=1e-12, atol=1e-14)


def test_inplace_adam_is_bit_identical_to_pure(rng):
    p = rng.standard_normal(30)
    q = p.copy()
    s1, s2 = nn.AdamState.zeros(30), nn.AdamState.zeros(30)
    for _ in range(5):
        g = rng.standard_normal(30)
        p, s1 = nn.adam_update(p, g, s1, 3e-3)
        nn.adam_update_(q, g, s2, 3e-3)
    assert p.tobytes() == q.tobytes() and s2.t == 5


def tiny_dims(mode="primgt"):
    return model.ModelDims(12, 6, 4, 4, 2, (8,), (8,), mode == "noprim")


def tiny_batch(rng, n=5, dims=None):
    dims = dims or tiny_dims()
    return model.Batch(
        rng.uniform(size=(n, 12)), rng.uniform(size=(n, 12)), rng.uniform(-1, 1, (n, 5)), rng.uniform(size=(n, 6)),
        np.column_stack([rng.integers(0, 2, n), rng.integers(0, 4, n), rng.integers(0, 4, n)]),
        rng.uniform(-1, 1, (n, dims.chunk_dim)), np.arange(n),
    )


def tiny_train_cfg(**kw):
    return model.TrainConfig(horizon=2, expert_hidden=(8,), decoder_hidden=(8,), **kw)


def test_lambda_zero_leaves_decoder_fixed(rng):
    params = model.ModelParams(tiny_dims(), seed=3)
    dec = params.flat[params.section("decoder")].copy()
    exp = params.flat[params.section("expert")].copy()
    model.train_step(params, tiny_batch(rng), tiny_train_cfg(lam=0.0), np.random.default_rng(0))
    assert np.array_equal(params.flat[params.section("decoder")], dec)
    assert not np.array_equal(params.flat[params.section("expert")], exp)


def test_train_step_gradient_matches_finite_differences(rng):
    params = model.ModelParams(tiny_dims(), seed=1)
    batch = tiny_batch(rng)
    cfg = tiny_train_cfg(lam=0.7, lr=0.0)
    x0 = np.random.default_rng(9).standard_normal(batch.chunks.shape)
    tau = np.random.default_rng(9).uniform(size=(len(batch), 1))

    def total():
        logits, _ = model.decoder_forward(params.decoder, batch.instr, batch.raw_obs, batch.proprio, 4, 4, params.decoder_norm)
        cond = model.expert_conditioning(batch.expert_obs, batch.proprio, None, params.expert_norm)
        return flow.fm_loss_given(params.expert, cond, batch.chunks, x0, tau)[0] + 0.7 * model.ce_loss(logits, batch.labels)[0]

    class Replay:
        def standard_normal(self, shape):
            return x0

        def uniform(self, lo, hi, size):
            return tau

    m = model.train_step(params, batch, cfg, Replay())
    assert m["L"] == pytest.approx(total(), rel=1e-12)
    assert_grad(total, params.flat, params.grad.copy(), rng, n=40)


def test_noprim_expert_sees_instruction():
    d = tiny_dims("noprim")
    assert d.cond_dim == 12 + 5 + 6 and tiny_dims().cond_dim == 12 + 5


def test_feature_norm_fit():
    x = np.array([[0.0, 1.0], [2.0, 1.0]])
    n = model.FeatureNorm.fit(x)
    np.testing.assert_allclose(n.apply(x), [[-1 / 1.05, 0.0], [1 / 1.05, 0.0]])
    np.testing.assert_allclose(model.FeatureNorm.default(2).apply([0.0, 1.0]), [-1.0, 1.0])


def test_chunk_normalization_round_trip(rng):
    chunk = np.column_stack([rng.uniform(-0.02, 0.02, (8, 3)), rng.uniform(0, 1, 8)])
    np.testing.assert_allclose(model.denormalize_chunk(model.normalize_chunk(chunk, 0.02), 0.02), chunk, atol=1e-15)


def test_pool_image_and_adjoint(rng):
    img = rng.uniform(size=(3, 8, 8))
    f = model.pool_image(img)
    assert f.shape == (12,) and f[0] == pytest.approx(img[0, :4, :4].mean())
    g = rng.standard_normal(12)
    # adjoint identity <pool(x), g> == <x, pool^T(g)>
    assert np.dot(f, g) == pytest.approx(np.sum(img * model.pool_image_backward(g, img.shape)), rel=1e-12)
    with pytest.raises(ShapeMismatch):
        model.pool_image(np.zeros((3, 6, 6)))


def test_instruction_encoding():
    e = model.instruction_encoding(2, 4, 5)
    assert e.tolist() == [0, 0, 1, 0, 0, 0, 0, 0, 0, 1]
    with pytest.raises(AVPError):
        model.instruction_encoding(5, 0, 5)


# ---------------------------------------------------------------- data, checkpoints, rollout


@pytest.fixture(scope="module")
def small_set(two_stage_episode, sim_cfg):
    _, _, traj = two_stage_episode
    sup_cfg = SupervisionConfig()
    sup = build_supervision(traj, sim_cfg.camera, sup_cfg)
    rcfg = RenderConfig()
    samples = list(labeled_samples(traj, sup, sim_cfg, sup_cfg, rcfg, 8))
    b = TrainingSetBuilder(sim_cfg, sup_cfg, keep_raw=True)
    b.add_many(samples)
    return traj, sup, samples, b.build(rcfg)


def test_labeled_samples_count_and_targets(small_set):
    traj, sup, samples, ds = small_set
    assert len(samples) == len(traj) - 8 == len(ds)
    acts = traj.actions()
    for t in (0, 17, len(samples) - 1):
        s = samples[t]
        assert np.array_equal(s.action_chunk, acts[t : t + 8])
        assert s.primitive_gt == sup.label_at(t) and s.stage_index == sup.step_stage[t]
        assert s.raw_observation.tobytes() == traj.steps[t].observation.tobytes()
    labels_seen = {(s.stage_index, int(s.primitive_gt.stage)) for s in samples}
    assert labels_seen == {(0, 0), (1, 1), (2, 0), (3, 1)}


def test_instruction_tracks_current_leg(small_set, sim_cfg):
    traj, _, samples, _ = small_set
    legs = traj.task.legs()
    first = model.instruction_encoding(*legs[0], sim_cfg.n_locations)
    second = model.instruction_encoding(*legs[1], sim_cfg.n_locations)
    assert np.array_equal(samples[0].instruction, first)
    assert np.array_equal(samples[-1].instruction, second)


def small_spec(sim_cfg, mode="primgt", steps=30):
    return PolicySpec(sim_cfg, SupervisionConfig(), RenderConfig(), model.TrainConfig(steps=steps, mode=mode, batch_size=16))


def test_fit_is_deterministic(small_set, sim_cfg):
    _, _, _, ds = small_set
    spec = small_spec(sim_cfg)
    a, ca = fit(ds, sim_cfg, spec.supervision, spec.train, log_every=10)
    b, cb = fit(ds, sim_cfg, spec.supervision, spec.train, log_every=10)
    assert a.flat.tobytes() == b.flat.tobytes() and ca == cb and len(ca) == 3


def test_fit_zero_steps_returns_initialization(small_set, sim_cfg):
    _, _, _, ds = small_set
    spec = small_spec(sim_cfg, steps=0)
    p, curve = fit(ds, sim_cfg, spec.supervision, spec.train)
    fresh = model.ModelParams(p.dims, seed=0)
    assert curve == [] and p.flat.tobytes() == fresh.flat.tobytes()


def test_primpred_training_renders_predictions(small_set, sim_cfg):
    _, _, _, ds = small_set
    spec = small_spec(sim_cfg, mode="primpred", steps=3)
    p, _ = fit(ds, sim_cfg, spec.supervision, spec.train)
    assert np.all(np.isfinite(p.flat))
    with pytest.raises(AVPError):
        model.train_step(p, ds.batch([0, 1]), spec.train, np.random.default_rng(0))


def test_checkpoint_round_trip_gives_identical_rollouts(small_set, sim_cfg):
    _, _, _, ds = small_set
    spec = small_spec(sim_cfg)
    params, _ = fit(ds, sim_cfg, spec.supervision, spec.train)
    data = checkpoint_bytes(params, {"run": 1})
    back, echo = params_from_bytes(data)
    assert echo == {"run": 1} and checkpoint_bytes(back, echo) == data
    scene = init_scene(21, sim_cfg)
    occ = sorted(int(c) for c in scene.piece_cell)
    task = TaskSpec(occ[0], next(c for c in range(90) if c not in occ), DIRECT)
    t1, t2 = [], []
    r1, s1 = policy_rollout(params, scene, task, spec, 5, budget=24, trace=t1)
    r2, s2 = policy_rollout(back, scene, task, spec, 5, budget=24, trace=t2)
    assert r1 == r2 and s1.same_as(s2)
    assert all(np.array_equal(a["chunk"], b["chunk"]) for a, b in zip(t1, t2))


def test_checkpoint_errors(small_set, sim_cfg):
    params = model.ModelParams(tiny_dims(), seed=0)
    data = checkpoint_bytes(params, {"a": 1})
    assert data[:4] == b"AVPC"
    with pytest.raises(ChecksumMismatch):
        params_from_bytes(data[:-9] + bytes([data[-9] ^ 1]) + data[-8:])
    with pytest.raises(TruncatedFile):
        params_from_bytes(data[:12])
    with pytest.raises(SchemaMismatch):
        params_from_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointMismatch):
        params_from_bytes(data, expect_config={"a": 2})
    params_from_bytes(data, expect_config={"a": 1})
    assert config_hash({"x": 1, "y": [1, 2]}) == config_hash({"y": [1, 2], "x": 1})


def test_oracle_primitive_rollout_is_seeded(small_set, sim_cfg):
    params = model.ModelParams(model.ModelDims.build(sim_cfg, SupervisionConfig(), model.TrainConfig()), seed=0)
    spec = small_spec(sim_cfg)
    scene = init_scene(3, sim_cfg)
    occ = sorted(int(c) for c in scene.piece_cell)
    task = TaskSpec(occ[0], next(c for c in range(90) if c not in occ), DIRECT)
    r1, s1 = policy_rollout(params, scene, task, spec, 1, budget=16, primitives="oracle")
    r2, s2 = policy_rollout(params, scene, task, spec, 1, budget=16, primitives="oracle")
    assert r1 == r2 and s1.same_as(s2)
