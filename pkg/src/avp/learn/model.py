"""Observation encoder, primitive decoder, flow-matching action expert, and their joint training.

The action expert never sees the instruction in primitive modes: it gets the
pooled, prompt-composed image and the robot state, so everything it knows about
*where* to act arrives through the rendered primitive. The decoder reads the
instruction, the raw image, and the robot state, and predicts the next-stage
primitive as three factorized heads (stage, u-bin, v-bin).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import AVPError, LabelOutOfRange, ShapeMismatch
from ..supervision import PrimitiveLabel, Stage, SupervisionConfig, label_from_cell
from .flow import expert_input, expert_velocity, fm_loss_given, fm_sample
from .nn import AdamState, ParamStore, adam_update_, mlp_backward, mlp_forward

MODES = ("noprim", "primgt", "primpred")
POOL = 4
ACTION_DIM = 4
PROPRIO_DIM = 5
# added to feature standard deviations so constant pixels do not blow up
NORM_FLOOR = 0.05


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 5000
    flow_steps: int = 10
    expert_hidden: tuple = (256, 256)
    decoder_hidden: tuple = (128, 128)
    horizon: int = 8
    seed: int = 0
    mode: str = "primgt"

    def __post_init__(self):
        if self.lam < 0:
            raise AVPError("lambda must be >= 0")
        if self.flow_steps < 1:
            raise AVPError("flow_steps must be >= 1")
        if self.mode not in MODES:
            raise AVPError(f"unknown conditioning mode {self.mode!r}")
        if self.horizon < 1 or self.batch_size < 1:
            raise AVPError("horizon and batch_size must be >= 1")


# ---------------------------------------------------------------- encoding


def pool_image(img) -> np.ndarray:
    """4x4 average pooling per channel, flattened channel-major."""
    img = np.asarray(img)
    c, h, w = img.shape
    if h % POOL or w % POOL:
        raise ShapeMismatch(f"image {h}x{w} is not divisible by the pool size {POOL}")
    return img.reshape(c, h // POOL, POOL, w // POOL, POOL).astype(np.float64).mean(axis=(2, 4)).ravel()


def pool_image_backward(grad_feat, shape) -> np.ndarray:
    """Adjoint of :func:`pool_image`: spread each feature gradient evenly over its block."""
    c, h, w = shape
    g = np.asarray(grad_feat, dtype=np.float64).reshape(c, h // POOL, w // POOL) / (POOL * POOL)
    return np.repeat(np.repeat(g, POOL, axis=1), POOL, axis=2)


def pool_images(imgs) -> np.ndarray:
    imgs = np.asarray(imgs)
    n, c, h, w = imgs.shape
    return imgs.reshape(n, c, h // POOL, POOL, w // POOL, POOL).astype(np.float64).mean(axis=(3, 5)).reshape(n, -1)


def proprio_features(proprio, sim_cfg) -> np.ndarray:
    """End-effector position scaled to [-1, 1] over the table extent, then both apertures in [-1, 1]."""
    ext = np.array(sim_cfg.table_extent, dtype=np.float64)
    ee = 2.0 * (np.asarray(proprio.ee_pos) - ext[:, 0]) / (ext[:, 1] - ext[:, 0]) - 1.0
    return np.concatenate([ee, [2.0 * proprio.gripper_cmd - 1.0, 2.0 * proprio.gripper_meas - 1.0]])


def instruction_encoding(source: int, target: int, n_locations: int) -> np.ndarray:
    """Source one-hot followed by target one-hot over all addressable locations."""
    if not (0 <= source < n_locations and 0 <= target < n_locations):
        raise AVPError("instruction cell out of range")
    out = np.zeros(2 * n_locations)
    out[source] = 1.0
    out[n_locations + target] = 1.0
    return out


@dataclass
class FeatureNorm:
    """Per-feature affine map ``(x - shift) / scale`` applied to pooled image features.

    The default maps [0, 1] onto [-1, 1]. :meth:`fit` uses training-set
    statistics instead, which matters here: the prompt occupies few pixels and
    would otherwise be swamped by high-variance scene content.
    """

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def default(cls, dim: int) -> FeatureNorm:
        return cls(np.full(dim, 0.5), np.full(dim, 0.5))

    @classmethod
    def fit(cls, feats, floor: float = NORM_FLOOR) -> FeatureNorm:
        x = np.asarray(feats, dtype=np.float64)
        return cls(x.mean(axis=0), x.std(axis=0) + floor)

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def copy(self) -> FeatureNorm:
        return FeatureNorm(self.shift.copy(), self.scale.copy())


@dataclass
class ConditioningBundle:
    obs_feat: np.ndarray
    proprio_feat: np.ndarray
    instr_feat: Optional[np.ndarray] = None

    def vector(self, norm: Optional[FeatureNorm] = None) -> np.ndarray:
        norm = norm or FeatureNorm.default(self.obs_feat.shape[-1])
        parts = [norm.apply(self.obs_feat), self.proprio_feat]
        if self.instr_feat is not None:
            parts.append(self.instr_feat)
        return np.concatenate(parts)


def encode_observation(img, proprio, sim_cfg, instr=None) -> ConditioningBundle:
    return ConditioningBundle(pool_image(img), proprio_features(proprio, sim_cfg), instr)


def expert_conditioning(obs_feat, proprio_feat, instr=None, norm: Optional[FeatureNorm] = None) -> np.ndarray:
    """Batched form of :meth:`ConditioningBundle.vector`."""
    obs_feat = np.atleast_2d(obs_feat)
    norm = norm or FeatureNorm.default(obs_feat.shape[1])
    parts = [norm.apply(obs_feat), np.atleast_2d(proprio_feat)]
    if instr is not None:
        parts.append(np.atleast_2d(instr))
    return np.concatenate(parts, axis=1)


def decoder_input(instr, raw_obs_feat, proprio_feat, norm: Optional[FeatureNorm] = None) -> np.ndarray:
    raw_obs_feat = np.atleast_2d(raw_obs_feat)
    norm = norm or FeatureNorm.default(raw_obs_feat.shape[1])
    return np.concatenate([np.atleast_2d(instr), norm.apply(raw_obs_feat), np.atleast_2d(proprio_feat)], axis=1)


def normalize_chunk(chunk, step_size: float) -> np.ndarray:
    chunk = np.asarray(chunk, dtype=np.float64)
    out = chunk.copy()
    out[..., :3] = chunk[..., :3] / step_size
    out[..., 3] = 2.0 * chunk[..., 3] - 1.0
    return out


def denormalize_chunk(z, step_size: float) -> np.ndarray:
    z = np.clip(np.asarray(z, dtype=np.float64), -1.0, 1.0)
    out = z.copy()
    out[..., :3] = z[..., :3] * step_size
    out[..., 3] = 0.5 * (z[..., 3] + 1.0)
    return out


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ModelDims:
    obs_dim: int
    instr_dim: int
    grid_u: int
    grid_v: int
    horizon: int
    expert_hidden: tuple = (256, 256)
    decoder_hidden: tuple = (128, 128)
    expert_sees_instruction: bool = False

    @property
    def chunk_dim(self) -> int:
        return self.horizon * ACTION_DIM

    @property
    def cond_dim(self) -> int:
        return self.obs_dim + PROPRIO_DIM + (self.instr_dim if self.expert_sees_instruction else 0)

    def net_sizes(self) -> dict:
        return {
            "expert": [self.chunk_dim + 1 + self.cond_dim, *self.expert_hidden, self.chunk_dim],
            "decoder": [self.instr_dim + self.obs_dim + PROPRIO_DIM, *self.decoder_hidden, 2 + self.grid_u + self.grid_v],
        }

    @classmethod
    def build(cls, sim_cfg, sup_cfg: SupervisionConfig, train_cfg: TrainConfig) -> ModelDims:
        cam = sim_cfg.camera
        obs_dim = 3 * (cam.image_height // POOL) * (cam.image_width // POOL)
        return cls(
            obs_dim,
            2 * sim_cfg.n_locations,
            sup_cfg.grid_u,
            sup_cfg.grid_v,
            train_cfg.horizon,
            tuple(train_cfg.expert_hidden),
            tuple(train_cfg.decoder_hidden),
            train_cfg.mode == "noprim",
        )


class ModelParams:
    """Expert and decoder weights in one flat store, Adam state over the same vector,
    and the fixed feature normalizers of both networks' image inputs."""

    def __init__(self, dims: ModelDims, seed: Optional[int] = 0):
        self.dims = dims
        self.store = ParamStore(dims.net_sizes())
        if seed is not None:
            self.store.init(np.random.default_rng(seed))
        self.adam = AdamState.zeros(self.store.size)
        self.expert_norm = FeatureNorm.default(dims.obs_dim)
        self.decoder_norm = FeatureNorm.default(dims.obs_dim)

    def fit_normalizers(self, expert_obs, raw_obs) -> None:
        """Standardize image features with statistics of the training rows."""
        self.expert_norm = FeatureNorm.fit(expert_obs)
        self.decoder_norm = FeatureNorm.fit(raw_obs)

    @property
    def expert(self):
        return self.store.nets["expert"]

    @property
    def decoder(self):
        return self.store.nets["decoder"]

    @property
    def flat(self) -> np.ndarray:
        return self.store.flat

    @property
    def grad(self) -> np.ndarray:
        return self.store.grad

    def section(self, name: str) -> slice:
        return self.store.slices[name]

    def copy(self) -> ModelParams:
        out = ModelParams(self.dims, seed=None)
        out.store.flat[:] = self.store.flat
        out.store.grad[:] = self.store.grad
        out.adam = self.adam.copy()
        out.expert_norm = self.expert_norm.copy()
        out.decoder_norm = self.decoder_norm.copy()
        return out


# ---------------------------------------------------------------- decoder


def decoder_forward(layers, instr, raw_obs_feat, proprio_feat, grid_u: int, grid_v: int, norm=None):
    """Logits of the stage (2), u-bin and v-bin heads, plus the forward cache."""
    x = decoder_input(instr, raw_obs_feat, proprio_feat, norm)
    out, cache = mlp_forward(layers, x)
    if out.shape[1] != 2 + grid_u + grid_v:
        raise ShapeMismatch(f"decoder emits {out.shape[1]} logits, grid needs {2 + grid_u + grid_v}")
    return (out[:, :2], out[:, 2 : 2 + grid_u], out[:, 2 + grid_u :]), cache


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _label_targets(labels, heads) -> np.ndarray:
    if isinstance(labels, PrimitiveLabel):
        labels = [labels]
    if len(labels) and isinstance(labels[0], PrimitiveLabel):
        labels = [(int(l.stage), l.cell_u, l.cell_v) for l in labels]
    y = np.asarray(labels, dtype=np.int64).reshape(-1, 3)
    for k, h in enumerate(heads):
        n = np.atleast_2d(h).shape[1]
        if np.any((y[:, k] < 0) | (y[:, k] >= n)):
            raise LabelOutOfRange(f"label index outside head {k} with {n} classes")
    return y


def ce_loss(logits, labels):
    """Summed cross-entropy of the three heads, averaged over the batch.

    ``labels`` is a PrimitiveLabel, a list of them, or ``(batch, 3)`` ints of
    (stage, cell_u, cell_v). Returns ``(loss, (d_stage, d_u, d_v))``.
    """
    heads = [np.atleast_2d(h) for h in logits]
    y = _label_targets(labels, heads)
    n = y.shape[0]
    loss = 0.0
    grads = []
    for k, z in enumerate(heads):
        if z.shape[0] != n:
            raise ShapeMismatch("logit rows and labels disagree")
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        loss += float(np.sum(lse - z[np.arange(n), y[:, k]])) / n
        g = softmax(z)
        g[np.arange(n), y[:, k]] -= 1.0
        grads.append(g / n)
    return loss, tuple(grads)


def predict_cells(logits) -> np.ndarray:
    """Head-wise argmax as ``(batch, 3)`` ints of (stage, cell_u, cell_v)."""
    return np.stack([np.argmax(np.atleast_2d(h), axis=1) for h in logits], axis=1)


# ---------------------------------------------------------------- training


@dataclass
class Batch:
    """Stacked training rows.

    ``expert_obs`` are pooled features of the image the expert is conditioned
    on (prompt-composed, or raw for the baseline). ``chunks`` are normalized and
    flattened. ``indices`` identify rows for the predicted-primitive renderer.
    """

    expert_obs: np.ndarray
    raw_obs: np.ndarray
    proprio: np.ndarray
    instr: np.ndarray
    labels: np.ndarray
    chunks: np.ndarray
    indices: Optional[np.ndarray] = None

    def __len__(self):
        return self.chunks.shape[0]


def train_step(
    params: ModelParams,
    batch: Batch,
    cfg: TrainConfig,
    rng,
    render_predicted: Optional[Callable] = None,
) -> dict:
    """One Adam step on ``L = L_act + lam * L_vp``; updates ``params`` in place.

    In ``primpred`` mode ``render_predicted(indices, cells)`` must return pooled
    features of each row's raw image composed with the predicted primitive;
    nothing is differentiated through that rendering.
    """
    d = params.dims
    if len(batch) == 0:
        raise AVPError("empty batch")
    logits, dcache = decoder_forward(
        params.decoder, batch.instr, batch.raw_obs, batch.proprio, d.grid_u, d.grid_v, params.decoder_norm
    )
    l_vp, dlogits = ce_loss(logits, batch.labels)
    dgrads, _ = mlp_backward(params.decoder, dcache, cfg.lam * np.concatenate(dlogits, axis=1))

    expert_obs = batch.expert_obs
    if cfg.mode == "primpred":
        if render_predicted is None:
            raise AVPError("primpred mode needs a renderer for predicted primitives")
        expert_obs = render_predicted(batch.indices, predict_cells(logits))
    cond = expert_conditioning(
        expert_obs, batch.proprio, batch.instr if d.expert_sees_instruction else None, params.expert_norm
    )
    x0 = rng.standard_normal(batch.chunks.shape)
    tau = rng.uniform(0.0, 1.0, size=(len(batch), 1))
    l_act, egrads, _ = fm_loss_given(params.expert, cond, batch.chunks, x0, tau)

    params.store.set_grads("decoder", dgrads)
    params.store.set_grads("expert", egrads)
    adam_update_(params.store.flat, params.store.grad, params.adam, cfg.lr)
    return {"L_act": l_act, "L_vp": l_vp, "L": l_act + cfg.lam * l_vp}


# ---------------------------------------------------------------- inference


def predict_label(params: ModelParams, instr, raw_obs_feat, proprio_feat, cam, sup_cfg) -> PrimitiveLabel:
    logits, _ = decoder_forward(
        params.decoder, instr, raw_obs_feat, proprio_feat, sup_cfg.grid_u, sup_cfg.grid_v, params.decoder_norm
    )
    st, cu, cv = predict_cells(logits)[0]
    return label_from_cell(Stage(int(st)), int(cu), int(cv), cam, sup_cfg)


def sample_chunk(params: ModelParams, cond_vec, steps: int, rng) -> np.ndarray:
    """Normalized action chunk ``(horizon, 4)`` for one conditioning vector."""
    d = params.dims
    z = fm_sample(expert_velocity(params.expert), np.atleast_2d(cond_vec), steps, rng, (1, d.chunk_dim), clip=(-1.0, 1.0))
    return z.reshape(d.horizon, ACTION_DIM)
