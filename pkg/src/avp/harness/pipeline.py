"""Experiment steps: data generation, supervision shards, training, evaluation, ablations.

Everything lives under ``cfg.experiment.out_dir``::

    data/manifest.json            episodes, training pairs, evaluation task sets
    data/trajectories.jsonl       expert trajectory log
    data/calibration.txt          camera model
    data/obs/<episode>.bin        zlib-compressed float32 frames of one episode
    shards/<prompt>/shard-NNNN.avpd, shards/<prompt>/supervision_report.json
    runs/<prompt>/<mode>-seed<k>/checkpoint.avpc, curve.json, eval-<mode>.json
    ablate/report.json

Every JSON output carries the resolved config, and no output depends on the
clock, so (config, seed) reproduces the same bytes.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import AVPError, ConfigError, InfeasibleTask
from ..learn.checkpoint import load_checkpoint, save_checkpoint
from ..learn.data import TrainingSet, TrainingSetBuilder, labeled_samples, supervise_all
from ..learn.model import ModelParams
from ..learn.rollout import PolicySpec, policy_rollout
from ..learn.train import fit
from ..render import RenderConfig, to_ppm
from ..sim import evaluate_episode, expert_final_scene, init_scene, sample_task, scripted_expert
from ..task import DIRECT, TWO_STAGE, TaskSpec
from ..trajio import read_calibration, read_dataset, read_trajectory_log, write_calibration, write_dataset, write_trajectory_log
from .config import ExperimentConfig, config_from_echo, run_config
from .metrics import MetricsTable

EVAL_MODES = ("seen", "unseen-direct")
SEED_SPACE = 2**31


def _dump_json(doc, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def data_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "data"


def prompt_tag(rcfg: RenderConfig) -> str:
    """Directory name for a visual prompt configuration."""
    if rcfg.prompt_type == "none":
        return "none"
    tag = f"{rcfg.prompt_type}-m{rcfg.memory_depth}"
    if rcfg.prompt_type == "boxmask":
        tag += f"-a{rcfg.alpha:.2f}"
    return tag


def run_dir(run_cfg: ExperimentConfig) -> Path:
    t = run_cfg.train
    return run_cfg.out_dir / "runs" / prompt_tag(run_cfg.render) / f"{t.mode}-seed{t.seed}"


def policy_spec(cfg: ExperimentConfig) -> PolicySpec:
    return PolicySpec(cfg.sim, cfg.supervision, cfg.render, cfg.train)


# ---------------------------------------------------------------- observations


def _obs_path(root: Path, episode_id: str) -> Path:
    return root / "obs" / f"{episode_id}.bin"


def _write_frames(path: Path, frames) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.stack(frames), dtype="<f4")
    path.write_bytes(zlib.compress(arr.tobytes(), 6))


class FrameStore:
    """Resolves ``obs/<episode>.bin#<index>`` references, one episode cached at a time."""

    def __init__(self, root: Path, shape: tuple):
        self.root = Path(root)
        self.shape = tuple(shape)
        self._name = None
        self._frames = None

    def __call__(self, ref: str) -> np.ndarray:
        name, _, idx = ref.partition("#")
        if name != self._name:
            raw = zlib.decompress((self.root / name).read_bytes())
            self._frames = np.frombuffer(raw, dtype="<f4").reshape(-1, *self.shape)
            self._name = name
        return self._frames[int(idx)].astype(np.float32)


def frame_shape(cfg: ExperimentConfig) -> tuple:
    cam = cfg.sim.camera
    return (3, cam.image_height, cam.image_width)


# ---------------------------------------------------------------- data generation


def _expert_episode(cfg: ExperimentConfig, rng, index: int):
    sim = cfg.sim
    while True:
        scene_seed = int(rng.integers(SEED_SPACE))
        scene = init_scene(scene_seed, sim)
        task = sample_task(rng, scene, sim, TWO_STAGE)
        expert_seed = int(rng.integers(SEED_SPACE))
        try:
            traj = scripted_expert(scene, task, sim, rng=expert_seed, episode_id=f"ep{index:05d}")
        except InfeasibleTask:
            continue
        return scene_seed, expert_seed, traj


def _unseen_direct_tasks(cfg: ExperimentConfig, train_pairs: set, n: int) -> list:
    """``n`` Direct tasks on fresh scenes, uniform over admissible pairs never used in training."""
    sim = cfg.sim
    rng = np.random.default_rng([cfg.experiment.data_seed, 1])
    out = []
    while len(out) < n:
        scene_seed = int(rng.integers(SEED_SPACE))
        scene = init_scene(scene_seed, sim)
        occupied = sorted(int(c) for c in scene.piece_cell)
        free = [c for c in range(sim.n_board) if c not in set(occupied)]
        pairs = [(s, t) for s in occupied for t in free if (s, t) not in train_pairs]
        if not pairs:
            continue
        s, t = pairs[int(rng.integers(len(pairs)))]
        out.append({"scene_seed": scene_seed, "task": TaskSpec(s, t, DIRECT).to_dict()})
    return out


def _seen_tasks(cfg: ExperimentConfig, train_pairs: set, n: int) -> list:
    """``n`` TwoStage tasks on fresh scenes, drawn from the training pairs."""
    sim = cfg.sim
    rng = np.random.default_rng([cfg.experiment.data_seed, 2])
    pairs = sorted(train_pairs)
    out = []
    while len(out) < n:
        scene_seed = int(rng.integers(SEED_SPACE))
        scene = init_scene(scene_seed, sim)
        try:
            task = sample_task(rng, scene, sim, TWO_STAGE, pairs=pairs)
        except InfeasibleTask:
            continue
        out.append({"scene_seed": scene_seed, "task": task.to_dict()})
    return out


def gen_data(cfg: ExperimentConfig) -> dict:
    """Expert TwoStage episodes, their logs and frames, and the train/eval manifest."""
    root = data_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "calibration.txt", "w") as f:
        write_calibration(cfg.sim.camera, f)
    rng = np.random.default_rng([cfg.experiment.data_seed, 0])
    episodes, trajs = [], []
    for i in range(cfg.experiment.train_episodes):
        scene_seed, expert_seed, traj = _expert_episode(cfg, rng, i)
        _write_frames(_obs_path(root, traj.episode_id), [s.observation for s in traj.steps])
        episodes.append(
            {
                "episode_id": traj.episode_id,
                "scene_seed": scene_seed,
                "expert_seed": expert_seed,
                "task": traj.task.to_dict(),
                "steps": len(traj.steps),
            }
        )
        for s in traj.steps:
            s.observation = None
        trajs.append(traj)
    log = root / "trajectories.jsonl"
    if trajs:
        with open(log, "w") as f:
            write_trajectory_log(trajs, f, lambda tr, k: f"obs/{tr.episode_id}.bin#{k}")
    elif log.exists():
        log.unlink()
    pairs = {(e["task"]["source_cell"], e["task"]["target_cell"]) for e in episodes}
    n_eval = cfg.experiment.eval_tasks if pairs else 0
    manifest = {
        "config": cfg.echo(),
        "episodes": episodes,
        "train_pairs": [list(p) for p in sorted(pairs)],
        "eval": {
            "unseen-direct": _unseen_direct_tasks(cfg, pairs, n_eval),
            "seen": _seen_tasks(cfg, pairs, n_eval),
        },
    }
    _dump_json(manifest, root / "manifest.json")
    return manifest


def load_manifest(cfg: ExperimentConfig) -> dict:
    path = data_dir(cfg) / "manifest.json"
    if not path.exists():
        raise AVPError(f"no dataset at {path.parent}; run gen-data first")
    return json.loads(path.read_text())


def load_trajectories(cfg: ExperimentConfig, with_frames: bool = True) -> list:
    root = data_dir(cfg)
    log = root / "trajectories.jsonl"
    if not log.exists():
        return []
    with open(root / "calibration.txt") as f:
        cam = read_calibration(f)
    if cam != cfg.sim.camera:
        raise ConfigError("stored calibration differs from the configured camera")
    loader = FrameStore(root, frame_shape(cfg)) if with_frames else None
    with open(log) as f:
        return read_trajectory_log(f, loader)


def _episode_frames(cfg: ExperimentConfig, traj) -> None:
    store = FrameStore(data_dir(cfg), frame_shape(cfg))
    for s in traj.steps:
        s.observation = store(s.obs_ref)


# ---------------------------------------------------------------- supervision


def shard_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "shards" / prompt_tag(cfg.render)


def _episode_samples(cfg: ExperimentConfig, traj, sup):
    _episode_frames(cfg, traj)
    try:
        return list(labeled_samples(traj, sup, cfg.sim, cfg.supervision, cfg.render, cfg.train.horizon))
    finally:
        for s in traj.steps:
            s.observation = None


def make_supervision(cfg: ExperimentConfig) -> dict:
    """Write labeled-sample shards for ``cfg.render`` and a report of dropped labels."""
    trajs = load_trajectories(cfg, with_frames=False)
    supervised, drops = supervise_all(trajs, cfg.sim, cfg.supervision)
    out = shard_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob("shard-*.avpd"):
        old.unlink()
    per = cfg.experiment.shard_episodes
    shards, n_samples = [], 0
    for k in range(0, len(supervised), per):
        samples = []
        for traj, sup in supervised[k : k + per]:
            samples.extend(_episode_samples(cfg, traj, sup))
        name = f"shard-{k // per:04d}.avpd"
        with open(out / name, "wb") as f:
            write_dataset(samples, f)
        shards.append({"file": name, "samples": len(samples)})
        n_samples += len(samples)
    report = {
        "config": cfg.echo(),
        "episodes": len(trajs),
        "supervised_episodes": len(supervised),
        "samples": n_samples,
        "shards": shards,
        "supervision_drops": drops,
    }
    _dump_json(report, out / "supervision_report.json")
    return report


def training_set_from_shards(cfg: ExperimentConfig) -> TrainingSet:
    src = shard_dir(cfg)
    files = sorted(src.glob("shard-*.avpd"))
    if not files:
        raise AVPError(f"no dataset shards in {src}; run make-supervision first")
    builder = TrainingSetBuilder(cfg.sim, cfg.supervision, keep_raw=cfg.train.mode == "primpred")
    for path in files:
        with open(path, "rb") as f:
            builder.add_many(read_dataset(f))
    return builder.build(cfg.render)


def training_set_from_logs(cfg: ExperimentConfig, supervised=None) -> TrainingSet:
    """The rows :func:`make_supervision` would write, built in memory without shards."""
    if supervised is None:
        supervised, _ = supervise_all(load_trajectories(cfg, with_frames=False), cfg.sim, cfg.supervision)
    builder = TrainingSetBuilder(cfg.sim, cfg.supervision, keep_raw=cfg.train.mode == "primpred")
    for traj, sup in supervised:
        builder.add_many(_episode_samples(cfg, traj, sup))
    return builder.build(cfg.render)


# ---------------------------------------------------------------- training


def train(cfg: ExperimentConfig, mode: Optional[str] = None, seed: Optional[int] = None, ds=None, on_log=None):
    """Train one policy; writes its checkpoint and loss curve. Returns ``(params, run_dir)``."""
    rc = run_config(cfg, mode or cfg.train.mode, cfg.experiment.seeds[0] if seed is None else seed)
    if ds is None:
        ds = training_set_from_shards(rc)
    params, curve = fit(ds, rc.sim, rc.supervision, rc.train, on_log=on_log)
    out = run_dir(rc)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "checkpoint.avpc", rc.echo())
    _dump_json({"config": rc.echo(), "curve": curve}, out / "curve.json")
    return params, out


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalJob:
    params: Optional[ModelParams]
    cfg: ExperimentConfig
    primitives: str


def _rollout_one(job: EvalJob, index: int, item: dict):
    scene = init_scene(item["scene_seed"], job.cfg.sim)
    task = TaskSpec.from_dict(item["task"])
    if job.params is None:
        traj = scripted_expert(scene, task, job.cfg.sim, rng=[item["scene_seed"], 1], render=False)
        return evaluate_episode(expert_final_scene(scene, traj, job.cfg.sim), task, job.cfg.sim)
    rng = np.random.default_rng([job.cfg.train.seed, 2, index])
    result, _ = policy_rollout(job.params, scene, task, policy_spec(job.cfg), rng, primitives=job.primitives)
    return result


_JOB: Optional[EvalJob] = None


def _pool_init(job):
    global _JOB
    _JOB = job


def _pool_run(arg):
    return _rollout_one(_JOB, *arg)


def rollout_tasks(job: EvalJob, tasks: list, workers: int = 1) -> list:
    """EpisodeResults of ``tasks`` in order; ``workers > 1`` fans episodes out to processes."""
    args = list(enumerate(tasks))
    if workers <= 1 or len(args) < 2:
        return [_rollout_one(job, i, t) for i, t in args]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(workers, initializer=_pool_init, initargs=(job,)) as pool:
        return pool.map(_pool_run, args)


def eval_tasks(manifest: dict, mode: str) -> list:
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    tasks = manifest["eval"][mode]
    if mode == "unseen-direct":
        train_pairs = {tuple(p) for p in manifest["train_pairs"]}
        for e in manifest["episodes"]:
            train_pairs.add((e["task"]["source_cell"], e["task"]["target_cell"]))
        for item in tasks:
            t = item["task"]
            if (t["source_cell"], t["target_cell"]) in train_pairs or t["waypoint_mode"] != DIRECT:
                raise AVPError(f"evaluation task {t} overlaps the training pairs")
    return tasks


def evaluate(params, run_cfg: ExperimentConfig, mode: str, primitives: str = "predicted", manifest=None) -> list:
    manifest = load_manifest(run_cfg) if manifest is None else manifest
    tasks = eval_tasks(manifest, mode)
    return rollout_tasks(EvalJob(params, run_cfg, primitives), tasks, run_cfg.experiment.workers)


def evaluate_expert(cfg: ExperimentConfig, mode: str, manifest=None) -> list:
    """The scripted demonstrator on the evaluation tasks (harness plumbing check)."""
    return evaluate(None, cfg, mode, manifest=manifest)


def load_run(ckpt, cfg: Optional[ExperimentConfig] = None):
    """Parameters and run config of a checkpoint.

    With ``cfg`` the checkpoint must have been trained from it (up to mode and
    seed); otherwise CheckpointMismatch is raised.
    """
    params, echo = load_checkpoint(ckpt)
    stored = config_from_echo(echo)
    if cfg is not None:
        expect = run_config(cfg, stored.train.mode, stored.train.seed).echo()
        params, echo = load_checkpoint(ckpt, expect_config=expect)
    return params, stored


def cmd_eval(ckpts, mode: str, cfg: Optional[ExperimentConfig] = None, primitives: str = "predicted", out=None):
    """One table row averaged over the given checkpoints (one per seed)."""
    ckpts = [Path(c) for c in ckpts]
    per_seed, run_cfgs = {}, []
    for c in ckpts:
        params, rc = load_run(c, cfg)
        if rc.train.seed in per_seed:
            raise ConfigError(f"two checkpoints share seed {rc.train.seed}")
        per_seed[rc.train.seed] = evaluate(params, rc, mode, primitives)
        run_cfgs.append(rc)
    rc = run_cfgs[0]
    table = MetricsTable()
    table.add(f"{prompt_tag(rc.render)}/{rc.train.mode}", per_seed)
    extra = {"eval_mode": mode, "primitives": primitives, "config": rc.echo()}
    path = Path(out) if out is not None else ckpts[0].parent / f"eval-{mode}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table.text(extra))
    return table, path


# ---------------------------------------------------------------- experiments


def headline(cfg: ExperimentConfig, modes=("noprim", "primgt"), eval_mode: str = "unseen-direct", log=None) -> MetricsTable:
    """Train every mode for every seed on the generated data and evaluate it.

    Training sets come straight from the logs (identical rows to the shards).
    """
    manifest = load_manifest(cfg)
    supervised, _ = supervise_all(load_trajectories(cfg, with_frames=False), cfg.sim, cfg.supervision)
    table = MetricsTable()
    for mode in modes:
        per_seed = {}
        ds = None
        for seed in cfg.experiment.seeds:
            rc = run_config(cfg, mode, seed)
            if ds is None:
                ds = training_set_from_logs(rc, supervised)
            params, _ = train(cfg, mode, seed, ds=ds)
            per_seed[seed] = evaluate(params, rc, eval_mode, manifest=manifest)
            if log is not None:
                log(f"{mode} seed {seed}: {table_row_text(per_seed[seed])}")
        table.add(f"{prompt_tag(run_config(cfg, mode, 0).render)}/{mode}", per_seed)
    return table


def table_row_text(results) -> str:
    arr = 100.0 * np.mean([(r.instr_ok, r.pick_ok, r.place_ok) for r in results], axis=0)
    return "instr {:.0f} pick {:.0f} place {:.0f}".format(*arr)


def ablation_grid(cfg: ExperimentConfig) -> list:
    """``(row name, render config)`` for every prompt type, opacity and memory setting.

    Opacity only exists for box-mask prompts and memory does not apply to the
    unprompted baseline, which leaves eleven rows.
    """
    base = cfg.render
    rows = [("none", replace(base, prompt_type="none", memory_depth=0))]
    for kind in ("point", "box", "boxmask"):
        alphas = (0.0, 0.7, 0.9) if kind == "boxmask" else (base.alpha,)
        for alpha in alphas:
            for mem in (0, 1):
                r = replace(base, prompt_type=kind, alpha=alpha, memory_depth=mem)
                rows.append((prompt_tag(r), r))
    return rows


def render_key(rcfg: RenderConfig) -> tuple:
    """Configurations with equal keys compose identical images."""
    if rcfg.prompt_type == "none":
        return ("none",)
    kind = rcfg.prompt_type
    if kind == "boxmask" and rcfg.alpha == 0.0:
        kind = "box"
    alpha = rcfg.alpha if kind == "boxmask" else None
    return (kind, alpha, rcfg.memory_depth, rcfg.box_half_width, rcfg.point_radius)


def ablate(cfg: ExperimentConfig, eval_mode: str = "seen", log=None) -> MetricsTable:
    """Train and evaluate one primitive-conditioned policy per prompt configuration.

    The unprompted row is the instruction-conditioned baseline. Rows whose
    prompts render identically share one set of runs.
    """
    manifest = load_manifest(cfg)
    supervised, _ = supervise_all(load_trajectories(cfg, with_frames=False), cfg.sim, cfg.supervision)
    done: dict = {}
    table = MetricsTable()
    for name, rcfg in ablation_grid(cfg):
        key = render_key(rcfg)
        if key not in done:
            per_seed = {}
            mode = "noprim" if rcfg.prompt_type == "none" else "primgt"
            c = replace(cfg, render=rcfg)
            ds = training_set_from_logs(run_config(c, mode, cfg.experiment.seeds[0]), supervised)
            for seed in cfg.experiment.seeds:
                rc = run_config(c, mode, seed)
                params, _ = fit(ds, rc.sim, rc.supervision, rc.train)
                per_seed[seed] = evaluate(params, rc, eval_mode, manifest=manifest)
                if log is not None:
                    log(f"{name} seed {seed}: {table_row_text(per_seed[seed])}")
            done[key] = per_seed
        table.add(name, done[key])
    path = cfg.out_dir / "ablate" / "report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table.text({"eval_mode": eval_mode, "config": cfg.echo()}))
    return table


# ---------------------------------------------------------------- debug renders


def render_prompts(dataset, out, limit: int = 16) -> list:
    """PPM images of the first ``limit`` samples of a shard (or directory of shards)."""
    dataset = Path(dataset)
    files = sorted(dataset.glob("shard-*.avpd")) if dataset.is_dir() else [dataset]
    if not files:
        raise AVPError(f"no dataset shards at {dataset}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in files:
        with open(path, "rb") as f:
            samples = read_dataset(f)
        for s in samples:
            if len(written) >= limit:
                return written
            name = out / f"sample-{len(written):04d}.ppm"
            name.write_bytes(to_ppm(s.observation))
            written.append(name)
    return written
