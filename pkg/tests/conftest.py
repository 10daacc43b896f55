import numpy as np
import pytest

from avp.sim import SimConfig, init_scene, scripted_expert
from avp.task import DIRECT, TWO_STAGE, TaskSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sim_cfg():
    return SimConfig()


def make_task(scene, cfg, mode=TWO_STAGE, via_slot=4, pick=0, place=0):
    occupied = sorted(int(c) for c in scene.piece_cell)
    free = [c for c in range(cfg.n_board) if c not in occupied]
    via = cfg.n_board + via_slot if mode == TWO_STAGE else None
    return TaskSpec(occupied[pick], free[place], mode, via)


@pytest.fixture(scope="session")
def two_stage_episode(sim_cfg):
    scene = init_scene(7, sim_cfg)
    task = make_task(scene, sim_cfg)
    return scene, task, scripted_expert(scene, task, sim_cfg, rng=0, episode_id="fixture")


@pytest.fixture(scope="session")
def direct_episode(sim_cfg):
    scene = init_scene(8, sim_cfg)
    task = make_task(scene, sim_cfg, DIRECT)
    return scene, task, scripted_expert(scene, task, sim_cfg, rng=1, episode_id="direct")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.VERDICTS):
            terminalreporter.write_line(line)
