"""Experiment orchestration: configs, data generation, training, evaluation, ablations, self-test."""

from .config import ExperimentConfig, config_from_echo, load_config, parse_config, run_config
from .metrics import MetricsRow, MetricsTable, SeedRates
from .pipeline import (
    ablate,
    ablation_grid,
    cmd_eval,
    evaluate,
    evaluate_expert,
    gen_data,
    headline,
    make_supervision,
    render_prompts,
    train,
    training_set_from_logs,
    training_set_from_shards,
)
from .selftest import PROPERTIES, run_selftest
