"""``avp`` command line entry point."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from ..errors import AVPError
from ..learn.model import MODES
from ..render import PROMPT_TYPES
from . import pipeline
from .config import ExperimentConfig, load_config
from .selftest import run_selftest


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    m = pipeline.gen_data(cfg)
    _say(f"wrote {len(m['episodes'])} episodes and the manifest to {pipeline.data_dir(cfg)}")
    return 0


def cmd_make_supervision(args) -> int:
    cfg = _config(args)
    changes = {"prompt_type": args.prompt}
    if args.alpha is not None:
        changes["alpha"] = args.alpha
    if args.memory is not None:
        changes["memory_depth"] = args.memory
    cfg = replace(cfg, render=replace(cfg.render, **changes))
    rep = pipeline.make_supervision(cfg)
    _say(
        f"wrote {rep['samples']} samples in {len(rep['shards'])} shards to {pipeline.shard_dir(cfg)} "
        f"({len(rep['supervision_drops'])} dropped labels)"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seeds = [args.seed] if args.seed is not None else list(cfg.experiment.seeds)
    for seed in seeds:
        log = (lambda e: _say(f"step {e['step']}: L_act {e['L_act']:.4f} L_vp {e['L_vp']:.4f}")) if args.verbose else None
        _, out = pipeline.train(cfg, args.mode, seed, on_log=log)
        _say(f"seed {seed}: checkpoint in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    table, path = pipeline.cmd_eval(args.ckpt, args.mode, cfg, args.primitives, args.out)
    _say(table.summary())
    _say(f"report: {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    table = pipeline.ablate(cfg, log=_say if args.verbose else None)
    _say(table.summary())
    _say(f"report: {cfg.out_dir / 'ablate' / 'report.json'}")
    return 0


def cmd_render_prompts(args) -> int:
    files = pipeline.render_prompts(args.dataset, args.out, args.limit)
    _say(f"wrote {len(files)} images to {args.out}")
    return 0


def cmd_selftest(args) -> int:
    results = run_selftest(out=sys.stdout)
    failed = [r.name for r in results if not r.ok]
    _say(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avp", description="Visual-primitive policy experiments on a toy tabletop.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="experiment config file (key = value)")
        return sp

    s = with_config(sub.add_parser("gen-data", help="generate expert episodes and the task manifest"))
    s.set_defaults(func=cmd_gen_data)

    s = with_config(sub.add_parser("make-supervision", help="build labeled dataset shards"))
    s.add_argument("--prompt", choices=PROMPT_TYPES, required=True)
    s.add_argument("--alpha", type=float)
    s.add_argument("--memory", type=int)
    s.set_defaults(func=cmd_make_supervision)

    s = with_config(sub.add_parser("train", help="train a policy per seed"))
    s.add_argument("--mode", choices=MODES, required=True)
    s.add_argument("--seed", type=int, help="train only this seed (default: every configured seed)")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate checkpoints (one per seed)")
    s.add_argument("--ckpt", nargs="+", required=True)
    s.add_argument("--mode", choices=pipeline.EVAL_MODES, required=True)
    s.add_argument("--config", help="refuse checkpoints not trained from this config")
    s.add_argument("--primitives", choices=("predicted", "oracle"), default="predicted")
    s.add_argument("--out", help="report path (default: next to the first checkpoint)")
    s.set_defaults(func=cmd_eval)

    s = with_config(sub.add_parser("ablate", help="prompt type, opacity and memory ablation"))
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("render-prompts", help="write PPM images of dataset observations")
    s.add_argument("--dataset", required=True, help="a shard file or a directory of shards")
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, default=16)
    s.set_defaults(func=cmd_render_prompts)

    s = sub.add_parser("selftest", help="run the invariant suite")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AVPError as e:
        print(f"avp {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
