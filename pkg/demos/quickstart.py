"""End-to-end run at toy scale: data, supervision shards, training, evaluation, debug renders.

Takes about a minute on one core. Usage::

    python3 demos/quickstart.py [out_dir]
"""

import sys

from avp.harness import parse_config, pipeline

CONFIG = """
experiment.train_episodes = 40
experiment.eval_tasks = 10
experiment.seeds = (0,)
train.steps = 500
"""


def main(out_dir="avp-quickstart"):
    cfg = parse_config(CONFIG + f'experiment.out_dir = "{out_dir}"\n')
    manifest = pipeline.gen_data(cfg)
    print(f"{len(manifest['episodes'])} expert episodes, {len(manifest['train_pairs'])} training pairs")

    report = pipeline.make_supervision(cfg)
    print(f"{report['samples']} labeled samples, {len(report['supervision_drops'])} dropped labels")

    expert = pipeline.evaluate_expert(cfg, "seen")
    print("scripted expert on seen tasks:", pipeline.table_row_text(expert))

    for mode in ("noprim", "primgt"):
        if mode == "noprim":
            pipeline.make_supervision(cfg.with_section("render", prompt_type="none"))
        _, run = pipeline.train(cfg, mode, 0)
        table, path = pipeline.cmd_eval([run / "checkpoint.avpc"], "seen", cfg)
        print(table.summary())
        print(f"report written to {path}")

    images = pipeline.render_prompts(pipeline.shard_dir(cfg), cfg.out_dir / "prompts", limit=8)
    print(f"{len(images)} prompt renders in {images[0].parent}")


if __name__ == "__main__":
    main(*sys.argv[1:])
