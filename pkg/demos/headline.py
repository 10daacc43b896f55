"""Spatial generalization experiment at full default scale.

Trains the instruction-conditioned baseline and the primitive-conditioned
policy on two-stage demonstrations only, then evaluates both on direct
transitions between location pairs never seen in training. Takes about
eight minutes on one core. Usage::

    python3 demos/headline.py [out_dir]
"""

import sys
import time

from avp.harness import ExperimentConfig, pipeline


def main(out_dir="avp-headline"):
    cfg = ExperimentConfig().with_section("experiment", out_dir=out_dir)
    t0 = time.perf_counter()

    def log(msg):
        print(f"[{time.perf_counter() - t0:6.0f} s] {msg}", flush=True)

    pipeline.gen_data(cfg)
    log("data generated")
    table = pipeline.headline(cfg, log=log)
    print(table.summary())
    path = cfg.out_dir / "headline.json"
    path.write_text(table.text({"eval_mode": "unseen-direct", "config": cfg.echo()}))
    print(f"report written to {path}")


if __name__ == "__main__":
    main(*sys.argv[1:])
