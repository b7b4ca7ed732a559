"""Unrelated-task accuracy with one universal image per behaviour.

    python3 scripts/unrelated_tasks.py [--config configs/demo.toml] [--tasks 14000]

The demo config is re-used with its corpus behaviour swapped; models are
re-planted for each behaviour.
"""

import argparse
import dataclasses

from imgsteer import config, experiments as E
from imgsteer.corpus import BEHAVIORS, generate_unrelated_tasks
from imgsteer.evaluation import random_image, unrelated_task_eval


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/demo.toml")
    ap.add_argument("--tasks", type=int, default=14000)
    args = ap.parse_args()

    base = config.load(args.config)
    tasks = generate_unrelated_tasks(args.tasks, seed=base.eval.task_seed)
    rnd = random_image(base.eval.random_seed)
    for behavior in sorted(BEHAVIORS):
        cfg = dataclasses.replace(base, corpus=dataclasses.replace(base.corpus, behavior=behavior))
        prep = E.prepare(cfg)
        res = E.run_universal(prep)
        for spec, model in zip(cfg.models, prep.models):
            a_img = unrelated_task_eval(res.image, model, tasks)
            a_rnd = unrelated_task_eval(rnd, model, tasks)
            print(f"{behavior:<12} {spec.name}: image {a_img:.4f}  random {a_rnd:.4f}  diff {a_img - a_rnd:+.4f}")


if __name__ == "__main__":
    main()
