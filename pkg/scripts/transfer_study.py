"""Held-out transfer of the K=2 universal image vs the K=1 image.

    python3 scripts/transfer_study.py [--config configs/demo.toml] [--seeds 101 102 ...]

Prints one row per held-out model and writes transfer.csv next to the
config's output directory.
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from imgsteer import config, experiments as E


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/demo.toml")
    ap.add_argument("--seeds", type=int, nargs="+", default=[101, 102, 103, 104, 105, 106])
    args = ap.parse_args()

    cfg = config.load(args.config)
    prep = E.prepare(cfg)
    k2 = E.run_universal(prep)
    k1 = E.run_universal(prep, names=[cfg.models[0].name])
    print(f"K=2 loss ratio {k2.final_loss / k2.initial_loss:.4f}, K=1 {k1.final_loss / k1.initial_loss:.4f}")

    models = E.held_out_models(cfg, args.seeds)
    table = E.transfer_table({"K2": k2.image, "K1": k1.image}, models, prep.split, cfg.eval.random_seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "transfer.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "random", "k2_image", "k2_delta", "k1_image", "k1_delta"])
        for m, r2, r1 in zip(models, table["K2"], table["K1"]):
            w.writerow([m.config.name, f"{r2.score_random:.6f}", f"{r2.score_image:.6f}", f"{r2.delta:.6f}",
                        f"{r1.score_image:.6f}", f"{r1.delta:.6f}"])
            print(f"{m.config.name:>8}  random {r2.score_random:.3f}  K2 {r2.delta:+.3f}  K1 {r1.delta:+.3f}")
    d2 = np.array([r.delta for r in table["K2"]])
    d1 = np.array([r.delta for r in table["K1"]])
    print(f"negative K2 deltas {np.sum(d2 < 0)}/{len(d2)}; K2 <= K1 in {np.sum(d2 <= d1)}/{len(d2)}")


if __name__ == "__main__":
    main()
