"""``imgsteer`` command line: extract, optimize, eval, report.

Worker threads for evaluation come from the IMGSTEER_WORKERS environment
variable (default 1).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import artifacts, config as cfgmod
from .corpus import BEHAVIORS, CorpusSplit, generate_behavior_corpus, generate_unrelated_tasks, read_corpus, write_corpus
from .evaluation import EvalMethod, EvalReport, evaluate_methods, random_image, unrelated_task_eval
from .optim import Member, optimize_pgd, optimize_universal
from .steering import compute_steering_vector, get_target_activations, mid_grey

log = logging.getLogger("imgsteer")

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_DIVERGED = 0, 2, 3, 4


class CommandError(RuntimeError):
    pass


def _out(cfg) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def load_corpus(cfg, base_dir: Path) -> CorpusSplit:
    c = cfg.corpus
    if c.path:
        path = Path(c.path)
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise CommandError(
                f"corpus file {path} not found; remove [corpus].path to generate the "
                f"{c.behavior!r} corpus from its seed, or point it at an existing JSONL file")
        split = read_corpus(path)
        if split.behavior != c.behavior:
            raise CommandError(f"corpus {path} holds {split.behavior!r}, config asks for {c.behavior!r}")
        return split
    return generate_behavior_corpus(c.behavior, c.train_count, c.test_count, seed=c.seed)


def build_models(cfg, base_dir: Path) -> list:
    return [m.build(cfg.corpus.behavior, base_dir) for m in cfg.models]


def baseline(cfg) -> np.ndarray:
    return mid_grey(cfg.seed)


def vector_stem(out: Path, model_name: str, behavior: str) -> Path:
    return out / "vectors" / f"{model_name}_{behavior}"


def _load_all_vectors(cfg, out: Path) -> list:
    found = []
    for m in cfg.models:
        stem = vector_stem(out, m.name, cfg.corpus.behavior)
        if not stem.with_suffix(".json").exists():
            raise CommandError(f"missing steering vectors {stem}.json; run `imgsteer extract` first")
        found.append(artifacts.load_vectors(stem))
    return found


# ---------------------------------------------------------------------------
# commands


def cmd_extract(cfg, base_dir: Path) -> int:
    out = _out(cfg)
    split = load_corpus(cfg, base_dir)
    write_corpus(split, out / f"corpus_{split.behavior}.jsonl")
    (out / "vectors").mkdir(exist_ok=True)
    x0 = baseline(cfg)
    for spec, model in zip(cfg.models, build_models(cfg, base_dir)):
        scfg = cfg.steering_for(spec)
        vs = compute_steering_vector(model, split.train, scfg, x0)
        artifacts.save_vectors(vs, vector_stem(out, spec.name, split.behavior))
        msg = f"{spec.name}: {len(split.train)} pairs, layers {list(scfg.layers)}"
        for plant in model.plants:
            if plant.layer in vs.vectors:
                v = vs.vectors[plant.layer]
                cos = float(v @ plant.direction / (np.linalg.norm(v) + 1e-300))
                msg += f", planted-direction cosine {cos:.4f}"
        print(msg)
    return EXIT_OK


def _members(cfg, base_dir: Path, split: CorpusSplit, vectors: list) -> list[Member]:
    x0 = baseline(cfg)
    prompts = [ex.prompt for ex in split.train[: cfg.optimizer.n_prompts]]
    members = []
    for spec, model, vs in zip(cfg.models, build_models(cfg, base_dir), vectors):
        scfg = cfg.steering_for(spec)
        tg = get_target_activations(model, x0, prompts, vs, cfg.optimizer.multiplier, scfg)
        members.append(Member(model, tg, scfg, spec.name))
    return members


def cmd_optimize(cfg, base_dir: Path) -> int:
    out = _out(cfg)
    opt = cfg.optimizer
    if opt.mode == "pgd" and len(cfg.models) != 1:
        raise CommandError(f"PGD mode requires exactly one model, config has {len(cfg.models)}")
    split = load_corpus(cfg, base_dir)
    members = _members(cfg, base_dir, split, _load_all_vectors(cfg, out))
    names = [m.name for m in members]
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    trace = []

    def on_step(it, x, row):
        trace.append(row)
        if opt.checkpoint_every and it % opt.checkpoint_every == 0:
            artifacts.save_image(x, ckpt_dir / f"iter_{it:06d}")
            artifacts.write_trace_csv(trace, names, out / "loss.csv")

    x0 = baseline(cfg)
    try:
        if opt.mode == "pgd":
            params = dataclasses.replace(opt.pgd, seed=cfg.seed)
            result = optimize_pgd(x0, members[0], params, callback=on_step)
        else:
            params = dataclasses.replace(opt.params, seed=cfg.seed)
            result = optimize_universal(x0, members, params, callback=on_step)
    except FloatingPointError as e:
        artifacts.write_trace_csv(trace, names, out / "loss.csv")
        print(f"diverged: {e}; trace of {len(trace)} rows in {out / 'loss.csv'}", file=sys.stderr)
        return EXIT_DIVERGED
    artifacts.write_trace_csv(result.trace, names, out / "loss.csv")
    artifacts.save_image(result.image, out / "image")
    ratio = result.final_loss / result.initial_loss if result.initial_loss > 0 else 0.0
    summary = {
        "mode": opt.mode,
        "models": names,
        "iterations": len(result.trace),
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "ratio": ratio,
        "converged": ratio < opt.converge_ratio,
        "skipped_outer": result.skipped_outer,
        "seed": cfg.seed,
    }
    (out / "optimize.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{opt.mode}: loss {result.initial_loss:.6g} -> {result.final_loss:.6g} (ratio {ratio:.4f})")
    return EXIT_OK if summary["converged"] else EXIT_NOT_CONVERGED


def _resolve_image(cfg, image_arg: str | None) -> tuple[np.ndarray | None, Path | None]:
    path = Path(image_arg) if image_arg else Path(cfg.out) / "image.raw"
    if not image_arg and not path.exists():
        return None, None
    return artifacts.load_image(path), path


def cmd_eval(cfg, base_dir: Path, image_arg: str | None = None) -> int:
    out = _out(cfg)
    split = load_corpus(cfg, base_dir)
    spec_b = BEHAVIORS[split.behavior]
    image, image_path = _resolve_image(cfg, image_arg)
    wanted = cfg.eval.methods
    if "steer_pos" in wanted or "steer_neg" in wanted:
        vectors = _load_all_vectors(cfg, out)
    else:
        vectors = [None] * len(cfg.models)
    if "image" in wanted and image is None:
        raise CommandError("eval method 'image' needs an image: run `imgsteer optimize` or pass --image")
    x0 = baseline(cfg)
    rnd = random_image(cfg.eval.random_seed)
    m = cfg.eval.multiplier
    report = EvalReport(extra={"seed": cfg.seed, "image": str(image_path) if image_path else None})
    for spec, model, vs in zip(cfg.models, build_models(cfg, base_dir), vectors):
        table = {
            "none": lambda: EvalMethod.none(),
            "system_pos": lambda: EvalMethod.system(spec_b.system_pos),
            "system_neg": lambda: EvalMethod.system(spec_b.system_neg),
            "steer_pos": lambda: EvalMethod.steering(vs, abs(m), cfg.steering_for(spec).token_positions),
            "steer_neg": lambda: EvalMethod.steering(vs, -abs(m), cfg.steering_for(spec).token_positions),
            "image": lambda: EvalMethod.with_image(image),
            "random": lambda: EvalMethod.with_image(rnd),
        }
        methods = [(name, table[name]()) for name in wanted]
        if "image" in wanted:
            methods.append(("image_q8", EvalMethod.with_image(artifacts.quantize(image) / 255.0)))
        report.rows.extend(evaluate_methods(model, split.behavior, split.test, methods, x0, cfg.seed))
        if cfg.eval.unrelated_tasks:
            tasks = generate_unrelated_tasks(cfg.eval.unrelated_tasks, cfg.eval.task_seed)
            acc = {"random": unrelated_task_eval(rnd, model, tasks)}
            if image is not None:
                acc["image"] = unrelated_task_eval(image, model, tasks)
            report.extra.setdefault("unrelated_accuracy", {})[spec.name] = acc
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    for r in report.rows:
        print(f"{r.model:>10} {r.behavior:<11} {r.method:<11} BAS {r.bas:.4f}  delta {r.delta:+.4f}")
    return EXIT_OK


def cmd_report(cfg, base_dir: Path) -> int:
    out = _out(cfg)
    path = out / "report.json"
    if not path.exists():
        raise CommandError(f"{path} not found; run `imgsteer eval` first")
    report = EvalReport.from_json(path.read_text())
    keys = sorted({(r.model, r.behavior) for r in report.rows})
    for model, behavior in keys:
        rows = [r for r in report.rows if (r.model, r.behavior) == (model, behavior)]
        svg = artifacts.bar_svg([r.method for r in rows], [r.bas for r in rows],
                                title=f"BAS by method: {model} / {behavior}")
        target = out / f"report_{model}_{behavior}.svg"
        target.write_text(svg)
        print(f"wrote {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imgsteer", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("extract", "compute steering vectors"),
                        ("optimize", "optimise a steering image"),
                        ("eval", "score methods with BAS"),
                        ("report", "render report plots")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name == "optimize":
            p.add_argument("--mode", choices=cfgmod.MODES, default=None)
        if name == "eval":
            p.add_argument("--image", default=None, help="image file (.raw preferred, .png accepted)")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config)
        cfg = cfg.with_overrides(seed=args.seed, out=args.out, mode=getattr(args, "mode", None))
        base_dir = Path(args.config).resolve().parent
        if args.command == "extract":
            return cmd_extract(cfg, base_dir)
        if args.command == "optimize":
            return cmd_optimize(cfg, base_dir)
        if args.command == "eval":
            return cmd_eval(cfg, base_dir, args.image)
        return cmd_report(cfg, base_dir)
    except (CommandError, cfgmod.ConfigError, artifacts.FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
