"""Command line entry point: ``numgame gen-data|train|eval|preset|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import experiments
from .errors import NumgameError
from .stimuli import parse_classes


def _area(text: str):
    lo, _, hi = text.partition(",")
    return [float(lo), float(hi or lo)]


def _common(p: argparse.ArgumentParser, game: bool = True) -> None:
    p.add_argument("--config", type=Path, help="TOML file; CLI flags override it")
    p.add_argument("--seed", type=int, help="single seed (replaces the seed list)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--classes", type=str, help="numerosities, e.g. 1..5 or 1,2,4,5")
    p.add_argument("--counts", type=str, help="per-class counts: one number, a list, or a profile name")
    p.add_argument("--canvas", type=int, help="canvas side in pixels")
    p.add_argument("--area", type=_area, help="black-area fraction range, e.g. 0.05,0.10")
    p.add_argument("--data-dir", type=Path, help="shared dataset cache (default: <out>/../datasets)")
    if game:
        p.add_argument("--channel", choices=["discrete", "sketch"])
        p.add_argument("--condition", choices=["same", "diff"])
        p.add_argument("--epochs", type=int)
        p.add_argument("--dump-sketches", type=Path, help="write eval-mode sketches as PNG here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="numgame", description="numerosity referential games")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate (or reuse) a dot-image dataset")
    _common(p, game=False)

    p = sub.add_parser("train", help="train one agent pair")
    _common(p)

    p = sub.add_parser("eval", help="re-evaluate a trained run")
    p.add_argument("run", type=Path, help="cell directory written by train/preset")
    p.add_argument("--classes", type=str)
    p.add_argument("--novel", type=str, help="extra numerosities to include, e.g. 7 or 6,7")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-dir", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("preset", help="run a named experiment preset")
    p.add_argument("name", nargs="?", help="preset name (omit with --list)")
    p.add_argument("--list", action="store_true", help="list presets and exit")
    _common(p)

    p = sub.add_parser("report", help="summarise an experiment directory and render plots")
    p.add_argument("dir", type=Path)
    return parser


def _dataset_overrides(args) -> dict:
    d = {}
    if args.classes:
        d["classes"] = parse_classes(args.classes)
    if args.counts:
        if args.counts.lower() in ("uniform", "increase", "decrease"):
            d["profile"] = args.counts.lower()
        else:
            d["counts"] = args.counts
    if args.canvas:
        d["canvas_side"] = args.canvas
    if args.area:
        d["area_range"] = args.area
    if args.seed is not None and args.command == "gen-data":
        d["seed"] = args.seed
    return d


def _game_overrides(args) -> dict:
    g = {}
    for flag in ("channel", "condition", "epochs"):
        v = getattr(args, flag, None)
        if v is not None:
            g[flag] = v
    if args.classes:
        g["classes"] = parse_classes(args.classes)
    return g


def _settings(args, preset: Optional[str]) -> dict:
    file_cfg = experiments.load_toml(args.config) if args.config else {}
    cli = {"out": args.out, "seed": args.seed, "data_dir": args.data_dir,
           "dump_sketches": getattr(args, "dump_sketches", None),
           "game": _game_overrides(args), "dataset": _dataset_overrides(args)}
    return experiments.merge_settings(preset, file_cfg, cli)


def cmd_gen_data(args) -> int:
    s = _settings(args, None)
    spec = experiments.dataset_spec(s.get("dataset", {}))
    root = Path(s.get("data_dir") or s.get("out") or "runs/datasets")
    ds = experiments.cached_dataset(spec, root)
    print(json.dumps({"dir": str(root / ds.digest), "digest": ds.digest, "classes": ds.classes,
                      "counts": [len(ds.images[c]) for c in ds.classes]}))
    return 0


def cmd_train(args) -> int:
    s = _settings(args, None)
    s.pop("preset", None)
    seeds = s.get("seeds", [0])
    out = Path(s.get("out") or "runs/train")
    data_root = Path(s.get("data_dir") or out.parent / "datasets")
    for seed in seeds:
        target = out if len(seeds) == 1 else out / f"seed{seed}"
        job = experiments.CellJob(preset="train", cell="train", seed=int(seed), game=s.get("game", {}),
                                  dataset=s.get("dataset", {}), novel=[], out_dir=str(target),
                                  data_root=str(data_root),
                                  dump_sketches=str(s["dump_sketches"]) if s.get("dump_sketches") else None)
        scalars = experiments.run_cell(job)
        print(json.dumps({"dir": str(target), **scalars}, default=float))
    return 0


def cmd_eval(args) -> int:
    classes = parse_classes(args.classes) if args.classes else None
    novel = parse_classes(args.novel) if args.novel else []
    data_root = args.data_dir or args.run.parent / "datasets"
    res = experiments.evaluate_cell(args.run, data_root, classes, novel, args.episodes, args.seed, args.out)
    print(json.dumps(res, indent=1))
    return 0


def cmd_preset(args) -> int:
    if args.list or not args.name:
        for name, p in sorted(experiments.PRESETS.items()):
            print(f"{name:24s} {p.description}")
        return 0
    s = _settings(args, args.name)
    s.setdefault("out", Path("runs") / args.name)
    spec = experiments.ExperimentSpec(**s)
    out = experiments.run_preset(spec)
    from .plots import render_plots

    render_plots(out)
    print(json.dumps(json.loads((out / "summary.json").read_text())["aggregate"], indent=1))
    return 0


def cmd_report(args) -> int:
    from .plots import render_plots

    summary = experiments.summarize(args.dir)
    paths = render_plots(args.dir)
    for cell, agg in summary["aggregate"].items():
        parts = [f"{k}={v['mean']:.3f}±{v['std']:.3f}" for k, v in agg.items()
                 if k in ("accuracy", "cond_entropy", "mean_len")]
        print(f"{cell:12s} " + " ".join(parts))
    for note in summary["notes"]:
        print("note:", note)
    print(f"{len(paths)} plot files in {Path(args.dir) / 'plots'}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "preset": cmd_preset,
            "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (NumgameError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"numgame: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
