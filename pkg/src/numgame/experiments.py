"""Named experiment presets, the cell runner and report aggregation.

An experiment is a preset (a list of cells, each a set of game and dataset
overrides) crossed with a list of seeds. Every (cell, seed) pair trains once
into its own directory; the top level then gathers per-metric CSVs and a
``summary.json``. Nothing written to disk depends on wall-clock time, so a
re-run with the same settings reproduces every CSV byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import metrics
from .diffcore import load_checkpoint, save_checkpoint
from .errors import MissingMetrics, UnknownPreset
from .game import EVAL_STREAM, GameConfig, ImageBank, build_agents, candidate_count, evaluate, train
from .stimuli import Dataset, DatasetSpec, build_dataset, parse_classes, parse_counts
from .transcript import Transcript

log = logging.getLogger(__name__)

METRIC_FILES = ("accuracy", "cond_entropy", "mean_len", "loss")
OOD_CLASSES = [6, 7, 8, 10, 15]
# fifteen 3 px dots overflow 10% of a 64 px canvas, so novel sets allow smaller dots
OOD_MIN_RADIUS = 2.0
NOVEL_COUNT = 60
EMBED_EPISODES = 200


# --------------------------------------------------------------------------
# presets


@dataclass
class Cell:
    name: str
    game: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)


@dataclass
class Preset:
    name: str
    description: str
    cells: List[Cell]
    novel: List[int] = field(default_factory=list)


def _preset_table() -> Dict[str, Preset]:
    train_15 = {"classes": [1, 2, 3, 4, 5]}
    return {
        p.name: p
        for p in [
            Preset("fig2-same-diff", "accuracy and H(N|M) over training, Same vs Diff condition",
                   [Cell("same", {"condition": "same"}), Cell("diff", {"condition": "diff"})]),
            Preset("fig3-length-reg", "variable-length messages under three length penalties",
                   [Cell(f"lambda{lam}", {"variable_length": True, "length_coef": lam})
                    for lam in (0.0, 0.005, 0.05)]),
            Preset("fig4-frequency", "uniform, increasing and decreasing class frequencies",
                   [Cell(p, {}, {"profile": p}) for p in ("uniform", "increase", "decrease")]),
            Preset("fig5-extrapolation", "train on 1-5, test with one novel larger numerosity",
                   [Cell("discrete", dict(train_15))], novel=list(OOD_CLASSES)),
            Preset("fig5-interpolation", "train with a hole at 3, test with 3 restored",
                   [Cell("discrete", {"classes": [1, 2, 4, 5]}, {"classes": [1, 2, 4, 5]})], novel=[3]),
            Preset("table1-vocab-sweep", "fixed-length messages for several vocabulary sizes",
                   [Cell(f"V{v}", {"vocab": v}) for v in (3, 5, 10, 100)]),
            Preset("figA3-dissimilarity", "sketch channel; pairwise sketch dissimilarity by class",
                   [Cell("sketch", {"channel": "sketch"})]),
            Preset("figA4-sketch-zeroshot", "sketch channel tested on novel numerosities",
                   [Cell("sketch", {"channel": "sketch"})], novel=list(OOD_CLASSES)),
        ]
    }


PRESETS = _preset_table()


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None


# --------------------------------------------------------------------------
# configuration


DATASET_DEFAULTS = {"profile": "uniform", "scale": 0.2, "classes": None, "counts": None,
                    "canvas_side": 64, "area_range": [0.05, 0.10], "seed": 0, "split": 0.85,
                    "min_radius": 3.0}


@dataclass
class ExperimentSpec:
    """What to run: a preset, overrides on top of it, seeds and output location.

    ``game`` and ``dataset`` overrides win over the preset's per-cell values.
    """

    preset: str
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    out: Path = Path("runs")
    game: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    data_dir: Optional[Path] = None
    dump_sketches: Optional[Path] = None
    workers: Optional[int] = None

    def __post_init__(self):
        get_preset(self.preset)
        if not self.seeds:
            raise ValueError("seed list must not be empty")
        self.seeds = [int(s) for s in self.seeds]
        self.out = Path(self.out)
        unknown = set(self.game) - {f.name for f in fields(GameConfig)}
        if unknown:
            raise ValueError(f"unknown game settings: {sorted(unknown)}")
        unknown = set(self.dataset) - set(DATASET_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown dataset settings: {sorted(unknown)}")

    @property
    def datasets_root(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.out.parent / "datasets"


def load_toml(path) -> dict:
    import tomli

    with open(path, "rb") as fh:
        return tomli.load(fh)


def merge_settings(preset_name: Optional[str], file_cfg: Optional[dict], cli: dict) -> dict:
    """Flatten preset < file < CLI into ExperimentSpec keyword arguments.

    ``cli`` holds only flags the user actually passed (``None`` values are
    dropped); nested ``game``/``dataset`` keys merge field by field.
    """
    file_cfg = dict(file_cfg or {})
    out = {"game": {}, "dataset": {}}
    for src in (file_cfg, {k: v for k, v in cli.items() if v is not None}):
        for k, v in src.items():
            if k in ("game", "dataset"):
                out[k].update({kk: vv for kk, vv in v.items() if vv is not None})
            else:
                out[k] = v
    if preset_name is not None:
        out["preset"] = preset_name
    if "seed" in out:
        out["seeds"] = [int(out.pop("seed"))]
    return out


def dataset_spec(settings: dict) -> DatasetSpec:
    s = dict(DATASET_DEFAULTS, **{k: v for k, v in settings.items() if v is not None})
    classes = s["classes"] or [1, 2, 3, 4, 5]
    if isinstance(classes, str):
        classes = parse_classes(classes)
    extra = {"canvas_side": s["canvas_side"], "area_range": tuple(s["area_range"]), "seed": s["seed"],
             "split": s["split"], "min_radius": s["min_radius"]}
    if s["counts"] is not None:
        counts = s["counts"]
        if isinstance(counts, str):
            counts = parse_counts(counts, classes)
        elif isinstance(counts, int):
            counts = [counts] * len(classes)
        return DatasetSpec(list(classes), list(counts), **extra)
    return DatasetSpec.from_profile(s["profile"], classes, s["scale"], **extra)


def novel_spec(base: DatasetSpec, novel: Sequence[int]) -> DatasetSpec:
    """Evaluation-only images of the novel numerosities (all of them held out)."""
    return DatasetSpec(sorted(int(n) for n in novel), [NOVEL_COUNT] * len(novel), canvas_side=base.canvas_side,
                       area_range=base.area_range, seed=base.seed, split=1.0,
                       min_radius=min(base.min_radius, OOD_MIN_RADIUS))


def cached_dataset(spec: DatasetSpec, root) -> Dataset:
    """Load the dataset for ``spec`` from ``root/<digest>`` or build and store it."""
    root = Path(root)
    target = root / spec.digest()
    if (target / "manifest.json").exists():
        return Dataset.load(target)
    ds = build_dataset(spec)
    root.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=root))
    ds.save(tmp)
    try:
        os.replace(tmp, target)
    except OSError:  # another worker stored it first
        shutil.rmtree(tmp, ignore_errors=True)
    return Dataset.load(target)


# --------------------------------------------------------------------------
# persistence helpers


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_fmt))
    os.replace(tmp, path)


def write_mapping(path, table: metrics.CodeTable) -> Path:
    m, rows, cols = metrics.mapping_matrix(table)
    return write_csv(path, ["numerosity"] + cols, ([r] + list(m[i]) for i, r in enumerate(rows)))


def dump_sketch_pngs(t: Transcript, out_dir, per_class: int = 5) -> None:
    """Eval-mode sketches as PNGs named ``n<target>_<k>.png``."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    canv = metrics.sketch_canvases(t)
    seen: Dict[int, int] = {}
    for r, c in zip(t.records, canv):
        n = r["sender_n"]
        k = seen.get(n, 0)
        if k >= per_class:
            continue
        seen[n] = k + 1
        Image.fromarray(np.round(c * 255).astype(np.uint8), mode="L").save(out / f"n{n}_{k}.png")


# --------------------------------------------------------------------------
# one cell


@dataclass
class CellJob:
    preset: str
    cell: str
    seed: int
    game: dict
    dataset: dict
    novel: List[int]
    out_dir: str
    data_root: str
    dump_sketches: Optional[str] = None


def _embedding_separation(agents, bank: ImageBank, classes) -> Dict[str, float]:
    """Mean intra- vs inter-class Euclidean distance of held-out embeddings."""
    agents.eval()
    embs, labels = [], []
    with torch.no_grad():
        for c in classes:
            ids = bank.pools[c][: EMBED_EPISODES // len(classes)]
            embs.append(agents.encoder(bank.tensor[bank.rows(np.full(len(ids), c), ids)]).numpy())
            labels += [c] * len(ids)
    e = np.concatenate(embs).astype(np.float64)
    lab = np.asarray(labels)
    d = np.sqrt(((e[:, None] - e[None]) ** 2).sum(-1))
    same = lab[:, None] == lab[None]
    off = ~np.eye(len(lab), dtype=bool)
    out = {}
    if (same & off).any():
        out["embed_intra"] = float(d[same & off].mean())
    if (~same).any():
        out["embed_inter"] = float(d[~same].mean())
    return out


def _sketch_keys(final: Transcript, classes, seed: int):
    rng = np.random.default_rng([seed, EVAL_STREAM, 1])
    model = metrics.cluster_sketches(metrics.sketch_canvases(final), len(classes), rng)
    return model


def run_cell(job: CellJob) -> dict:
    """Train one (cell, seed) and write its artifacts; returns final scalars."""
    torch.set_num_threads(1)  # fixed reduction order, so CSVs repeat bit for bit
    out = Path(job.out_dir)
    tmp = out.with_name(out.name + ".tmp")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    spec = dataset_spec(job.dataset)
    ds = cached_dataset(spec, job.data_root)
    game_kw = dict(job.game)
    game_kw.setdefault("classes", spec.classes)
    game_kw.setdefault("candidates", candidate_count(game_kw["classes"]))
    config = GameConfig(seed=job.seed, **game_kw)
    result = train(config, ds)
    last = config.epochs - 1
    final = result.transcript.select(epoch=last)

    write_csv(tmp / "metrics.csv", ["epoch", "accuracy", "cond_entropy", "mean_len", "loss"],
              ([h["epoch"], h["accuracy"], h["cond_entropy"], h["mean_len"], h["loss"]] for h in result.history))
    result.transcript.to_jsonl(tmp / "transcript.jsonl")
    save_checkpoint(tmp / "agents.ckpt", result.agents.state_dict(), meta={"config": config.to_dict()})
    _write_json(tmp / "config.json", {"game": config.to_dict(), "dataset": spec.to_dict(), "dataset_digest": ds.digest,
                                      "preset": job.preset, "cell": job.cell})

    h = result.history[-1]
    scalars = {"accuracy": h["accuracy"], "cond_entropy": h["cond_entropy"], "mean_len": h["mean_len"]}
    scalars.update(_embedding_separation(result.agents, result.bank, config.classes))
    cluster_model = None
    if config.channel == "sketch":
        cluster_model = _sketch_keys(final, config.classes, job.seed)
        keyed = metrics.attach_cluster_keys(final, cluster_model)
        labels = [int(r["key"][1:]) for r in keyed.records]
        scalars["purity"] = metrics.cluster_purity(labels, [r["sender_n"] for r in keyed.records])
        r, flag = metrics.span_correlation(final, ds)
        scalars["span_correlation"] = r
        scalars["span_degenerate"] = flag
        canv = metrics.sketch_canvases(final)
        groups = {c: canv[[i for i, rec in enumerate(final.records) if rec["sender_n"] == c]] for c in config.classes}
        dis, cls = metrics.pairwise_dissimilarity(groups)
        write_csv(tmp / "dissimilarity.csv", ["numerosity"] + cls, ([c] + list(dis[i]) for i, c in enumerate(cls)))
        off = dis[~np.eye(len(cls), dtype=bool)]
        scalars["dissim_diag"] = float(np.diag(dis).mean())
        scalars["dissim_offdiag"] = float(off.mean()) if off.size else 0.0
        # one representative sketch per class, for sketch grids
        reps = []
        for c in config.classes:
            rec = next(x for x in final.records if x["sender_n"] == c)
            for k, s in enumerate(rec["strokes"]):
                reps.append([c, k] + list(s))
        write_csv(tmp / "sketches.csv", ["numerosity", "stroke", "x0", "y0", "x1", "y1"], reps)
        write_mapping(tmp / "mapping.csv", metrics.CodeTable.from_transcript(keyed))
        if job.dump_sketches:
            dump_sketch_pngs(final, Path(job.dump_sketches) / job.cell / f"seed{job.seed}")
    else:
        scalars["distinct_messages"] = len({r["key"] for r in final.records})
        write_mapping(tmp / "mapping.csv", metrics.CodeTable.from_transcript(final.select(correct=True)))

    if job.novel:
        nds = cached_dataset(novel_spec(spec, job.novel), job.data_root)
        gens = {}
        for n in job.novel:
            test_classes = sorted(set(config.classes) | {n})
            bank = ImageBank([ds, nds], "test")
            # as many episodes per class as the per-epoch evaluation uses
            episodes = int(round(config.eval_episodes * len(test_classes) / len(config.classes)))
            t = evaluate(result.agents, bank, test_classes, config.condition, min(5, len(test_classes)),
                         episodes, np.random.default_rng([job.seed, EVAL_STREAM, n]), config=config,
                         epoch=last, phase=f"gen{n}")
            if cluster_model is not None:
                t = metrics.attach_cluster_keys(t, cluster_model)
            t.to_jsonl(tmp / f"gen_{n}.jsonl")
            write_mapping(tmp / f"mapping_gen{n}.csv", metrics.CodeTable.from_transcript(t))
            gens[n] = t
        report = metrics.generalisation_report(config.classes, gens)
        rows = []
        for n, cellrep in report.items():
            rows.append([n, cellrep.accuracy, cellrep.in_dist_accuracy, cellrep.novel_accuracy, cellrep.reuse_fraction,
                         cellrep.ceiling_key, cellrep.ceiling_reuse, cellrep.cond_entropy])
            scalars[f"novel{n}_accuracy"] = cellrep.novel_accuracy
            scalars[f"novel{n}_in_dist_accuracy"] = cellrep.in_dist_accuracy
            scalars[f"novel{n}_reuse"] = cellrep.reuse_fraction
            scalars[f"novel{n}_ceiling_reuse"] = cellrep.ceiling_reuse
            scalars[f"novel{n}_cond_entropy"] = cellrep.cond_entropy
        write_csv(tmp / "generalisation.csv", ["novel", "accuracy", "in_dist_accuracy", "novel_accuracy",
                                               "reuse_fraction", "ceiling_key", "ceiling_reuse", "cond_entropy"], rows)

    _write_json(tmp / "scalars.json", scalars)
    shutil.rmtree(out, ignore_errors=True)
    os.replace(tmp, out)
    return scalars


# --------------------------------------------------------------------------
# whole preset


def worker_count(spec: ExperimentSpec) -> int:
    if spec.workers:
        return max(1, int(spec.workers))
    return max(1, int(os.environ.get("NUMGAME_WORKERS", "1")))


def plan(spec: ExperimentSpec) -> List[CellJob]:
    preset = get_preset(spec.preset)
    jobs = []
    for cell in preset.cells:
        game_kw = dict(cell.game, **spec.game)
        data_kw = dict(cell.dataset, **spec.dataset)
        if "classes" in game_kw and "classes" not in data_kw and "classes" not in cell.dataset:
            data_kw["classes"] = game_kw["classes"]
        for seed in spec.seeds:
            jobs.append(CellJob(
                preset=spec.preset, cell=cell.name, seed=seed, game=game_kw, dataset=data_kw,
                novel=list(preset.novel), out_dir=str(spec.out / "cells" / cell.name / f"seed{seed}"),
                data_root=str(spec.datasets_root),
                dump_sketches=str(spec.dump_sketches) if spec.dump_sketches else None,
            ))
    return jobs


def run_preset(spec: ExperimentSpec) -> Path:
    """Run every (cell, seed) of the preset and write the aggregate report."""
    spec.out.mkdir(parents=True, exist_ok=True)
    jobs = plan(spec)
    n = worker_count(spec)
    if n == 1 or len(jobs) == 1:
        for job in jobs:
            log.info("running %s/%s seed %d", spec.preset, job.cell, job.seed)
            _run_identified(job)
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            for _ in pool.map(_run_identified, jobs):
                pass
    summarize(spec.out)
    return spec.out


def _run_identified(job: CellJob) -> dict:
    try:
        return run_cell(job)
    except Exception as exc:
        raise type(exc)(f"[{job.preset} / {job.cell} / seed {job.seed}] {exc}") from exc


def _cell_dirs(root: Path):
    for cell_dir in sorted((root / "cells").iterdir()):
        for seed_dir in sorted(cell_dir.iterdir(), key=lambda p: int(p.name[4:]) if p.name[4:].isdigit() else -1):
            if seed_dir.name.startswith("seed") and seed_dir.name[4:].isdigit():
                yield cell_dir.name, int(seed_dir.name[4:]), seed_dir


def summarize(root) -> dict:
    """Gather per-cell artifacts into one-metric CSVs and ``summary.json``."""
    root = Path(root)
    if not (root / "cells").is_dir():
        raise MissingMetrics(f"no cell results under {root}")
    series = {m: [] for m in METRIC_FILES}
    cells: Dict[str, Dict[str, dict]] = {}
    gen_rows = []
    for cell, seed, d in _cell_dirs(root):
        if not (d / "metrics.csv").exists():
            raise MissingMetrics(f"{d} has no metrics.csv")
        for row in read_csv(d / "metrics.csv"):
            for m in METRIC_FILES:
                series[m].append([cell, seed, int(row["epoch"]), float(row[m])])
        cells.setdefault(cell, {})[str(seed)] = json.loads((d / "scalars.json").read_text())
        if (d / "generalisation.csv").exists():
            for row in read_csv(d / "generalisation.csv"):
                gen_rows.append([cell, seed] + list(row.values()))
    for m, rows in series.items():
        write_csv(root / f"{m}.csv", ["cell", "seed", "epoch", "value"], rows)
    if gen_rows:
        write_csv(root / "generalisation.csv", ["cell", "seed", "novel", "accuracy", "in_dist_accuracy",
                                                "novel_accuracy", "reuse_fraction", "ceiling_key", "ceiling_reuse",
                                                "cond_entropy"], gen_rows)
    aggregate = {}
    final_rows = []
    for cell, by_seed in cells.items():
        keys = sorted({k for s in by_seed.values() for k in s})
        agg = {}
        for k in keys:
            vals = [float(s[k]) for s in by_seed.values() if k in s and not isinstance(s[k], str)]
            if vals:
                agg[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        aggregate[cell] = agg
        for k in ("accuracy", "cond_entropy", "mean_len"):
            final_rows.append([cell, k, agg[k]["mean"], agg[k]["std"], len(by_seed)])
    write_csv(root / "final.csv", ["cell", "metric", "mean", "std", "seeds"], final_rows)
    summary = {"cells": cells, "aggregate": aggregate, "notes": _notes(series, aggregate)}
    _write_json(root / "summary.json", summary)
    return summary


def _notes(series, aggregate) -> List[str]:
    notes = []
    acc = {}
    for cell, seed, epoch, v in series["accuracy"]:
        acc[(cell, seed, epoch)] = v
    if {"same", "diff"} <= {c for c, _, _ in acc}:
        bad = sorted((s, e) for (c, s, e), v in acc.items() if c == "diff" and v > acc.get(("same", s, e), math.inf))
        if bad:
            notes.append(f"Diff accuracy exceeded Same at {len(bad)} logged (seed, epoch) points: {bad[:10]}")
    profiles = [c for c in ("uniform", "increase", "decrease") if c in aggregate]
    if len(profiles) == 3:
        lowest = min(profiles, key=lambda c: aggregate[c]["accuracy"]["mean"])
        notes.append(f"lowest final accuracy among frequency profiles: {lowest}")
    return notes


# --------------------------------------------------------------------------
# stand-alone evaluation of a trained cell


def load_cell_agents(cell_dir):
    cell_dir = Path(cell_dir)
    cfg = json.loads((cell_dir / "config.json").read_text())
    config = GameConfig(**cfg["game"])
    spec = DatasetSpec(**{k: (tuple(v) if k == "area_range" else v) for k, v in cfg["dataset"].items()})
    agents = build_agents(config, spec.canvas_side)
    tensors, _ = load_checkpoint(cell_dir / "agents.ckpt")
    agents.load_state_dict(tensors)
    return agents.eval(), config, spec


def evaluate_cell(cell_dir, data_root, classes: Optional[Sequence[int]] = None, novel: Sequence[int] = (),
                  episodes: int = 1000, seed: int = 0, out=None) -> dict:
    """Re-evaluate a trained cell, optionally including novel numerosities."""
    agents, config, spec = load_cell_agents(cell_dir)
    datasets = [cached_dataset(spec, data_root)]
    if novel:
        datasets.append(cached_dataset(novel_spec(spec, novel), data_root))
    classes = sorted(set(classes or config.classes) | set(int(n) for n in novel))
    t = evaluate(agents, ImageBank(datasets, "test"), classes, config.condition, min(5, len(classes)), episodes,
                 np.random.default_rng([seed, EVAL_STREAM]), config=config)
    if config.channel == "sketch":
        model = _sketch_keys(t.select(classes=config.classes), config.classes, seed)
        t = metrics.attach_cluster_keys(t, model)
    res = {"accuracy": metrics.accuracy(t),
           "cond_entropy": metrics.conditional_entropy(metrics.CodeTable.from_transcript(t)),
           "mean_len": metrics.mean_length(t),
           "per_class_accuracy": {str(c): metrics.accuracy(t, [c]) for c in classes}}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        t.to_jsonl(out / "eval.jsonl")
        write_mapping(out / "mapping.csv", metrics.CodeTable.from_transcript(t))
        _write_json(out / "eval.json", res)
    return res
