"""Command-line driver: ingest, train, report, project.

Exit codes: 0 ok, 2 invalid configuration, 3 data check failed, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .analysis import export_embeddings, pca2, silhouette_score, tsne_exact, write_scatter
from .autodiff import load_checkpoint
from .dataset import (OFFICIAL_RECORDINGS, IngestError, check_official_counts, clip_filename, load_corpus, summarize,
                      write_clip, write_manifest)
from .features import FeatureConfig, FeatureError
from .metrics import CellResult, ROW_ORDER, render_report, render_report_csv
from .models import EncoderSpec, InvalidSpec, TaskSet, build_model
from .pipeline import CLIPS, MANIFEST, load_splits
from .synthetic import make_fixture_corpus
from .training import NumericalFailure, TrainConfig, read_aggregate, run_experiment

log = logging.getLogger("respmtl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TRAIN_DEFAULTS = {
    "method": "soft",
    "tasks": "lung,disease",
    "meta": None,
    "epochs": 50,
    "seeds": "5",
    "lr": 5e-5,
    "lam": 0.1,
    "batch_size": 8,
    "select_on": "mean",
    "precision": "float32",
    "weighted_tasks": "all",
    "reg_layers": None,
    "encoder": "mini_transformer",
    "embed_dim": 64,
    "depth": 2,
    "heads": 4,
    "patch": "16x16",
    "stride": "16x16",
    "pooling": "mean",
    "n_fft": 1024,
    "hop": 512,
    "n_mels": 64,
    "f_min": 50.0,
    "f_max": 8000.0,
    "log_floor": 1e-10,
    "output_dir": None,
}
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class ConfigError(Exception):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment. Unknown keys are rejected."""
    values, errors = {}, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{path}:{lineno}: expected key=value")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TRAIN_DEFAULTS:
            errors.append(f"{path}:{lineno}: unknown key {key!r}")
            continue
        values[key] = value
    if errors:
        raise ConfigError(errors)
    return values


def _pair(text: str) -> tuple[int, int]:
    h, w = str(text).lower().split("x")
    return int(h), int(w)


def parse_seeds(text) -> tuple[int, ...]:
    """A bare integer N means the first N default seeds; a comma list names seeds."""
    text = str(text).strip()
    if "," in text:
        return tuple(int(s) for s in text.split(",") if s.strip())
    n = int(text)
    if n <= 0:
        raise ValueError("seed count must be positive")
    return tuple(DEFAULT_SEEDS[:n]) if n <= len(DEFAULT_SEEDS) else tuple(range(n))


def resolve_train_options(args: argparse.Namespace) -> dict:
    opts = dict(TRAIN_DEFAULTS)
    if args.config:
        opts.update(read_config_file(args.config))
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def build_run_objects(opts: dict):
    """Turn merged options into typed configs, collecting every validation error."""
    errors = []

    def conv(key, fn):
        try:
            return fn(opts[key]) if opts[key] is not None else None
        except (TypeError, ValueError):
            errors.append(f"{key}: cannot parse {opts[key]!r}")
            return None

    tasks = tuple(t.strip() for t in str(opts["tasks"]).split(",") if t.strip())
    task_set = None
    try:
        task_set = TaskSet(tasks, opts["meta"] if "meta" in tasks else None)
    except InvalidSpec as exc:
        errors.append(f"tasks: {exc}")
    if opts["meta"] and "meta" not in tasks:
        errors.append("meta: given but the task list has no 'meta' task")
    if opts["method"] not in ("hard", "soft"):
        errors.append(f"method: expected hard or soft, got {opts['method']!r}")

    seeds = conv("seeds", parse_seeds)
    config = TrainConfig(
        lr=conv("lr", float) or 0.0, epochs=conv("epochs", int) or 0, batch_size=conv("batch_size", int) or 0,
        lam=conv("lam", float) or 0.0, seeds=seeds or (), precision=str(opts["precision"]),
        select_on=str(opts["select_on"]),
        weighted_tasks=str(opts["weighted_tasks"]),
    )
    errors += config.validate()

    feature_config = None
    try:
        feature_config = FeatureConfig(conv("n_fft", int) or 0, conv("hop", int) or 0, conv("n_mels", int) or 0,
                                       conv("f_min", float) or 0.0, conv("f_max", float) or 0.0,
                                       conv("log_floor", float) or 0.0)
    except FeatureError as exc:
        errors.append(f"features: {exc}")

    encoder = None
    if feature_config is not None:
        n_frames = feature_config.n_frames(128000)
        encoder = EncoderSpec(str(opts["encoder"]), conv("embed_dim", int) or 0, conv("depth", int) or 0,
                              conv("heads", int) or 0, conv("patch", _pair) or (0, 0), conv("stride", _pair) or (0, 0),
                              str(opts["pooling"]), (feature_config.n_mels, n_frames))
        try:
            encoder.validate()
        except InvalidSpec as exc:
            errors.append(f"encoder: {exc}")
    reg_layers = None
    if opts["reg_layers"]:
        reg_layers = tuple(s.strip() for s in str(opts["reg_layers"]).split(",") if s.strip())
    if not opts["output_dir"]:
        errors.append("output_dir: required")
    elif not (Path(opts["output_dir"]) / MANIFEST).exists():
        errors.append(f"output_dir: no {MANIFEST} in {opts['output_dir']} (run ingest first)")
    if errors:
        raise ConfigError(errors)
    return task_set, config, feature_config, encoder, reg_layers


# ------------------------------------------------------------------- commands

def cmd_ingest(args) -> int:
    out = Path(args.output_dir)
    try:
        ds = load_corpus(args.data_root, keep_audio=True, workers=args.workers)
    except IngestError as exc:
        print(f"ingest failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    (out / CLIPS).mkdir(parents=True, exist_ok=True)
    for c in ds.cycles:
        write_clip(out / CLIPS / clip_filename(c.source_id), c.samples)
    write_manifest(out / MANIFEST, ds.cycles)
    summary = summarize(ds.cycles)
    text = summary.format()
    notes = []
    if ds.skipped:
        notes.append(f"skipped {len(ds.skipped)} recording(s):")
        notes += [f"  {name}: {why}" for name, why in sorted(ds.skipped.items())]
    if not ds.official_split:
        notes.append("WARNING: no split table found; split is an unofficial deterministic 60/40 patient split")
    status = EXIT_OK
    if ds.n_recordings == OFFICIAL_RECORDINGS and ds.official_split:
        diffs = check_official_counts(summary)
        if diffs:
            notes.append("Table 1 check: FAIL")
            notes += [f"  {d}" for d in diffs]
            status = EXIT_DATA
        else:
            notes.append("Table 1 check: PASS (8/8 lung cells, 4/4 disease cells)")
    else:
        notes.append(f"Table 1 check: skipped ({ds.n_recordings} recordings; the official corpus has "
                     f"{OFFICIAL_RECORDINGS})")
    report = "\n".join([text, ""] + notes) + "\n"
    (out / "summary.txt").write_text(report)
    print(report, end="")
    return status


def _config_errors(exc: ConfigError) -> int:
    print("invalid configuration:", file=sys.stderr)
    for e in exc.errors:
        print(f"  - {e}", file=sys.stderr)
    return EXIT_CONFIG


def train_cell(opts: dict, quiet: bool = False) -> int:
    task_set, config, feature_config, encoder, reg_layers = build_run_objects(opts)
    out = Path(opts["output_dir"])
    train, test, stats, _ = load_splits(out, task_set, feature_config)
    # a single task has one tower, so hard and soft coincide
    sharing = "soft" if task_set.T == 1 else opts["method"]
    cell_id = CellResult(sharing, task_set.tasks, task_set.meta_attribute).cell_id
    run_dir = out / "runs" / cell_id
    run_dir.mkdir(parents=True, exist_ok=True)
    extra = {"feature_config": asdict(feature_config), "norm_mean": stats.mean, "norm_std": stats.std}
    started = time.time()
    try:
        result = run_experiment(train, test, task_set, sharing, encoder, config, run_dir, reg_layers, extra)
    except NumericalFailure as exc:
        print(f"numerical failure in {cell_id}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    (run_dir / "timing.json").write_text(json.dumps({"started": started, "seconds": time.time() - started}) + "\n")
    if not quiet:
        print(render_report([result.cell]), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        return train_cell(resolve_train_options(args))
    except ConfigError as exc:
        return _config_errors(exc)


GRID = [("soft", "lung", None), ("soft", "disease", None), ("hard", "lung,disease", None),
        ("soft", "lung,disease", None)] + [
    (m, "lung,disease,meta", a) for m in ("hard", "soft") for a in ("age_group", "sex", "location", "stethoscope")]


def grid_cells(selection: str | None):
    """All 12 (method, tasks, meta) cells, optionally filtered by cell id."""
    cells = [(m, t, a, CellResult(m, tuple(t.split(",")), a).cell_id) for m, t, a in GRID]
    if not selection:
        return cells
    wanted = {s.strip() for s in selection.split(",") if s.strip()}
    unknown = wanted - {c[3] for c in cells}
    if unknown:
        raise ConfigError([f"cells: unknown cell id(s) {sorted(unknown)}; known: {[c[3] for c in cells]}"])
    return [c for c in cells if c[3] in wanted]


def cmd_train_grid(args) -> int:
    base = resolve_train_options(args)
    try:
        cells = grid_cells(args.cells)
        if not cells:
            raise ConfigError(["cells: empty grid selection"])
        jobs = []
        for method, tasks, attr, _ in cells:
            opts = dict(base, method=method, tasks=tasks, meta=attr)
            build_run_objects(opts)
            jobs.append(opts)
    except ConfigError as exc:
        return _config_errors(exc)
    for opts, cell in zip(jobs, cells):
        log.info("training cell %s", cell[3])
        status = train_cell(opts, quiet=True)
        if status:
            return status
    return cmd_report(argparse.Namespace(output_dir=base["output_dir"], no_reference=False, require_full_grid=False))


def collect_cells(output_dir) -> list[CellResult]:
    return [read_aggregate(p) for p in sorted(Path(output_dir).glob("runs/*/aggregate.json"))]


def cmd_report(args) -> int:
    cells = collect_cells(args.output_dir)
    if not cells:
        print(f"no completed grid cells under {args.output_dir}/runs", file=sys.stderr)
        return EXIT_DATA
    text = render_report(cells, reference=not args.no_reference)
    out = Path(args.output_dir)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(render_report_csv(cells, reference=not args.no_reference))
    print(text, end="")
    if args.require_full_grid:
        missing = [m for m in ROW_ORDER if m not in {c.method for c in cells}]
        if missing:
            print("missing grid cells: " + ", ".join(missing), file=sys.stderr)
            return EXIT_DATA
    return EXIT_OK


def cmd_project(args) -> int:
    ckpt = Path(args.checkpoint)
    arrays, _, meta = load_checkpoint(ckpt)
    data_dir = Path(args.data_dir) if args.data_dir else ckpt.parents[3]
    task_set = TaskSet(tuple(meta["tasks"]), meta["meta_attribute"])
    enc = meta["encoder"]
    encoder = EncoderSpec(enc["kind"], enc["embed_dim"], enc["depth"], enc["heads"], tuple(enc["patch"]),
                          tuple(enc["stride"]), enc["pooling"], tuple(enc["input_shape"]), enc["mlp_ratio"])
    model = build_model(encoder, task_set, meta["sharing"], meta["lam"], meta["reg_layers"], meta["seed"])
    model.load_arrays(arrays)
    feature_config = FeatureConfig(**meta["feature_config"])
    train, test, _, cycles = load_splits(data_dir, task_set, feature_config)
    data = train if args.split == "train" else test
    by_id = {c.source_id: c for c in cycles}
    labels = {"lung": [by_id[s].lung_label for s in data.source_ids],
              "disease": [by_id[s].disease_label for s in data.source_ids]}
    try:
        table = export_embeddings(model, data.x, data.source_ids, labels, encoder=args.encoder)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    if args.method == "pca":
        proj = pca2(table)
    else:
        proj = tsne_exact(table, args.perplexity, args.iterations, args.seed)
    out = Path(args.out_dir) if args.out_dir else ckpt.parent / "projections"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.method}_{args.split}_{args.color_by}"
    legend = write_scatter(proj, args.color_by, out / f"{stem}.csv", out / f"{stem}.svg")
    print(f"wrote {out / stem}.csv and .svg ({len(legend)} legend entries)")
    if len(set(labels[args.color_by])) > 1:
        print(f"silhouette by {args.color_by}: embedding {silhouette_score(table.vectors, labels[args.color_by]):.4f}, "
              f"projection {silhouette_score(proj.xy, labels[args.color_by]):.4f}")
    return EXIT_OK


def cmd_make_fixture(args) -> int:
    root = make_fixture_corpus(args.directory, seed=args.seed)
    print(f"fixture corpus written to {root}")
    return EXIT_OK


# ----------------------------------------------------------------------- main

def _train_flags(p: argparse.ArgumentParser, grid: bool = False) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--output-dir")
    if not grid:
        p.add_argument("--method", choices=["hard", "soft"])
        p.add_argument("--tasks", help="comma list from lung, disease, meta")
        p.add_argument("--meta", choices=["age_group", "sex", "location", "stethoscope"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", help="seed count, or a comma-separated seed list")
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float, help="soft-sharing regularisation weight")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--select-on", choices=["mean", "lung", "disease"])
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--weighted-tasks", choices=["all", "disease", "none"])
    p.add_argument("--reg-layers", help="comma list of parameter-name prefixes to regularise (default: all)")
    p.add_argument("--encoder", choices=["mini_transformer", "mlp"])
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--patch", help="HxW")
    p.add_argument("--stride", help="HxW")
    p.add_argument("--pooling", choices=["mean", "cls_token"])
    p.add_argument("--n-fft", type=int)
    p.add_argument("--hop", type=int)
    p.add_argument("--n-mels", type=int)
    p.add_argument("--f-min", type=float)
    p.add_argument("--f-max", type=float)
    p.add_argument("--log-floor", type=float)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="respmtl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ing = sub.add_parser("ingest", help="parse an ICBHI-layout corpus into a manifest and clip cache")
    ing.add_argument("--data-root", required=True)
    ing.add_argument("--output-dir", required=True)
    ing.add_argument("--workers", type=int, default=1)
    ing.set_defaults(func=cmd_ingest)

    tr = sub.add_parser("train", help="train one grid cell over all seeds")
    _train_flags(tr)
    tr.set_defaults(func=cmd_train)

    grid = sub.add_parser("train-grid", help="train several grid cells in sequence, then report")
    _train_flags(grid, grid=True)
    grid.add_argument("--cells", help="comma list of cell ids (default: all 12)")
    grid.set_defaults(func=cmd_train_grid)

    rep = sub.add_parser("report", help="render the results table over completed cells")
    rep.add_argument("--output-dir", required=True)
    rep.add_argument("--no-reference", action="store_true", help="omit the published reference rows")
    rep.add_argument("--require-full-grid", action="store_true", help="exit 3 unless all 12 cells exist")
    rep.set_defaults(func=cmd_report)

    prj = sub.add_parser("project", help="2-D projection of a checkpoint's embeddings")
    prj.add_argument("--checkpoint", required=True)
    prj.add_argument("--data-dir", help="ingest output directory (default: inferred from the checkpoint path)")
    prj.add_argument("--split", choices=["train", "test"], default="test")
    prj.add_argument("--method", choices=["tsne", "pca"], default="tsne")
    prj.add_argument("--color-by", choices=["lung", "disease"], default="lung")
    prj.add_argument("--encoder", help="encoder to export (soft models: a task name)")
    prj.add_argument("--perplexity", type=float, default=30.0)
    prj.add_argument("--iterations", type=int, default=1000)
    prj.add_argument("--seed", type=int, default=0)
    prj.add_argument("--out-dir")
    prj.set_defaults(func=cmd_project)

    fx = sub.add_parser("make-fixture", help="write the synthetic six-recording corpus")
    fx.add_argument("directory")
    fx.add_argument("--seed", type=int, default=0)
    fx.set_defaults(func=cmd_make_fixture)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
