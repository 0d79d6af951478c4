"""Training loop, per-epoch evaluation, epoch selection and multi-seed runs."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, AdamState, backward, class_weights, no_grad, save_checkpoint
from .metrics import (AggregateScore, CellResult, accumulate_confusion, aggregate_or_single, icbhi_scores,
                      metadata_accuracy)
from .models import EncoderSpec, MtlModel, TaskSet, build_model, model_loss

log = logging.getLogger(__name__)

LOSS_KEYS = ("total", "lung", "disease", "meta", "reg")
LOG_HEADER = ["epoch", "task", "sp", "se", "sc", "accuracy"] + [f"loss_{k}" for k in LOSS_KEYS]


class NumericalFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-5
    epochs: int = 50
    batch_size: int = 8
    lam: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    precision: str = "float32"
    select_on: str = "mean"
    weighted_tasks: str = "all"
    eval_batch_size: int = 64

    def validate(self) -> list[str]:
        errors = []
        if not self.lr >= 0:
            errors.append("lr must be non-negative")
        for name in ("epochs", "batch_size", "eval_batch_size"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive")
        if self.lam < 0:
            errors.append("lam must be non-negative")
        if not self.seeds:
            errors.append("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            errors.append("seeds must be distinct")
        if self.precision not in ("float32", "float64"):
            errors.append("precision must be float32 or float64")
        if self.select_on not in ("mean", "lung", "disease"):
            errors.append("select_on must be mean, lung or disease")
        if self.weighted_tasks not in ("all", "disease", "none"):
            errors.append("weighted_tasks must be all, disease or none")
        return errors

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class TaskData:
    """Model inputs with per-task integer labels and masks (False = label missing)."""

    x: np.ndarray
    labels: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    source_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.x)

    @classmethod
    def from_cycles(cls, x: np.ndarray, cycles, task_set: TaskSet) -> TaskData:
        labels, masks = {}, {}
        for task in task_set.tasks:
            idx = [c.label_index(task, task_set.meta_attribute) for c in cycles]
            masks[task] = np.array([i is not None for i in idx], dtype=bool)
            labels[task] = np.array([0 if i is None else i for i in idx], dtype=np.int64)
        return cls(np.asarray(x), labels, masks, [c.source_id for c in cycles])

    def subset(self, idx) -> TaskData:
        idx = np.asarray(idx)
        return TaskData(self.x[idx], {t: v[idx] for t, v in self.labels.items()},
                        {t: v[idx] for t, v in self.masks.items()},
                        [self.source_ids[i] for i in idx] if self.source_ids else [])


def task_weights(data: TaskData, task_set: TaskSet, mode: str = "all") -> dict[str, np.ndarray]:
    """Inverse-frequency class weights from the training labels.

    Classes absent from training get weight 1; they never occur as targets.
    """
    out = {}
    for task in task_set.tasks:
        k = task_set.n_classes(task)
        if mode == "none" or (mode == "disease" and task != "disease"):
            out[task] = np.ones(k)
            continue
        counts = np.bincount(data.labels[task][data.masks[task]], minlength=k)
        w = np.ones(k)
        present = counts > 0
        if present.any():
            w[present] = class_weights(counts[present])
        out[task] = w
    return out


def train_epoch(model: MtlModel, optimizer: Adam, data: TaskData, config: TrainConfig,
                rng: np.random.Generator, weights: dict | None = None) -> dict[str, float]:
    """One pass over seeded-shuffled batches; returns mean loss components."""
    if len(data) == 0:
        raise ValueError("empty training split")
    order = rng.permutation(len(data))
    sums: dict[str, float] = {}
    n_batches = 0
    for b, start in enumerate(range(0, len(data), config.batch_size)):
        idx = order[start:start + config.batch_size]
        logits = model.forward(data.x[idx])
        # a task whose labels are all missing in this batch sits the batch out
        active = {t: z for t, z in logits.items() if data.masks[t][idx].any()}
        labels = {t: data.labels[t][idx] for t in active}
        masks = {t: data.masks[t][idx] for t in active}
        loss = model_loss(model, active, labels, masks, weights)
        values = loss.values()
        if not np.isfinite(values["total"]):
            raise NumericalFailure(f"non-finite loss at batch {b} (examples {idx.tolist()})")
        optimizer.zero_grad()
        backward(loss.total)
        optimizer.step()
        for k, v in values.items():
            sums[k] = sums.get(k, 0.0) + v
        n_batches += 1
    return {k: v / n_batches for k, v in sums.items()}


@dataclass
class EvalResult:
    scores: dict[str, object]  # ScoreTriple for lung/disease, float accuracy for meta
    predictions: dict[str, np.ndarray] = field(default_factory=dict)

    def selection_score(self, select_on: str = "mean") -> float:
        scs = {t: s.sc for t, s in self.scores.items() if t != "meta"}
        if select_on == "mean" or select_on not in scs:
            return float(np.mean(list(scs.values())))
        return float(scs[select_on])


def predict(model: MtlModel, x: np.ndarray, batch_size: int = 64) -> dict[str, np.ndarray]:
    preds: dict[str, list] = {t: [] for t in model.tasks}
    with no_grad():
        for start in range(0, len(x), batch_size):
            for t, z in model.forward(x[start:start + batch_size]).items():
                preds[t].append(np.argmax(z.data, axis=1))
    return {t: np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for t, p in preds.items()}


def evaluate(model: MtlModel, data: TaskData, batch_size: int = 64) -> EvalResult:
    preds = predict(model, data.x, batch_size)
    scores = {}
    for t, p in preds.items():
        if t == "meta":
            # an attribute can be missing for every evaluated example
            scores[t] = metadata_accuracy(p, data.labels[t], data.masks[t]) if data.masks[t].any() else float("nan")
        else:
            cm = accumulate_confusion(p, data.labels[t], model.task_set.n_classes(t))
            scores[t] = icbhi_scores(cm, normal_class=0)
    return EvalResult(scores, preds)


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    eval: EvalResult


@dataclass
class RunResult:
    seed: int
    epochs: list[EpochRecord]
    selected_epoch: int
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    per_task_selected: dict[str, int] = field(default_factory=dict)

    def record(self, epoch: int) -> EpochRecord:
        return self.epochs[epoch - 1]

    @property
    def selected(self) -> EpochRecord:
        return self.record(self.selected_epoch)


def _copy_state(state: AdamState) -> AdamState:
    return AdamState(state.lr, state.beta1, state.beta2, state.eps, state.t,
                     {k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()})


def run_seed(train: TaskData, test: TaskData, task_set: TaskSet, sharing: str, encoder_spec: EncoderSpec,
             config: TrainConfig, seed: int, reg_layers=None, on_epoch=None) -> RunResult:
    model = build_model(encoder_spec, task_set, sharing, config.lam, reg_layers, seed, config.dtype)
    optimizer = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([seed, 0x5EED])
    weights = task_weights(train, task_set, config.weighted_tasks)
    train = TaskData(train.x.astype(config.dtype, copy=False), train.labels, train.masks, train.source_ids)
    test = TaskData(test.x.astype(config.dtype, copy=False), test.labels, test.masks, test.source_ids)

    records: list[EpochRecord] = []
    best = -np.inf
    best_params, best_state, selected = model.state_arrays(), _copy_state(optimizer.state), 0
    for epoch in range(1, config.epochs + 1):
        losses = train_epoch(model, optimizer, train, config, rng, weights)
        ev = evaluate(model, test, config.eval_batch_size)
        records.append(EpochRecord(epoch, losses, ev))
        score = ev.selection_score(config.select_on)
        if score > best:
            best, selected = score, epoch
            best_params, best_state = model.state_arrays(), _copy_state(optimizer.state)
        if on_epoch is not None:
            on_epoch(records[-1])
    per_task = {}
    for t in task_set.tasks:
        if t != "meta":
            per_task[t] = 1 + int(np.argmax([r.eval.scores[t].sc for r in records]))
    return RunResult(seed, records, selected, best_params, best_state, per_task)


def epoch_log_lines(run: RunResult) -> list[str]:
    lines = [",".join(LOG_HEADER)]
    for rec in run.epochs:
        losses = [repr(rec.losses[k]) if k in rec.losses else "" for k in LOSS_KEYS]
        for task, s in rec.eval.scores.items():
            if task == "meta":
                cols = ["", "", "", repr(float(s))]
            else:
                cols = [repr(float(s.sp)), repr(float(s.se)), repr(float(s.sc)), ""]
            lines.append(",".join([str(rec.epoch), task] + cols + losses))
    return lines


def read_epoch_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def aggregate_cell(runs: list[RunResult], task_set: TaskSet, sharing: str) -> CellResult:
    cell = CellResult(sharing, task_set.tasks, task_set.meta_attribute)
    for t in task_set.tasks:
        if t == "meta":
            cell.scores[t] = {"accuracy": aggregate_or_single([r.selected.eval.scores[t] for r in runs])}
        else:
            cell.scores[t] = {k: aggregate_or_single([getattr(r.selected.eval.scores[t], k) for r in runs])
                              for k in ("sp", "se", "sc")}
    return cell


@dataclass
class ExperimentResult:
    cell: CellResult
    runs: list[RunResult]


def run_experiment(train: TaskData, test: TaskData, task_set: TaskSet, sharing: str,
                   encoder_spec: EncoderSpec, config: TrainConfig, out_dir=None, reg_layers=None,
                   extra_meta: dict | None = None) -> ExperimentResult:
    """Train every seed, select each seed's best epoch, aggregate over seeds.

    With ``out_dir`` set, writes ``seed_<s>/epochs.csv``, ``seed_<s>/model.ckpt``
    and ``aggregate.json`` below it.
    """
    runs = []
    for seed in config.seeds:
        run = run_seed(train, test, task_set, sharing, encoder_spec, config, seed, reg_layers)
        runs.append(run)
        log.info("seed %d: selected epoch %d (score %.4f)", seed, run.selected_epoch,
                 run.selected.eval.selection_score(config.select_on))
        if out_dir is not None:
            seed_dir = Path(out_dir) / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            (seed_dir / "epochs.csv").write_text("\n".join(epoch_log_lines(run)) + "\n")
            meta = {
                "encoder": asdict(encoder_spec),
                "tasks": list(task_set.tasks),
                "meta_attribute": task_set.meta_attribute,
                "sharing": sharing,
                "lam": config.lam,
                "reg_layers": None if reg_layers is None else list(reg_layers),
                "seed": seed,
                "selected_epoch": run.selected_epoch,
                "precision": config.precision,
            }
            meta.update(extra_meta or {})
            save_checkpoint(seed_dir / "model.ckpt", run.params, run.adam, meta)
    cell = aggregate_cell(runs, task_set, sharing)
    if out_dir is not None:
        write_aggregate(Path(out_dir) / "aggregate.json", cell, runs, config)
    return ExperimentResult(cell, runs)


def _agg_dict(a):
    return {"mean": a.mean, "std": a.std, "n": a.n}


def write_aggregate(path, cell: CellResult, runs: list[RunResult], config: TrainConfig) -> None:
    per_task_selected = {}
    for t in (t for t in cell.tasks if t != "meta"):
        sel = [r.record(r.per_task_selected[t]).eval.scores[t].sc for r in runs]
        per_task_selected[t] = _agg_dict(aggregate_or_single(sel))
    doc = {
        "sharing": cell.sharing,
        "tasks": list(cell.tasks),
        "meta_attribute": cell.meta_attribute,
        "select_on": config.select_on,
        "seeds": [r.seed for r in runs],
        "selected_epochs": [r.selected_epoch for r in runs],
        "scores": {t: {k: _agg_dict(v) for k, v in s.items()} for t, s in cell.scores.items()},
        "per_task_selected_sc": per_task_selected,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_aggregate(path) -> CellResult:
    doc = json.loads(Path(path).read_text())
    cell = CellResult(doc["sharing"], tuple(doc["tasks"]), doc["meta_attribute"])
    for t, s in doc["scores"].items():
        cell.scores[t] = {k: AggregateScore(v["mean"], v["std"], v["n"]) for k, v in s.items()}
    return cell

