"""ICBHI evaluation: Sp / Se / Sc, metadata accuracy, seed aggregation and reports."""
from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .labels import META_CLASSES


class MetricsError(ValueError):
    pass


class IndexOutOfRange(MetricsError):
    pass


class LengthMismatch(MetricsError):
    pass


class EmptyNormalRow(MetricsError):
    pass


class EmptyAbnormalBlock(MetricsError):
    pass


class AllMasked(MetricsError):
    pass


class TooFewRuns(MetricsError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    classes: tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts, self.classes or other.classes)


def accumulate_confusion(predictions, labels, K: int, classes=()) -> ConfusionMatrix:
    preds = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labs = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labs.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {labs.size} labels")
    for arr in (preds, labs):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            raise IndexOutOfRange(f"class indices must lie in [0, {K})")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (labs, preds), 1)
    return ConfusionMatrix(counts, tuple(classes))


@dataclass(frozen=True)
class ScoreTriple:
    sp: float
    se: float
    sc: float


def icbhi_scores(cm: ConfusionMatrix | np.ndarray, normal_class: int = 0, exact: bool = False) -> ScoreTriple:
    """Specificity = normal-class recall; sensitivity = exact-class hits over all abnormal rows.

    With ``exact=True`` the fields are :class:`fractions.Fraction`.
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    K = counts.shape[0]
    normal_row = int(counts[normal_class].sum())
    if normal_row == 0:
        raise EmptyNormalRow("no examples of the normal class")
    abnormal = [c for c in range(K) if c != normal_class]
    abnormal_total = int(sum(int(counts[c].sum()) for c in abnormal))
    if abnormal_total == 0:
        raise EmptyAbnormalBlock("no examples of any abnormal class")
    sp = Fraction(int(counts[normal_class, normal_class]), normal_row)
    se = Fraction(sum(int(counts[c, c]) for c in abnormal), abnormal_total)
    sc = (sp + se) / 2
    if exact:
        return ScoreTriple(sp, se, sc)
    return ScoreTriple(float(sp), float(se), float(sc))


def metadata_accuracy(predictions, labels, mask=None) -> float:
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {labs.size} labels")
    mask = np.ones(preds.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise AllMasked("no unmasked examples")
    return float(np.mean(preds[mask] == labs[mask]))


@dataclass(frozen=True)
class AggregateScore:
    mean: float
    std: float | None
    n: int


def aggregate_runs(values) -> AggregateScore:
    """Mean and sample standard deviation (n - 1 denominator)."""
    values = [float(v) for v in values]
    if len(values) < 2:
        raise TooFewRuns(f"need at least 2 runs, got {len(values)}")
    return AggregateScore(statistics.fmean(values), statistics.stdev(values), len(values))


def aggregate_or_single(values) -> AggregateScore:
    values = [float(v) for v in values]
    if len(values) == 1:
        return AggregateScore(values[0], None, 1)
    return aggregate_runs(values)


def format_pct(agg: AggregateScore | None) -> str:
    if agg is None:
        return "-"
    std = "n/a" if agg.std is None or math.isnan(agg.std) else f"{agg.std * 100:.2f}"
    return f"{agg.mean * 100:.2f} ± {std}"


# ------------------------------------------------------------------- report

@dataclass
class CellResult:
    """Aggregated scores of one experiment-grid cell."""

    sharing: str
    tasks: tuple[str, ...]
    meta_attribute: str | None = None
    scores: dict[str, dict[str, AggregateScore]] = field(default_factory=dict)

    @property
    def method(self) -> str:
        if len(self.tasks) == 1:
            return "Single Lung Sound" if self.tasks[0] == "lung" else "Single Disease"
        name = "Hard" if self.sharing == "hard" else "Soft"
        if "meta" in self.tasks:
            return f"Tri-MTL {name} ({ATTRIBUTE_TITLES[self.meta_attribute]})"
        return f"Two-MTL {name}"

    @property
    def cell_id(self) -> str:
        if len(self.tasks) == 1:
            return f"single_{self.tasks[0]}"
        if "meta" in self.tasks:
            return f"{self.sharing}_tri_{self.meta_attribute}"
        return f"{self.sharing}_two"


ATTRIBUTE_TITLES = {"age_group": "Age Group", "sex": "Sex", "location": "Location", "stethoscope": "Stethoscope"}

ROW_ORDER = ["Single Lung Sound", "Single Disease", "Two-MTL Hard", "Two-MTL Soft"] + [
    f"Tri-MTL {s} ({ATTRIBUTE_TITLES[a]})" for s in ("Hard", "Soft") for a in META_CLASSES
]

# published scores (pretrained AST encoder): lung Sp, Se, Sc, disease Sp, Se, Sc, metadata accuracy
REFERENCE_SCORES = {
    "Single Lung Sound": ("77.14 ± 3.35", "41.97 ± 2.21", "59.55 ± 0.88", "-", "-", "-", "N/A"),
    "Single Disease": ("-", "-", "-", "74.4 ± 8.90", "88.61 ± 6.77", "81.51 ± 2.30", "N/A"),
    "Two-MTL Hard": ("68.93 ± 6.71", "45.42 ± 7.38", "57.17 ± 1.40", "79.32 ± 5.69", "89.81 ± 5.13",
                     "84.56 ± 5.01", "N/A"),
    "Two-MTL Soft": ("70.66 ± 6.12", "47.71 ± 5.07", "59.19 ± 0.93", "82.17 ± 5.50", "94.57 ± 5.38",
                     "88.37 ± 2.33", "N/A"),
    "Tri-MTL Hard (Age Group)": ("73.89 ± 1.17", "40.83 ± 3.35", "57.37 ± 1.91", "80.23 ± 4.91",
                                 "93.25 ± 5.21", "86.73 ± 3.68", "90.29 ± 3.63"),
    "Tri-MTL Hard (Sex)": ("73.57 ± 6.54", "39.10 ± 3.12", "56.33 ± 2.12", "76.57 ± 5.73", "93.35 ± 5.78",
                           "84.96 ± 7.28", "51.46 ± 3.25"),
    "Tri-MTL Hard (Location)": ("73.27 ± 6.80", "42.14 ± 5.91", "57.71 ± 2.19", "64.23 ± 4.89",
                                "96.85 ± 2.93", "80.54 ± 2.11", "18.04 ± 2.21"),
    "Tri-MTL Hard (Stethoscope)": ("75.86 ± 3.32", "45.28 ± 3.12", "58.21 ± 1.12", "81.89 ± 3.42",
                                   "95.82 ± 4.87", "88.86 ± 1.36", "76.08 ± 4.25"),
    "Tri-MTL Soft (Age Group)": ("61.93 ± 6.33", "53.67 ± 7.84", "57.80 ± 1.25", "85.71 ± 5.35",
                                 "93.32 ± 2.73", "89.47 ± 2.17", "92.11 ± 3.12"),
    "Tri-MTL Soft (Sex)": ("73.07 ± 6.67", "39.77 ± 3.18", "56.42 ± 2.37", "80.91 ± 5.78", "94.76 ± 1.50",
                           "87.84 ± 2.72", "53.06 ± 3.99"),
    "Tri-MTL Soft (Location)": ("70.64 ± 6.37", "46.15 ± 6.85", "58.40 ± 1.32", "79.43 ± 3.32",
                                "95.52 ± 1.29", "87.48 ± 3.80", "20.26 ± 0.47"),
    "Tri-MTL Soft (Stethoscope)": ("78.86 ± 7.36", "41.56 ± 6.69", "60.21 ± 1.42", "86.23 ± 6.50",
                                   "94.09 ± 0.18", "90.16 ± 3.19", "81.78 ± 5.46"),
}

COLUMNS = ["Lung Sp", "Lung Se", "Lung Sc", "Disease Sp", "Disease Se", "Disease Sc", "Meta Acc"]
REFERENCE_LABEL = "paper (pretrained AST, not a target)"
FOOTER = [
    "Values: mean ± sample std over seeds, in percent. Each seed reports the epoch with the highest selection Sc,",
    "chosen on the test split as in the original protocol; this selection leaks test information.",
    "Reference values are the published per-cell figures. The published summary text quotes 90.77 ± 1.36 (Soft, Stethoscope)",
    "and 84.56 ± 6.01 (Two-MTL Hard) for disease Sc where the table shows 90.16 ± 3.19 and 84.56 ± 5.01.",
]


def row_cells(cell: CellResult) -> list[str]:
    out = []
    for task in ("lung", "disease"):
        scores = cell.scores.get(task)
        for key in ("sp", "se", "sc"):
            out.append(format_pct(scores[key]) if scores else "-")
    meta = cell.scores.get("meta")
    out.append(format_pct(meta["accuracy"]) if meta else "N/A")
    return out


def _sorted_cells(cells):
    return sorted(cells, key=lambda c: ROW_ORDER.index(c.method) if c.method in ROW_ORDER else len(ROW_ORDER))


def render_report(cells: list[CellResult], reference: bool = False) -> str:
    """Aligned plain-text results table, one row per cell."""
    header = ["Method"] + COLUMNS
    rows = []
    for cell in _sorted_cells(cells):
        rows.append([cell.method] + row_cells(cell))
        if reference and cell.method in REFERENCE_SCORES:
            rows.append([f"  {REFERENCE_LABEL}"] + list(REFERENCE_SCORES[cell.method]))
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]

    def fmt(r):
        return "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths)))

    lines = [fmt(header), "-" * len(fmt(header))] + [fmt(r) for r in rows]
    return "\n".join(lines + [""] + FOOTER) + "\n"


def render_report_csv(cells: list[CellResult], reference: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + COLUMNS + (["reference"] if reference else []))
    for cell in _sorted_cells(cells):
        ref = [" | ".join(REFERENCE_SCORES.get(cell.method, ()))] if reference else []
        w.writerow([cell.method] + row_cells(cell) + ref)
    return buf.getvalue()
