"""ICBHI corpus ingestion: filenames, annotations, labels, slicing and splits."""
from __future__ import annotations

import csv
import logging
import re
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .labels import DISEASE_CLASSES, LUNG_CLASSES, META_CLASSES

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SECONDS = 8
CLIP_SAMPLES = SAMPLE_RATE * CLIP_SECONDS
OVERRUN_TOLERANCE_S = 0.05

LOCATION_CODES = {
    "Tc": "Trachea",
    "Al": "AnteriorLeft",
    "Ar": "AnteriorRight",
    "Pl": "PosteriorLeft",
    "Pr": "PosteriorRight",
    "Ll": "LateralLeft",
    "Lr": "LateralRight",
}
MODE_CODES = {"sc": "single_channel", "mc": "multi_channel"}
STETHOSCOPES = META_CLASSES["stethoscope"]
SPLITS = ("Train", "Test")

# official ICBHI 2017 label counts per split
OFFICIAL_RECORDINGS = 920
OFFICIAL_COUNTS = {
    "lung": {"Train": {"Normal": 2063, "Crackle": 1215, "Wheeze": 501, "Both": 363},
             "Test": {"Normal": 1579, "Crackle": 649, "Wheeze": 385, "Both": 143}},
    "disease": {"Train": {"Healthy": 147, "Unhealthy": 3995},
                "Test": {"Healthy": 175, "Unhealthy": 2581}},
}


class IngestError(ValueError):
    pass


class MalformedFilename(IngestError):
    pass


class UnknownLocation(IngestError):
    pass


class UnknownDevice(IngestError):
    pass


class MalformedLine(IngestError):
    pass


class NonPositiveDuration(IngestError):
    pass


class EmptyDiagnosis(IngestError):
    pass


class NegativeAge(IngestError):
    pass


class EmptyCycle(IngestError):
    pass


class AnnotationOutOfRange(IngestError):
    pass


class MissingSplitEntry(IngestError):
    pass


class PatientOverlap(IngestError):
    pass


@dataclass(frozen=True)
class RecordingMeta:
    patient_id: int
    recording_token: str
    chest_location: str
    acquisition_mode: str
    stethoscope: str

    @property
    def stem(self) -> str:
        loc = {v: k for k, v in LOCATION_CODES.items()}[self.chest_location]
        mode = {v: k for k, v in MODE_CODES.items()}[self.acquisition_mode]
        return f"{self.patient_id}_{self.recording_token}_{loc}_{mode}_{self.stethoscope}"


@dataclass(frozen=True)
class CycleAnnotation:
    start_s: float
    end_s: float
    crackle: bool
    wheeze: bool

    def to_line(self) -> str:
        return f"{self.start_s}\t{self.end_s}\t{int(self.crackle)}\t{int(self.wheeze)}"


@dataclass(frozen=True)
class DemographicRecord:
    patient_id: int
    age_years: float | None
    sex: str | None
    age_group: str | None


@dataclass(frozen=True, eq=False)
class LabeledCycle:
    source_id: str
    patient_id: int
    lung_label: str
    disease_label: str
    meta: dict
    split: str
    samples: np.ndarray | None = None

    def label_index(self, task: str, attribute: str | None = None) -> int | None:
        if task == "lung":
            return LUNG_CLASSES.index(self.lung_label)
        if task == "disease":
            return DISEASE_CLASSES.index(self.disease_label)
        value = self.meta.get(attribute)
        return None if value is None else META_CLASSES[attribute].index(value)


# ------------------------------------------------------------------- parsing

def parse_filename(name: str) -> RecordingMeta:
    """Decode ``<patient>_<recording>_<loc>_<mode>_<device>.wav``."""
    stem = Path(name).name
    if stem.lower().endswith(".wav") or stem.lower().endswith(".txt"):
        stem = stem[:-4]
    parts = stem.split("_")
    if len(parts) != 5:
        raise MalformedFilename(f"{name!r}: expected 5 underscore-separated fields, got {len(parts)}")
    pid, token, loc, mode, device = parts
    if not pid.isdigit():
        raise MalformedFilename(f"{name!r}: patient id {pid!r} is not an integer")
    if loc not in LOCATION_CODES:
        raise UnknownLocation(f"{name!r}: unknown chest location {loc!r}")
    if mode not in MODE_CODES:
        raise MalformedFilename(f"{name!r}: unknown acquisition mode {mode!r}")
    if device not in STETHOSCOPES:
        raise UnknownDevice(f"{name!r}: unknown stethoscope {device!r}")
    return RecordingMeta(int(pid), token, LOCATION_CODES[loc], MODE_CODES[mode], device)


def parse_annotation_file(text: str) -> list[CycleAnnotation]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise MalformedLine(f"line {lineno}: expected 4 fields, got {len(fields)}")
        try:
            start, end = float(fields[0]), float(fields[1])
        except ValueError:
            raise MalformedLine(f"line {lineno}: non-numeric time") from None
        if fields[2] not in ("0", "1") or fields[3] not in ("0", "1"):
            raise MalformedLine(f"line {lineno}: flags must be 0 or 1")
        if start < 0:
            raise MalformedLine(f"line {lineno}: negative start time")
        if end <= start:
            raise NonPositiveDuration(f"line {lineno}: end {end} <= start {start}")
        out.append(CycleAnnotation(start, end, fields[2] == "1", fields[3] == "1"))
    return out


def derive_lung_label(crackle: bool, wheeze: bool) -> str:
    return LUNG_CLASSES[int(bool(crackle)) + 2 * int(bool(wheeze))]


def binarize_disease(diagnosis_name: str) -> str:
    name = (diagnosis_name or "").strip()
    if not name:
        raise EmptyDiagnosis("empty diagnosis name")
    return "Healthy" if name.lower() == "healthy" else "Unhealthy"


def binarize_age(age_years: float) -> str:
    if age_years < 0:
        raise NegativeAge(f"negative age {age_years}")
    return "Pediatric" if age_years <= 18 else "Adult"


def _split_fields(line: str) -> list[str]:
    return [f.strip() for f in line.split(",")] if "," in line else line.split()


def parse_diagnosis_table(text: str) -> dict[int, str]:
    """``patient_id, diagnosis`` rows; comma or whitespace separated, header tolerated."""
    out = {}
    for line in text.splitlines():
        fields = _split_fields(line)
        if len(fields) < 2 or not fields[0].isdigit():
            continue
        out[int(fields[0])] = binarize_disease(fields[1])
    return out


def _missing(value: str) -> bool:
    return value.strip().upper() in ("", "NA", "N/A", "NAN", "-")


def parse_demographics(text: str) -> dict[int, DemographicRecord]:
    """``patient_id, age, sex, ...`` rows; extra columns and unparseable values ignored."""
    out = {}
    for line in text.splitlines():
        fields = _split_fields(line)
        if not fields or not fields[0].isdigit():
            continue
        pid = int(fields[0])
        age = None
        if len(fields) > 1 and not _missing(fields[1]):
            try:
                age = float(fields[1])
            except ValueError:
                age = None
        sex = None
        if len(fields) > 2:
            sex = {"M": "Male", "F": "Female", "MALE": "Male", "FEMALE": "Female"}.get(fields[2].strip().upper())
        group = binarize_age(age) if age is not None else None
        out[pid] = DemographicRecord(pid, age, sex, group)
    return out


def parse_split_table(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        fields = line.split()
        if len(fields) < 2:
            continue
        flag = fields[1].lower()
        if flag not in ("train", "test"):
            raise MalformedLine(f"split entry {line!r}: expected train or test")
        out[Path(fields[0]).stem if fields[0].endswith(".wav") else fields[0]] = flag.capitalize()
    return out


# ------------------------------------------------------------------- audio

def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono float waveform in [-1, 1] (channel 0 of multi-channel files) and its rate."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", wavfile.WavFileWarning)
        rate, data = wavfile.read(path)
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        x = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    else:
        x = data.astype(np.float64)
    return x, int(rate)


def write_wav(path, samples: np.ndarray, rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, rate, pcm)


def resample_linear(x: np.ndarray, rate: int, target: int = SAMPLE_RATE) -> np.ndarray:
    if rate == target:
        return np.asarray(x, dtype=np.float64)
    n_out = int(round(len(x) * target / rate))
    t_out = np.arange(n_out) / target
    return np.interp(t_out, np.arange(len(x)) / rate, x)


def loop_pad(x: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    """Repeat ``x`` from its start until ``length``; truncate longer inputs to the prefix."""
    if len(x) >= length:
        return x[:length].copy()
    reps = -(-length // len(x))
    return np.tile(x, reps)[:length]


def slice_and_standardize(waveform: np.ndarray, rate: int, annotations: list[CycleAnnotation],
                          length: int = CLIP_SAMPLES) -> list[np.ndarray]:
    duration = len(waveform) / rate
    clips = []
    for i, ann in enumerate(annotations):
        end = ann.end_s
        if end > duration:
            overrun = end - duration
            if overrun > OVERRUN_TOLERANCE_S:
                raise AnnotationOutOfRange(f"cycle {i} ends {overrun:.3f}s past the recording")
            log.warning("cycle %d end clipped by %.3fs to recording length", i, overrun)
            end = duration
        lo, hi = int(round(ann.start_s * rate)), int(round(end * rate))
        cut = waveform[lo:hi]
        if cut.size == 0:
            raise EmptyCycle(f"cycle {i} [{ann.start_s}, {ann.end_s}) contains no samples")
        clips.append(loop_pad(resample_linear(cut, rate), length).astype(np.float32))
    return clips


# ------------------------------------------------------------------- corpus

@dataclass
class Dataset:
    cycles: list[LabeledCycle]
    official_split: bool = True
    skipped: dict = field(default_factory=dict)
    n_recordings: int = 0

    def split(self, name: str) -> list[LabeledCycle]:
        return [c for c in self.cycles if c.split == name]


def unofficial_split(patient_ids) -> dict[int, str]:
    """Deterministic 60/40 patient-level split seeded by each patient id."""
    return {pid: ("Train" if np.random.default_rng(pid).random() < 0.6 else "Test")
            for pid in sorted(set(patient_ids))}


def assign_split(cycles: list[LabeledCycle], split_table: dict[str, str]) -> dict[str, list[LabeledCycle]]:
    """Tag cycles with their recording's split and check patients never straddle splits."""
    parts = {s: [] for s in SPLITS}
    seen: dict[int, str] = {}
    for c in cycles:
        stem = c.source_id.rsplit("_", 1)[0]
        if stem not in split_table:
            raise MissingSplitEntry(f"recording {stem} has no split entry")
        split = split_table[stem]
        if seen.setdefault(c.patient_id, split) != split:
            raise PatientOverlap(f"patient {c.patient_id} appears in both splits")
        tagged = LabeledCycle(c.source_id, c.patient_id, c.lung_label, c.disease_label, c.meta, split, c.samples)
        parts[split].append(tagged)
    return parts


@dataclass
class DatasetSummary:
    lung: dict[str, Counter]
    disease: dict[str, Counter]
    meta: dict[str, dict[str, Counter]]
    totals: Counter

    def as_rows(self) -> list[tuple[str, str, str, int]]:
        rows = []
        for split in SPLITS:
            rows += [("lung", split, c, self.lung[split][c]) for c in LUNG_CLASSES]
            rows += [("disease", split, c, self.disease[split][c]) for c in DISEASE_CLASSES]
            for attr, vocab in META_CLASSES.items():
                rows += [(attr, split, v, self.meta[attr][split][v]) for v in vocab]
                rows.append((attr, split, "missing", self.meta[attr][split]["missing"]))
        return rows

    def format(self) -> str:
        lines = [f"{'group':<12}{'label':<16}{'Train':>8}{'Test':>8}{'Sum':>8}"]
        for group, table, vocab in (("lung", self.lung, LUNG_CLASSES), ("disease", self.disease, DISEASE_CLASSES)):
            for c in vocab:
                tr, te = table["Train"][c], table["Test"][c]
                lines.append(f"{group:<12}{c:<16}{tr:>8}{te:>8}{tr + te:>8}")
        for attr, vocab in META_CLASSES.items():
            for v in (*vocab, "missing"):
                tr, te = self.meta[attr]["Train"][v], self.meta[attr]["Test"][v]
                if tr or te:
                    lines.append(f"{attr:<12}{v:<16}{tr:>8}{te:>8}{tr + te:>8}")
        lines.append(f"{'total':<28}{self.totals['Train']:>8}{self.totals['Test']:>8}"
                     f"{self.totals['Train'] + self.totals['Test']:>8}")
        return "\n".join(lines)


def summarize(cycles: list[LabeledCycle]) -> DatasetSummary:
    lung = {s: Counter() for s in SPLITS}
    disease = {s: Counter() for s in SPLITS}
    meta = {a: {s: Counter() for s in SPLITS} for a in META_CLASSES}
    totals = Counter()
    for c in cycles:
        totals[c.split] += 1
        lung[c.split][c.lung_label] += 1
        disease[c.split][c.disease_label] += 1
        for attr in META_CLASSES:
            meta[attr][c.split][c.meta.get(attr) or "missing"] += 1
    return DatasetSummary(lung, disease, meta, totals)


def check_official_counts(summary: DatasetSummary) -> list[str]:
    """Per-cell differences against the published ICBHI counts; empty when all match."""
    diffs = []
    for group, table in (("lung", summary.lung), ("disease", summary.disease)):
        for split, expected in OFFICIAL_COUNTS[group].items():
            for label, want in expected.items():
                got = table[split][label]
                if got != want:
                    diffs.append(f"{group}/{split}/{label}: expected {want}, got {got}")
    return diffs


def _recording_cycles(wav_path: Path, diagnoses, demographics, keep_audio: bool):
    meta = parse_filename(wav_path.name)
    annotations = parse_annotation_file(wav_path.with_suffix(".txt").read_text())
    waveform, rate = read_wav(wav_path)
    clips = slice_and_standardize(waveform, rate, annotations)
    if meta.patient_id not in diagnoses:
        raise IngestError(f"{wav_path.name}: patient {meta.patient_id} missing from diagnosis table")
    demo = demographics.get(meta.patient_id)
    attrs = {
        "age_group": demo.age_group if demo else None,
        "sex": demo.sex if demo else None,
        "location": meta.chest_location,
        "stethoscope": meta.stethoscope,
    }
    stem = wav_path.stem
    return [LabeledCycle(f"{stem}_{i}", meta.patient_id, derive_lung_label(a.crackle, a.wheeze),
                         diagnoses[meta.patient_id], attrs, "", clip if keep_audio else None)
            for i, (a, clip) in enumerate(zip(annotations, clips))]


def _find_table(root: Path, patterns) -> Path | None:
    for pattern in patterns:
        hits = sorted(root.glob(pattern))
        if hits:
            return hits[0]
    return None


def load_corpus(root, keep_audio: bool = True, workers: int = 1) -> Dataset:
    """Ingest an ICBHI-layout directory.

    Recordings are processed independently (optionally on a thread pool); the
    result is always ordered by (recording stem, cycle index).
    """
    root = Path(root)
    diag_path = _find_table(root, ["*diagnosis*.csv", "*diagnosis*.txt"])
    if diag_path is None:
        raise IngestError(f"{root}: no diagnosis table found")
    demo_path = _find_table(root, ["*demographic*.csv", "*demographic*.txt"])
    split_path = _find_table(root, ["*train_test*.txt", "*split*.txt"])
    diagnoses = parse_diagnosis_table(diag_path.read_text())
    demographics = parse_demographics(demo_path.read_text()) if demo_path else {}

    wavs = sorted(p for p in root.rglob("*.wav") if p.with_suffix(".txt").exists())
    skipped: dict[str, str] = {}

    def work(path):
        try:
            return _recording_cycles(path, diagnoses, demographics, keep_audio)
        except IngestError as exc:
            skipped[path.name] = f"{type(exc).__name__}: {exc}"
            return []

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_recording = list(pool.map(work, wavs))
    else:
        per_recording = [work(p) for p in wavs]
    cycles = [c for group in per_recording for c in group]
    for name, reason in sorted(skipped.items()):
        log.warning("skipped %s (%s)", name, reason)

    if split_path is not None:
        table = parse_split_table(split_path.read_text())
        official = True
    else:
        log.warning("no split table found; using an unofficial deterministic 60/40 patient split")
        by_patient = unofficial_split(c.patient_id for c in cycles)
        table = {c.source_id.rsplit("_", 1)[0]: by_patient[c.patient_id] for c in cycles}
        official = False
    parts = assign_split(cycles, table)
    tagged = sorted(parts["Train"] + parts["Test"], key=_order_key)
    return Dataset(tagged, official, skipped, len(wavs) - len(skipped))


def _order_key(c: LabeledCycle):
    stem, idx = c.source_id.rsplit("_", 1)
    return stem, int(idx)


# ------------------------------------------------------------------- manifest

MANIFEST_FIELDS = ["source_id", "split", "patient_id", "lung_label", "disease_label",
                   "age_group", "sex", "location", "stethoscope"]


def write_manifest(path, cycles: list[LabeledCycle]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for c in cycles:
            w.writerow([c.source_id, c.split, c.patient_id, c.lung_label, c.disease_label,
                        c.meta.get("age_group") or "", c.meta.get("sex") or "",
                        c.meta["location"], c.meta["stethoscope"]])


def read_manifest(path) -> list[LabeledCycle]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            meta = {a: (row[a] or None) for a in META_CLASSES}
            out.append(LabeledCycle(row["source_id"], int(row["patient_id"]), row["lung_label"],
                                    row["disease_label"], meta, row["split"]))
    return out


def write_clip(path, samples: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(samples, dtype="<f4").tobytes())


def read_clip(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").astype(np.float32)


_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def clip_filename(source_id: str) -> str:
    return _SAFE.sub("_", source_id) + ".f32"
