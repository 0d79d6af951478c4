"""On-disk glue between the ingest output directory and the training code."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import LabeledCycle, clip_filename, read_clip, read_manifest
from .features import (FeatureConfig, MelSpectrogram, NormStats, log_mel_spectrogram, read_feature_file,
                       write_feature_file)
from .models import TaskSet
from .training import TaskData

MANIFEST = "manifest.csv"
CLIPS = "clips"
FEATURES = "features"


def feature_matrix(data_dir, cycles: list[LabeledCycle], config: FeatureConfig) -> np.ndarray:
    """Log-mel features for every cycle, cached per source id under ``features/``."""
    data_dir = Path(data_dir)
    cache = data_dir / FEATURES
    cache.mkdir(exist_ok=True)
    out = []
    for c in cycles:
        path = cache / (clip_filename(c.source_id)[:-4] + ".feat")
        spec = read_feature_file(path) if path.exists() else None
        if spec is None or spec.config != config:
            samples = c.samples if c.samples is not None else read_clip(data_dir / CLIPS / clip_filename(c.source_id))
            spec = log_mel_spectrogram(samples, config)
            spec = MelSpectrogram(spec.values.astype(np.float32), config)
            write_feature_file(path, spec)
        out.append(spec.values)
    return np.stack(out) if out else np.zeros((0, config.n_mels, 0), dtype=np.float32)


def load_splits(data_dir, task_set: TaskSet, config: FeatureConfig):
    """Normalised train/test ``TaskData`` plus the training-split normalisation stats."""
    cycles = read_manifest(Path(data_dir) / MANIFEST)
    X = feature_matrix(data_dir, cycles, config)
    train_idx = [i for i, c in enumerate(cycles) if c.split == "Train"]
    test_idx = [i for i, c in enumerate(cycles) if c.split == "Test"]
    stats = NormStats.fit(X[train_idx])
    X = ((X - stats.mean) / stats.std).astype(np.float32)
    data = TaskData.from_cycles(X, cycles, task_set)
    return data.subset(train_idx), data.subset(test_idx), stats, cycles
