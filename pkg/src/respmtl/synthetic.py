"""Deterministic synthetic corpora for tests and smoke runs."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import CLIP_SAMPLES, SAMPLE_RATE, LabeledCycle, parse_annotation_file, write_wav
from .labels import LUNG_CLASSES

# (stem, native rate, duration s, annotation text)
FIXTURE_RECORDINGS = [
    ("101_1b1_Al_sc_Meditron", 4000, 10.0,
     "0.0\t2.0\t0\t0\n2.0\t4.5\t1\t0\n4.5\t7.0\t0\t1\n7.0\t9.8\t1\t1\n"),
    ("101_2b2_Pr_mc_AKGC417L", 44100, 16.0,
     "0.5\t3.0\t1\t0\n3.0\t5.2\t0\t0\n5.2\t16.03\t0\t0\n"),
    ("102_1b1_Tc_sc_LittC2SE", 4000, 8.0,
     "0.2\t2.4\t0\t0\n2.4\t4.9\t0\t0\n4.9\t7.5\t0\t1\n"),
    ("103_1b1_Ll_sc_Litt3200", 10000, 6.5,
     "0.0\t3.1\t0\t0\n3.1\t6.0\t0\t0\n"),
    ("104_1b1_Ar_mc_AKGC417L", 16000, 8.0,
     "0.0\t2.5\t1\t0\n2.5\t5.0\t0\t0\n5.0\t7.5\t1\t1\n"),
    ("105_3b4_Lr_sc_Meditron", 4000, 6.5,
     "1.0\t3.5\t0\t1\n3.5\t6.0\t0\t0\n"),
]
FIXTURE_DIAGNOSIS = "patient_id,diagnosis\n101,COPD\n102,Healthy\n103,Healthy\n104,URTI\n105,COPD\n"
# ICBHI-style whitespace table: id, age, sex, adult BMI, child weight, child height
FIXTURE_DEMOGRAPHICS = ("101 70 M 25.1 NA NA\n102 8 F NA 25 125\n103 NA NA NA NA NA\n"
                        "104 18 M NA 60 170\n105 45 F 22.0 NA NA\n")
FIXTURE_SPLIT = ("101_1b1_Al_sc_Meditron\ttrain\n101_2b2_Pr_mc_AKGC417L\ttrain\n102_1b1_Tc_sc_LittC2SE\ttest\n"
                 "103_1b1_Ll_sc_Litt3200\ttrain\n104_1b1_Ar_mc_AKGC417L\ttest\n105_3b4_Lr_sc_Meditron\ttest\n")


def _breath(n: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, n)
    kernel = np.ones(8) / 8
    env = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / max(n, 1))
    return 0.1 * np.convolve(noise, kernel, mode="same") * env


def _cycle_audio(n: int, rate: int, crackle: bool, wheeze: bool, rng) -> np.ndarray:
    x = _breath(n, rate, rng)
    t = np.arange(n) / rate
    if wheeze:
        x += 0.2 * np.sin(2 * np.pi * min(400.0, rate / 4) * t)
    if crackle:
        for pos in rng.integers(0, n, size=max(1, n // (rate // 8))):
            width = max(2, rate // 1000)
            x[pos:pos + width] += 0.5 * rng.choice([-1.0, 1.0])
    return x


def make_fixture_corpus(root, seed: int = 0) -> Path:
    """Write the six-recording ICBHI-layout fixture under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for stem, rate, duration, annotation in FIXTURE_RECORDINGS:
        n = int(round(duration * rate))
        audio = _breath(n, rate, rng)
        for ann in parse_annotation_file(annotation):
            lo = int(round(ann.start_s * rate))
            hi = min(n, int(round(ann.end_s * rate)))
            audio[lo:hi] = _cycle_audio(hi - lo, rate, ann.crackle, ann.wheeze, rng)
        write_wav(root / f"{stem}.wav", np.clip(audio, -1, 1), rate)
        (root / f"{stem}.txt").write_text(annotation)
    (root / "patient_diagnosis.csv").write_text(FIXTURE_DIAGNOSIS)
    (root / "demographic_info.txt").write_text(FIXTURE_DEMOGRAPHICS)
    (root / "ICBHI_challenge_train_test.txt").write_text(FIXTURE_SPLIT)
    return root


# lung class -> tone frequencies (Hz)
TONE_PATTERNS = {
    "Normal": (250.0,),
    "Crackle": (900.0,),
    "Wheeze": (2400.0,),
    "Both": (900.0, 2400.0),
}


def tone_clip(lung_label: str, disease_label: str, rng: np.random.Generator) -> np.ndarray:
    """8 s clip: lung class sets the tones, disease class sets the noise colour."""
    t = np.arange(CLIP_SAMPLES) / SAMPLE_RATE
    x = np.zeros(CLIP_SAMPLES)
    for f in TONE_PATTERNS[lung_label]:
        f = f * rng.uniform(0.97, 1.03)
        x += rng.uniform(0.15, 0.25) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    noise = rng.normal(0.0, 1.0, CLIP_SAMPLES)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(CLIP_SAMPLES, 1 / SAMPLE_RATE)
    band = (freqs < 1500) if disease_label == "Healthy" else (freqs > 4000)
    coloured = np.fft.irfft(spectrum * band, n=CLIP_SAMPLES)
    coloured /= coloured.std() + 1e-12
    return (x + rng.uniform(0.05, 0.08) * coloured).astype(np.float32)


def tone_corpus(n_per_combo: int = 50, seed: int = 0, train_fraction: float = 0.6):
    """Separable corpus: 4 tone patterns x 2 noise profiles.

    Yields ``LabeledCycle`` objects with samples attached, in a fixed order.
    """
    rng = np.random.default_rng(seed)
    n_train = int(round(n_per_combo * train_fraction))
    k = 0
    for lung in LUNG_CLASSES:
        for disease in ("Healthy", "Unhealthy"):
            for i in range(n_per_combo):
                split = "Train" if i < n_train else "Test"
                clip = tone_clip(lung, disease, rng)
                meta = {"age_group": None, "sex": None, "location": "Trachea", "stethoscope": "Meditron"}
                yield LabeledCycle(f"tone_{k:04d}_0", 1000 + k, lung, disease, meta, split, clip)
                k += 1

