"""Log-mel spectrogram front-end and patch extraction."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAMPLE_RATE = 16000


class FeatureError(ValueError):
    pass


class ClipTooShort(FeatureError):
    pass


class ZeroStd(FeatureError):
    pass


class PatchLargerThanInput(FeatureError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 64
    f_min: float = 50.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft <= 0 or self.n_fft & (self.n_fft - 1):
            raise FeatureError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise FeatureError("hop must lie in (0, n_fft]")
        if not 0 <= self.f_min < self.f_max <= SAMPLE_RATE / 2:
            raise FeatureError("need 0 <= f_min < f_max <= 8000")
        if self.log_floor <= 0:
            raise FeatureError("log_floor must be positive")
        if self.n_mels <= 0:
            raise FeatureError("n_mels must be positive")
        if self.window not in ("hann", "rect"):
            raise FeatureError(f"unknown window {self.window!r}")

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.n_fft) // self.hop + 1


@dataclass
class MelSpectrogram:
    values: np.ndarray  # n_mels x n_frames
    config: FeatureConfig


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    @classmethod
    def fit(cls, specs) -> NormStats:
        """Global mean/std over a collection of training spectrograms."""
        arrs = [s.values if isinstance(s, MelSpectrogram) else np.asarray(s) for s in specs]
        total = sum(a.size for a in arrs)
        mu = sum(float(a.sum(dtype=np.float64)) for a in arrs) / total
        var = sum(float(((a - mu) ** 2).sum(dtype=np.float64)) for a in arrs) / total
        return cls(mu, float(np.sqrt(var)))


def _window(config: FeatureConfig) -> np.ndarray:
    if config.window == "rect":
        return np.ones(config.n_fft)
    # periodic Hann
    n = np.arange(config.n_fft)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / config.n_fft)


def stft_magnitude(clip, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """|rFFT| of windowed frames, shape (n_fft/2 + 1, n_frames). No centre padding."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 1 or clip.size < config.n_fft:
        raise ClipTooShort(f"clip of {clip.size} samples is shorter than n_fft={config.n_fft}")
    frames = sliding_window_view(clip, config.n_fft)[:: config.hop]
    return np.abs(np.fft.rfft(frames * _window(config), axis=-1)).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(config: FeatureConfig) -> np.ndarray:
    mels = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2)
    return mel_to_hz(mels)[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular filters on the mel scale with unit peak, shape (n_mels, n_fft/2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2))
    freqs = np.arange(config.n_fft // 2 + 1) * SAMPLE_RATE / config.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def log_mel_spectrogram(clip, config: FeatureConfig = FeatureConfig()) -> MelSpectrogram:
    power = stft_magnitude(clip, config) ** 2
    mel = mel_filterbank(config) @ power
    return MelSpectrogram(np.log(mel + config.log_floor), config)


def normalize_spectrogram(spec: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    if not stats.std > 0:
        raise ZeroStd("normalisation std must be positive")
    return MelSpectrogram((spec.values - stats.mean) / stats.std, spec.config)


def patchify(spec, patch=(16, 16), stride=None):
    """Row-major grid of flattened patches; incomplete border patches are dropped.

    Accepts a single matrix or a batch (..., H, W). Returns ``(patches, (gh, gw))``
    with patches shaped (..., gh*gw, h*w).
    """
    values = spec.values if isinstance(spec, MelSpectrogram) else np.asarray(spec)
    h, w = patch
    sh, sw = stride or patch
    H, W = values.shape[-2:]
    if h > H or w > W:
        raise PatchLargerThanInput(f"patch {patch} exceeds input {(H, W)}")
    win = sliding_window_view(values, (h, w), axis=(-2, -1))[..., ::sh, ::sw, :, :]
    gh, gw = win.shape[-4], win.shape[-3]
    lead = values.shape[:-2]
    return np.ascontiguousarray(win).reshape(*lead, gh * gw, h * w), (gh, gw)


def patch_count(shape, patch, stride=None) -> int:
    (H, W), (h, w) = shape, patch
    sh, sw = stride or patch
    return ((H - h) // sh + 1) * ((W - w) // sw + 1)


# ---------------------------------------------------------------- cache files

def write_feature_file(path, spec: MelSpectrogram) -> None:
    """JSON header (config + shape), then row-major float32 LE values."""
    header = json.dumps({"config": asdict(spec.config), "shape": list(spec.values.shape)},
                        sort_keys=True).encode()
    body = np.ascontiguousarray(spec.values, dtype="<f4").tobytes()
    Path(path).write_bytes(struct.pack("<I", len(header)) + header + body)


def read_feature_file(path) -> MelSpectrogram:
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4:4 + n])
    values = np.frombuffer(data, dtype="<f4", offset=4 + n).reshape(header["shape"])
    return MelSpectrogram(values.astype(np.float32), FeatureConfig(**header["config"]))
