"""Encoders, task heads and the hard/soft multitask losses."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import (LayerNorm, Linear, Module, Parameter, Tensor, broadcast_to, concat, gelu, l2_pairwise_reg,
                       matmul, mean, mul, reshape, softmax, transpose, weighted_cross_entropy)
from .autodiff.tensor import ShapeMismatch
from .features import patch_count, patchify
from .labels import DISEASE_CLASSES, LUNG_CLASSES, META_CLASSES

HARD = "hard"
SOFT = "soft"


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "mini_transformer"
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    patch: tuple[int, int] = (16, 16)
    stride: tuple[int, int] = (16, 16)
    pooling: str = "mean"
    input_shape: tuple[int, int] = (64, 249)
    mlp_ratio: int = 4

    def validate(self):
        if self.kind not in ("mlp", "mini_transformer"):
            raise InvalidSpec(f"unknown encoder kind {self.kind!r}")
        if self.embed_dim <= 0 or self.depth <= 0:
            raise InvalidSpec("embed_dim and depth must be positive")
        if self.pooling not in ("mean", "cls_token"):
            raise InvalidSpec(f"unknown pooling {self.pooling!r}")
        if self.kind == "mini_transformer":
            if self.heads <= 0 or self.embed_dim % self.heads:
                raise InvalidSpec("embed_dim must be divisible by heads")
            if self.patch[0] > self.input_shape[0] or self.patch[1] > self.input_shape[1]:
                raise InvalidSpec("patch larger than input")


@dataclass(frozen=True)
class TaskSet:
    tasks: tuple[str, ...] = ("lung", "disease")
    meta_attribute: str | None = None

    def __post_init__(self):
        if not 1 <= len(self.tasks) <= 3 or len(set(self.tasks)) != len(self.tasks):
            raise InvalidSpec(f"bad task list {self.tasks}")
        for t in self.tasks:
            if t not in ("lung", "disease", "meta"):
                raise InvalidSpec(f"unknown task {t!r}")
        if "meta" in self.tasks:
            if self.meta_attribute not in META_CLASSES:
                raise InvalidSpec(f"meta task needs an attribute from {sorted(META_CLASSES)}")
            if not {"lung", "disease"} <= set(self.tasks):
                raise InvalidSpec("the metadata task is only added on top of lung + disease")
        elif len(self.tasks) == 3:
            raise InvalidSpec("three tasks require the metadata task")

    def n_classes(self, task: str) -> int:
        return len(self.class_names(task))

    def class_names(self, task: str) -> tuple[str, ...]:
        if task == "lung":
            return LUNG_CLASSES
        if task == "disease":
            return DISEASE_CLASSES
        return META_CLASSES[self.meta_attribute]

    @property
    def T(self) -> int:
        return len(self.tasks)


def _rng(seed: int, key: str) -> np.random.Generator:
    # keyed by component name so a task's tower is drawn identically whatever else is in the model
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


class Attention(Module):
    def __init__(self, dim, heads, rng, dtype):
        self.heads = heads
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        H = self.heads
        dh = D // H

        def split(t):
            return transpose(reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        ctx = matmul(softmax(scores, axis=-1), v)
        return self.wo(reshape(transpose(ctx, (0, 2, 1, 3)), (B, N, D)))


class Block(Module):
    def __init__(self, dim, heads, mlp_ratio, rng, dtype):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, dtype)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, dtype)

    def __call__(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(gelu(self.fc1(self.ln2(x))))


class MiniTransformer(Module):
    """Patch-embedding transformer encoder over a (n_mels x n_frames) input."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator, dtype=np.float64):
        self.spec = spec
        D = spec.embed_dim
        n = patch_count(spec.input_shape, spec.patch, spec.stride)
        self.patch_embed = Linear(spec.patch[0] * spec.patch[1], D, rng, dtype)
        if spec.pooling == "cls_token":
            self.cls = Parameter(rng.uniform(-0.02, 0.02, size=(1, 1, D)).astype(dtype))
            n += 1
        self.pos = Parameter(rng.uniform(-0.02, 0.02, size=(1, n, D)).astype(dtype))
        self.blocks = [Block(D, spec.heads, spec.mlp_ratio, rng, dtype) for _ in range(spec.depth)]
        self.norm = LayerNorm(D, dtype)

    def __call__(self, x: np.ndarray) -> Tensor:
        x = np.asarray(x, dtype=self.pos.dtype)
        patches, _ = patchify(x, self.spec.patch, self.spec.stride)
        tokens = self.patch_embed(Tensor(patches))
        B = tokens.shape[0]
        if self.spec.pooling == "cls_token":
            tokens = concat([broadcast_to(self.cls, (B, 1, self.spec.embed_dim)), tokens], axis=1)
        tokens = tokens + self.pos
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        if self.spec.pooling == "cls_token":
            first = matmul(Tensor(_first_selector(tokens.shape[1], tokens.dtype)), tokens)
            return reshape(first, (B, self.spec.embed_dim))
        return mean(tokens, axis=1)


def _first_selector(n, dtype):
    sel = np.zeros((1, n), dtype=dtype)
    sel[0, 0] = 1.0
    return sel


class MLPEncoder(Module):
    def __init__(self, spec: EncoderSpec, rng: np.random.Generator, dtype=np.float64):
        self.spec = spec
        n_in = spec.input_shape[0] * spec.input_shape[1]
        dims = [n_in] + [spec.embed_dim] * spec.depth
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: np.ndarray) -> Tensor:
        x = np.asarray(x, dtype=self.layers[0].weight.dtype)
        h = Tensor(x.reshape(x.shape[0], -1))
        for layer in self.layers:
            h = gelu(layer(h))
        return h


def make_encoder(spec: EncoderSpec, rng, dtype):
    spec.validate()
    return MiniTransformer(spec, rng, dtype) if spec.kind == "mini_transformer" else MLPEncoder(spec, rng, dtype)


class MtlModel(Module):
    """Encoders plus one affine head per task.

    Hard sharing holds one encoder under the key ``"shared"``; soft sharing
    holds one encoder per task, keyed by task name, each feeding its own head.
    """

    def __init__(self, encoder_spec: EncoderSpec, task_set: TaskSet, sharing: str = HARD,
                 lam: float = 0.1, reg_layers: Iterable[str] | None = None, seed: int = 0,
                 dtype=np.float64):
        if sharing not in (HARD, SOFT):
            raise InvalidSpec(f"sharing must be 'hard' or 'soft', got {sharing!r}")
        self.encoder_spec = encoder_spec
        self.task_set = task_set
        self.sharing = sharing
        self.lam = float(lam)
        self.reg_layers = None if reg_layers is None else tuple(reg_layers)
        self.seed = seed
        keys = ["shared"] if sharing == HARD else list(task_set.tasks)
        self.encoders = {k: make_encoder(encoder_spec, _rng(seed, f"encoder/{k}"), dtype) for k in keys}
        self.heads = {t: Linear(encoder_spec.embed_dim, task_set.n_classes(t), _rng(seed, f"head/{t}"), dtype)
                      for t in task_set.tasks}
        for name, p in self.named_parameters():
            p.name = name

    @property
    def tasks(self) -> tuple[str, ...]:
        return self.task_set.tasks

    def encoder_for(self, task: str) -> str:
        return "shared" if self.sharing == HARD else task

    def embed(self, x, encoder: str | None = None) -> Tensor:
        if encoder is None:
            encoder = next(iter(self.encoders))
        if encoder not in self.encoders:
            raise KeyError(f"no encoder named {encoder!r}; have {sorted(self.encoders)}")
        return self.encoders[encoder](x)

    def forward(self, x) -> dict[str, Tensor]:
        x = np.asarray(x)
        if x.shape[1:] != tuple(self.encoder_spec.input_shape):
            raise ShapeMismatch(f"expected inputs of shape (B, {self.encoder_spec.input_shape}), got {x.shape}")
        if self.sharing == HARD:
            h = self.encoders["shared"](x)
            return {t: self.heads[t](h) for t in self.tasks}
        return {t: self.heads[t](self.encoders[t](x)) for t in self.tasks}

    __call__ = forward

    def encoder_params(self) -> list[dict[str, Parameter]]:
        return [enc.parameters() for enc in self.encoders.values()]

    def regularized_names(self) -> list[str] | None:
        if self.reg_layers is None:
            return None
        names = self.encoder_params()[0]
        return [n for n in names if any(n.startswith(pref) for pref in self.reg_layers)]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(arrays):
            raise InvalidSpec("parameter names in checkpoint do not match the model")
        for n, p in params.items():
            if arrays[n].shape != p.shape:
                raise ShapeMismatch(f"{n}: {arrays[n].shape} vs {p.shape}")
            p.data[...] = arrays[n]


def build_model(encoder_spec: EncoderSpec, task_set: TaskSet, sharing: str = HARD, lam: float = 0.1,
                reg_layers=None, seed: int = 0, dtype=np.float64) -> MtlModel:
    return MtlModel(encoder_spec, task_set, sharing, lam, reg_layers, seed, dtype)


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, Tensor] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        out = {k: v.item() for k, v in self.components.items()}
        out["total"] = self.total.item()
        return out


def loss_hard(logits: dict[str, Tensor], labels: dict, masks: dict | None = None,
              weights: dict | None = None) -> LossBreakdown:
    """Sum of per-task weighted cross entropies."""
    masks = masks or {}
    weights = weights or {}
    comps = {t: weighted_cross_entropy(z, labels[t], weights.get(t), masks.get(t)) for t, z in logits.items()}
    total = None
    for c in comps.values():
        total = c if total is None else total + c
    return LossBreakdown(total, comps)


def loss_soft(logits, labels, masks, weights, encoders, lam: float, reg_layers=None) -> LossBreakdown:
    """Task losses plus the pairwise L2 pull between encoder parameters."""
    out = loss_hard(logits, labels, masks, weights)
    reg = l2_pairwise_reg(encoders, reg_layers, lam)
    out.components["reg"] = reg
    out.total = out.total + reg
    return out


def model_loss(model: MtlModel, logits, labels, masks=None, weights=None) -> LossBreakdown:
    if model.sharing == HARD:
        return loss_hard(logits, labels, masks, weights)
    return loss_soft(logits, labels, masks, weights, model.encoder_params(), model.lam, model.regularized_names())
