"""Embedding export and 2-D projections (PCA, exact t-SNE) with scatter output."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .autodiff import no_grad

log = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


class UnknownEncoder(AnalysisError):
    pass


class PerplexityOutOfRange(AnalysisError):
    pass


class UnknownLabelField(AnalysisError):
    pass


@dataclass
class EmbeddingTable:
    source_ids: list[str]
    vectors: np.ndarray
    labels: dict[str, list[str]] = field(default_factory=dict)

    def __len__(self):
        return len(self.source_ids)


@dataclass
class Projection2D:
    source_ids: list[str]
    xy: np.ndarray
    labels: dict[str, list[str]] = field(default_factory=dict)
    info: dict = field(default_factory=dict)


def export_embeddings(model, x: np.ndarray, source_ids, labels: dict[str, list[str]] | None = None,
                      encoder: str | None = None, batch_size: int = 64) -> EmbeddingTable:
    """Pooled encoder outputs (before any head). Soft models need ``encoder`` named."""
    if encoder is None:
        if len(model.encoders) > 1:
            raise UnknownEncoder(f"model has several encoders {sorted(model.encoders)}; name one")
        encoder = next(iter(model.encoders))
    if encoder not in model.encoders:
        raise UnknownEncoder(f"no encoder {encoder!r}; have {sorted(model.encoders)}")
    dtype = next(iter(model.parameters().values())).dtype
    x = np.asarray(x, dtype=dtype)
    chunks = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            chunks.append(model.embed(x[start:start + batch_size], encoder).data)
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, model.encoder_spec.embed_dim))
    return EmbeddingTable(list(source_ids), vectors, dict(labels or {}))


# ------------------------------------------------------------------------ PCA

def pca2(table: EmbeddingTable | np.ndarray) -> Projection2D:
    """Project onto the top two principal axes; each axis' largest-magnitude loading is positive."""
    X, ids, labels = _unpack(table)
    if len(X) < 3:
        raise AnalysisError("PCA needs at least 3 rows")
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    axes = vt[:2].copy()
    for a in axes:
        if a[np.argmax(np.abs(a))] < 0:
            a *= -1
    xy = Xc @ axes.T
    var = s**2 / (len(X) - 1)
    tol = max(X.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    if s.size < 2 or s[1] <= tol:
        log.warning("covariance has rank < 2; second PCA axis set to zero")
        xy[:, 1] = 0.0
        if axes.shape[0] > 1:
            axes[1] = 0.0
    total = var.sum()
    ratio = var[:2] / total if total > 0 else np.zeros(2)
    return Projection2D(ids, xy, labels, {"axes": axes, "explained_variance_ratio": ratio})


# ---------------------------------------------------------------------- t-SNE

def _sq_distances(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    p = np.exp(-(d - d.min()) * beta)
    sp = p.sum()
    p /= sp
    H = -np.sum(p[p > 0] * np.log(p[p > 0]))
    return H, p


def conditional_probabilities(X: np.ndarray, perplexity: float, tol: float = 1e-5,
                              max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Row-conditional Gaussian affinities with bandwidths bisected to the target perplexity.

    Returns ``(P, beta)`` where ``beta = 1 / (2 sigma^2)`` per row.
    """
    D = _sq_distances(np.asarray(X, dtype=np.float64))
    n = len(D)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        d = np.delete(D[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_iter):
            H, p = _row_entropy(d, beta)
            diff = H - target
            if abs(diff) < tol:
                break
            if diff > 0:  # too flat: sharpen
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p
        betas[i] = beta
    return P, betas


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = 1.0 / (1.0 + _sq_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne_exact(table: EmbeddingTable | np.ndarray, perplexity: float = 30.0, iterations: int = 1000,
               seed: int = 0, learning_rate: float = 200.0, exaggeration: float = 12.0,
               exaggeration_iters: int = 250, tol: float = 1e-5) -> Projection2D:
    """Exact O(n^2) t-SNE with momentum, per-coordinate gains and early exaggeration.

    ``info["kl"]`` holds the KL objective (unexaggerated P) after every iteration.
    """
    X, ids, labels = _unpack(table)
    n = len(X)
    if n > 5000:
        raise AnalysisError("exact t-SNE is limited to 5000 points")
    if not 0 < perplexity <= n - 1:
        raise PerplexityOutOfRange(f"perplexity {perplexity} not in (0, {n - 1}] for n={n}")
    if not 3 <= perplexity < n / 3:
        log.warning("perplexity %.3g is outside the recommended range [3, n/3) for n=%d", perplexity, n)

    P_cond, _ = conditional_probabilities(X, perplexity, tol)
    P = (P_cond + P_cond.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kls = []
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _sq_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        kls.append(kl_divergence(P, Y))
    return Projection2D(ids, Y, labels, {"kl": np.array(kls), "perplexity": perplexity})


def silhouette_score(X: np.ndarray, labels) -> float:
    """Mean silhouette coefficient under Euclidean distance."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise AnalysisError("silhouette needs at least two labels")
    D = np.sqrt(_sq_distances(X))
    s = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        n_own = own.sum() - 1
        if n_own == 0:
            continue
        a = D[i, own].sum() / n_own
        b = min(D[i, labels == c].mean() for c in classes if c != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


def _unpack(table):
    if isinstance(table, EmbeddingTable):
        return np.asarray(table.vectors, dtype=np.float64), list(table.source_ids), dict(table.labels)
    X = np.asarray(table, dtype=np.float64)
    return X, [str(i) for i in range(len(X))], {}


# -------------------------------------------------------------------- scatter

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


def write_scatter(proj: Projection2D, color_by: str, csv_path, svg_path=None, size: int = 480) -> list[str]:
    """Write ``source_id,x,y,label`` CSV (and a standalone SVG); returns the legend order."""
    if color_by not in proj.labels and len(proj.source_ids):
        raise UnknownLabelField(f"no label field {color_by!r}; have {sorted(proj.labels)}")
    labels = list(proj.labels.get(color_by, []))
    legend = list(dict.fromkeys(labels))
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "x", "y", "label"])
        for sid, (x, y), lab in zip(proj.source_ids, proj.xy, labels):
            w.writerow([sid, repr(float(x)), repr(float(y)), lab])
    if svg_path is not None:
        Path(svg_path).write_text(_svg(proj.xy, labels, legend, size))
    return legend


def _svg(xy, labels, legend, size):
    pad, legend_w = 20, 140
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + legend_w}" height="{size}" '
             f'viewBox="0 0 {size + legend_w} {size}">',
             f'<rect width="{size + legend_w}" height="{size}" fill="white"/>']
    if len(xy):
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        pts = pad + (xy - lo) / span * (size - 2 * pad)
        for (px, py), lab in zip(pts, labels):
            color = PALETTE[legend.index(lab) % len(PALETTE)]
            parts.append(f'<circle cx="{px:.2f}" cy="{size - py:.2f}" r="3" fill="{color}" fill-opacity="0.8"/>')
    for k, lab in enumerate(legend):
        y = pad + 18 * k
        parts.append(f'<circle cx="{size + 10}" cy="{y}" r="5" fill="{PALETTE[k % len(PALETTE)]}"/>')
        parts.append(f'<text x="{size + 20}" y="{y + 4}" font-family="sans-serif" font-size="12">'
                     f'{escape(str(lab))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
