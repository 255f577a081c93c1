"""Feature-space diagnostics: Fisher's discriminant ratio, class cosine heatmaps,
mean-feature norms, BN parameter statistics, forgetting scores and the
random linear-probe FDR experiment."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import ContractError, RngStream, SingularMatrixError, fmt_float, solve_spd


class FdrSingularError(SingularMatrixError):
    def __init__(self, pivot: int, jitter: float):
        super().__init__(pivot, jitter)
        self.args = (f"{self.args[0]}; within-class scatter is singular, pass a larger jitter",)


@dataclass
class FeatureStats:
    class_means: np.ndarray  # C x d
    global_mean: np.ndarray  # unweighted mean of class means
    per_class_mean_norms: np.ndarray
    counts: np.ndarray


def feature_stats(features: np.ndarray, labels, C: int | None = None) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    C = int(labels.max()) + 1 if C is None else C
    counts = np.bincount(labels, minlength=C)
    if np.any(counts == 0):
        raise ContractError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")
    sums = np.zeros((C, features.shape[1]))
    np.add.at(sums, labels, features)
    means = sums / counts[:, None]
    return FeatureStats(means, means.mean(axis=0), np.linalg.norm(means, axis=1), counts)


def scatter_matrices(features: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Between-class (counts-weighted, around the mean of class means) and within-class scatter."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    present, inv = np.unique(labels, return_inverse=True)
    stats = feature_stats(features, inv, len(present))
    dev = stats.class_means - stats.global_mean
    S_B = (dev * stats.counts[:, None]).T @ dev
    centered = features - stats.class_means[inv]
    S_W = centered.T @ centered
    return S_B, S_W


def default_jitter(S_W: np.ndarray) -> float:
    return 1e-8 * float(np.trace(S_W)) / S_W.shape[0]


def fdr(features: np.ndarray, labels, jitter: float | None = None) -> float:
    """``trace(S_W^{-1} S_B)``; ``jitter`` (default ``1e-8 tr(S_W)/d``) is added to S_W's diagonal."""
    labels = np.asarray(labels)
    n_classes = np.unique(labels).size
    if n_classes < 2:
        raise ContractError("FDR needs at least 2 classes")
    if labels.size <= n_classes:
        raise ContractError(f"FDR needs more samples ({labels.size}) than classes ({n_classes})")
    S_B, S_W = scatter_matrices(features, labels)
    j = default_jitter(S_W) if jitter is None else float(jitter)
    try:
        return float(np.trace(solve_spd(S_W, S_B, j)))
    except SingularMatrixError as err:
        raise FdrSingularError(err.pivot, j) from None


@dataclass
class CosineMatrix:
    values: np.ndarray  # C x C, NaN where undefined
    pair_counts: np.ndarray  # pairs averaged per cell
    exact: np.ndarray  # bool per cell: exhaustive vs subsampled
    excluded: int  # zero-norm features dropped
    undefined: list[tuple[int, int]]

    def off_diagonal_mean(self) -> float:
        mask = ~np.eye(self.values.shape[0], dtype=bool)
        return float(np.nanmean(self.values[mask]))

    def diagonal_mean(self) -> float:
        return float(np.nanmean(np.diag(self.values)))


def cosine_matrix(
    features: np.ndarray,
    labels,
    C: int | None = None,
    max_pairs_per_cell: int = 10_000,
    rng: RngStream | None = None,
    mode: str = "pairwise",
) -> CosineMatrix:
    """Mean cosine similarity between features of class j and class k.

    ``mode="pairwise"`` averages over sample pairs (self-pairs excluded on the
    diagonal), exhaustively up to ``max_pairs_per_cell`` and on a uniform
    sample of pairs above it.  ``mode="class_mean"`` compares class means.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    C = int(labels.max()) + 1 if C is None else C
    norms = np.linalg.norm(features, axis=1)
    keep = norms > 0
    excluded = int((~keep).sum())
    unit = features[keep] / norms[keep, None]
    lab = labels[keep]
    members = [np.flatnonzero(lab == k) for k in range(C)]
    if any(m.size == 0 for m in members):
        raise ContractError("every class needs at least one nonzero feature")
    values = np.full((C, C), np.nan)
    counts = np.zeros((C, C), dtype=np.int64)
    exact = np.ones((C, C), dtype=bool)
    undefined = []

    if mode == "class_mean":
        kept = features[keep]
        means = np.stack([kept[m].mean(axis=0) for m in members])
        mn = np.linalg.norm(means, axis=1)
        values = (means @ means.T) / np.outer(mn, mn)
        values = 0.5 * (values + values.T)
        return CosineMatrix(values, np.ones((C, C), dtype=np.int64), exact, excluded, undefined)
    if mode != "pairwise":
        raise ContractError(f"unknown cosine mode {mode!r}")

    rng = rng if rng is not None else RngStream(0, (0xC05,))
    for j in range(C):
        for k in range(j, C):
            a, b = unit[members[j]], unit[members[k]]
            na, nb = a.shape[0], b.shape[0]
            total = na * (na - 1) if j == k else na * nb
            if total == 0:
                undefined.append((j, k))
                continue
            if total <= max_pairs_per_cell:
                block = a @ b.T
                s = block.sum() - (np.trace(block) if j == k else 0.0)
                v, n = s / total, total
            else:
                cell = rng.split(j, k)
                ia = cell.integers(na, max_pairs_per_cell)
                if j == k:
                    ib = cell.integers(na - 1, max_pairs_per_cell)
                    ib = ib + (ib >= ia)
                else:
                    ib = cell.integers(nb, max_pairs_per_cell)
                v = float(np.einsum("ij,ij->i", a[ia], b[ib]).mean())
                n = max_pairs_per_cell
                exact[j, k] = exact[k, j] = False
            values[j, k] = values[k, j] = v
            counts[j, k] = counts[k, j] = n
    return CosineMatrix(values, counts, exact, excluded, undefined)


def mean_norms(features: np.ndarray, labels, C: int | None = None) -> np.ndarray:
    return feature_stats(features, labels, C).per_class_mean_norms


def bn_stats(net) -> dict[str, float]:
    """Mean and (population) std of every BN scaling / shifting parameter, pooled."""
    layers = net.bn_layers()
    if not layers:
        raise ContractError("network has no batch-norm layers")
    gamma = np.concatenate([l.gamma for l in layers])
    beta = np.concatenate([l.beta for l in layers])
    return {"gamma_mean": float(gamma.mean()), "gamma_std": float(gamma.std()),
            "beta_mean": float(beta.mean()), "beta_std": float(beta.std())}


@dataclass
class ForgettingRecord:
    per_sample: np.ndarray
    per_class: np.ndarray | None = None


def forgetting_scores(history, labels=None, C: int | None = None) -> ForgettingRecord:
    """Count correct-to-incorrect transitions between consecutive epochs, per sample."""
    h = np.asarray(history, dtype=bool)
    if h.ndim != 2 or h.shape[0] < 2:
        raise ContractError("forgetting scores need an (epochs >= 2) x N correctness history")
    per_sample = np.sum(h[:-1] & ~h[1:], axis=0).astype(np.int64)
    per_class = None
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        C = int(labels.max()) + 1 if C is None else C
        per_class = np.array([per_sample[labels == k].mean() if np.any(labels == k) else np.nan
                              for k in range(C)])
    return ForgettingRecord(per_sample, per_class)


def random_probe_fdr(
    features: np.ndarray,
    labels,
    probes: int,
    rng: RngStream,
    jitter: float | None = None,
    layers: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
) -> list[float | None]:
    """FDR before and after each of ``probes`` fresh random Linear+ReLU layers.

    Weights and biases are drawn from U[-1/sqrt(d), 1/sqrt(d)].  ``layers``
    injects explicit (weight, bias) pairs instead.  Entries are ``None`` where
    every activation died (all-zero output) and FDR is undefined.
    """
    if probes < 1:
        raise ContractError("need at least one probe")
    h = np.asarray(features, dtype=np.float64)
    out: list[float | None] = [fdr(h, labels, jitter)]
    d = h.shape[1]
    bound = 1.0 / np.sqrt(d)
    for t in range(probes):
        if layers is not None:
            Wp, bp = layers[t]
        else:
            stream = rng.split(t)
            Wp = stream.uniform((d, d), -bound, bound)
            bp = stream.uniform(d, -bound, bound)
        h = np.maximum(h @ np.asarray(Wp).T + np.asarray(bp), 0.0)
        if not np.any(h):
            out.append(None)
            continue
        try:
            out.append(fdr(h, labels, jitter))
        except SingularMatrixError:
            out.append(None)
    return out


def write_matrix_csv(path, M: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.atleast_2d(M):
            writer.writerow([fmt_float(v) for v in row])


def write_rows_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
