"""Simplex-ETF classifier heads, additive / multiplicative logit adjustment and
the validation grid search for their hyperparameters."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import GroupAssignment, LabeledSet
from .linalg import ContractError, RngStream, fmt_float, sample_gaussian

TAU_GRID = tuple(round(1.0 + 0.05 * i, 2) for i in range(21))
GAMMA_GRID = tuple(round(0.05 * i, 2) for i in range(21))


@dataclass(frozen=True)
class EtfSpec:
    d: int
    C: int
    E_W: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.C > self.d:
            raise ContractError(f"an ETF with C={self.C} columns needs d >= C, got d={self.d}")
        if self.C < 2:
            raise ContractError("an ETF needs at least 2 classes")
        if not self.E_W > 0:
            raise ContractError("E_W must be positive")


def make_etf(spec: EtfSpec) -> np.ndarray:
    """``sqrt(E_W * C/(C-1)) * U (I - 11^T/C)`` with U from a sign-fixed QR of a seeded Gaussian."""
    d, C = spec.d, spec.C
    G = sample_gaussian(RngStream(spec.seed, (0xE7F,)), d, C)
    Q, R = np.linalg.qr(G)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    U = Q * signs
    center = np.eye(C) - np.ones((C, C)) / C
    return np.sqrt(spec.E_W * C / (C - 1)) * (U @ center)


def is_etf(W: np.ndarray, E_W: float = 1.0, tol: float = 1e-9) -> bool:
    C = W.shape[1]
    target = E_W * C / (C - 1) * (np.eye(C) - np.ones((C, C)) / C)
    return bool(np.max(np.abs(W.T @ W - target)) <= tol)


@dataclass(frozen=True)
class ClassPriors:
    probs: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.probs)
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ContractError("class priors must be positive and sum to 1")

    @classmethod
    def from_counts(cls, counts: Sequence[float]) -> "ClassPriors":
        c = np.asarray(counts, dtype=np.float64)
        return cls(tuple(float(v) for v in c / c.sum()))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)


@dataclass(frozen=True)
class LaConfig:
    kind: str = "none"  # none | additive | multiplicative
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "additive", "multiplicative"):
            raise ContractError(f"unknown logit adjustment {self.kind!r}")
        if self.value < 0:
            raise ContractError("LA hyperparameter must be >= 0")


def multiplicative_la(W: np.ndarray, priors: ClassPriors, gamma: float) -> np.ndarray:
    """Column k becomes ``P(Y=k)**(-gamma) * w_k / ||w_k||``."""
    if gamma < 0:
        raise ContractError("gamma must be >= 0")
    W = np.asarray(W, dtype=np.float64)
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0):
        raise ContractError("multiplicative LA needs nonzero columns")
    return W / norms * priors.as_array() ** (-gamma)


def additive_la(logits: np.ndarray, priors: ClassPriors, tau: float) -> np.ndarray:
    return np.asarray(logits, dtype=np.float64) - tau * np.log(priors.as_array())


def additive_offset(priors: ClassPriors, tau: float) -> np.ndarray:
    return -tau * np.log(priors.as_array())


def per_class_accuracy(pred: np.ndarray, y: np.ndarray, C: int) -> np.ndarray:
    acc = np.full(C, np.nan)
    for k in range(C):
        mask = y == k
        if mask.any():
            acc[k] = float(np.mean(pred[mask] == k))
    return acc


def group_accuracies(per_class: np.ndarray, groups: GroupAssignment) -> dict[str, float]:
    out = {}
    for g in ("Many", "Medium", "Few"):
        idx = [k for k, gg in enumerate(groups.groups) if gg.value == g]
        vals = per_class[idx] if idx else np.array([])
        vals = vals[~np.isnan(vals)]
        out[g] = float(vals.mean()) if vals.size else float("nan")
    return out


@dataclass
class GridSearchResult:
    kind: str
    best: float
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "Many", "Medium", "Few", "average"])
            for r in self.rows:
                writer.writerow([fmt_float(r[k]) for k in ("parameter", "Many", "Medium", "Few", "average")])


def adjusted_logits(features: np.ndarray, W: np.ndarray, priors: ClassPriors, kind: str, value: float,
                    bias: np.ndarray | None = None) -> np.ndarray:
    if kind == "multiplicative":
        logits = features @ multiplicative_la(W, priors, value)
    else:
        logits = features @ W
    if bias is not None:
        logits = logits + bias
    if kind == "additive":
        logits = additive_la(logits, priors, value)
    return logits


def grid_search_la(
    features: np.ndarray,
    W: np.ndarray,
    val: LabeledSet,
    priors: ClassPriors,
    kind: str,
    grid: Sequence[float],
    groups: GroupAssignment,
    bias: np.ndarray | None = None,
) -> GridSearchResult:
    """Pick the LA strength maximizing mean per-class validation accuracy.

    ``features`` are the eval-mode extractor outputs for ``val``.  Ties go to
    the smaller parameter.
    """
    if not len(grid):
        raise ContractError("grid must be non-empty")
    if kind not in ("additive", "multiplicative"):
        raise ContractError(f"grid search needs an LA kind, got {kind!r}")
    rows = []
    for value in sorted(float(v) for v in grid):
        pred = np.argmax(adjusted_logits(features, W, priors, kind, value, bias), axis=1)
        pc = per_class_accuracy(pred, val.y, val.C)
        row = {"parameter": value, **group_accuracies(pc, groups), "average": float(np.nanmean(pc))}
        rows.append(row)
    best = rows[0]
    for r in rows[1:]:
        if r["average"] > best["average"]:
            best = r
    return GridSearchResult(kind, best["parameter"], rows)
