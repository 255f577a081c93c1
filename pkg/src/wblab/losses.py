"""Cross entropy, class-balanced cross entropy and the weight regularizers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataset import harmonic_mean
from .linalg import ContractError


@dataclass(frozen=True)
class ClassWeights:
    multipliers: tuple[float, ...]
    provenance: str = "balanced"  # balanced | harmonic | effective_number

    def __post_init__(self):
        if any(not m > 0 for m in self.multipliers):
            raise ContractError("class weights must all be positive")

    @classmethod
    def balanced(cls, C: int) -> "ClassWeights":
        return cls(tuple([1.0] * C), "balanced")

    @classmethod
    def harmonic(cls, counts: Sequence[float]) -> "ClassWeights":
        """Weight ``Nbar / N_k`` with ``Nbar`` the harmonic mean of the counts."""
        nbar = harmonic_mean(counts)
        return cls(tuple(nbar / float(n) for n in counts), "harmonic")

    @classmethod
    def effective_number(cls, beta: float, counts: Sequence[float]) -> "ClassWeights":
        """Cui et al. weights ``(1 - beta) / (1 - beta**N_k)``, rescaled to sum to C."""
        if not 0 <= beta < 1:
            raise ContractError("effective-number beta must lie in [0, 1)")
        counts = np.asarray(counts, dtype=np.float64)
        w = (1.0 - beta) / (1.0 - np.power(beta, counts))
        w = w * counts.size / w.sum()
        return cls(tuple(float(v) for v in w), "effective_number")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.multipliers, dtype=np.float64)


@dataclass(frozen=True)
class RegConfig:
    lambda_wd: float = 0.0
    zeta_fr: float = 0.0
    maxnorm_eta: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.lambda_wd < 0 or self.zeta_fr < 0:
            raise ContractError("regularization strengths must be >= 0")
        if self.maxnorm_eta is not None and any(not e > 0 for e in self.maxnorm_eta):
            raise ContractError("MaxNorm caps must be positive")


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def per_sample_ce(logits: np.ndarray, y) -> np.ndarray:
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    return -logp[np.arange(logp.shape[0]), np.asarray(y)]


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(logits, dtype=np.float64)))


def _check_labels(logits, y):
    y = np.asarray(y, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ContractError(f"logits {logits.shape} and labels {y.shape} disagree")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ContractError("label out of range")
    return y


def ce_loss(logits: np.ndarray, y) -> tuple[float, np.ndarray]:
    """Mean cross entropy and its gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(logits, y)
    n = logits.shape[0]
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    d = np.exp(logp)
    d[rows, y] -= 1.0
    return float(loss), d / n


def cb_loss(logits: np.ndarray, y, weights: ClassWeights) -> tuple[float, np.ndarray]:
    """Cross entropy with each sample scaled by its class weight, batch-averaged."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(logits, y)
    w = weights.as_array()
    if w.shape[0] != logits.shape[1]:
        raise ContractError(f"{w.shape[0]} class weights for {logits.shape[1]} classes")
    n = logits.shape[0]
    logp = _log_softmax(logits)
    rows = np.arange(n)
    ws = w[y]
    loss = -(ws * logp[rows, y]).mean()
    d = np.exp(logp)
    d[rows, y] -= 1.0
    return float(loss), d * (ws / n)[:, None]


WD_SUBSETS = ("all", "exclude_bn")


def wd_selects(name: str, subset: str) -> bool:
    if subset == "all":
        return True
    if subset == "exclude_bn":
        return ".bn" not in name
    raise ContractError(f"unknown weight-decay subset {subset!r}")


def wd_penalty(params: Mapping[str, np.ndarray], lam: float, subset: str = "all") -> tuple[float, dict]:
    """``(lam/2) * sum ||theta||^2`` over the selected parameters and its gradient ``lam * theta``."""
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    penalty = 0.0
    grads = {}
    for name, value in params.items():
        if not wd_selects(name, subset):
            continue
        penalty += 0.5 * lam * float(np.sum(value * value))
        grads[name] = lam * value
    return penalty, grads


def fr_penalty(features: np.ndarray, zeta: float) -> tuple[float, np.ndarray]:
    """``(zeta/2) * mean_i ||g(x_i)||^2`` and its gradient ``(zeta/N) * features``."""
    if zeta < 0:
        raise ContractError("zeta must be >= 0")
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    return 0.5 * zeta * float(np.sum(features * features)) / n, (zeta / n) * features


def maxnorm_project(W: np.ndarray, eta) -> np.ndarray:
    """Scale column k by ``min(1, eta_k / ||w_k||)``; in-ball columns are returned unchanged.

    Columns within 4 ulps of the cap count as in-ball, which makes the projection idempotent.
    """
    W = np.array(W, dtype=np.float64, copy=True)
    eta = np.broadcast_to(np.asarray(eta, dtype=np.float64), (W.shape[1],))
    if np.any(eta <= 0):
        raise ContractError("MaxNorm caps must be positive")
    norms = np.linalg.norm(W, axis=0)
    # a few ulps of slack keeps projected columns fixed under a second projection
    over = norms > eta * (1.0 + 4 * np.finfo(np.float64).eps)
    W[:, over] *= eta[over] / norms[over]
    return W


def renormalize_columns(W: np.ndarray, target: float = 1.0) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0):
        raise ContractError(f"cannot renormalize zero column(s) {np.flatnonzero(norms == 0).tolist()}")
    return W * (target / norms)
