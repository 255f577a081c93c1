"""Long-tailed class-size profiles, synthetic Gaussian blobs and IDX loading."""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .linalg import ContractError, RngStream, load_matrix, sample_gaussian, save_matrix

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# CIFAR10-LT / CIFAR100-LT absolute group thresholds (many_min, few_max)
CIFAR10_LT_THRESHOLDS = (1000, 200)
CIFAR100_LT_THRESHOLDS = (100, 20)


@dataclass(frozen=True)
class LongTailProfile:
    C: int
    N1: int
    rho: float

    def __post_init__(self):
        if self.C < 2:
            raise ContractError(f"need at least 2 classes, got C={self.C}")
        if self.N1 < 1:
            raise ContractError(f"head class size must be >= 1, got N1={self.N1}")
        if self.rho < 1:
            raise ContractError(f"imbalance factor must be >= 1, got rho={self.rho}")


def class_sizes(profile: LongTailProfile) -> list[int]:
    """Per-class counts ``max(1, round(N1 * rho**(-(k-1)/(C-1))))``.

    Python's ``round`` is round-half-to-even.
    """
    C, N1, rho = profile.C, profile.N1, profile.rho
    return [max(1, round(N1 * rho ** (-k / (C - 1)))) for k in range(C)]


def class_sizes_real(profile: LongTailProfile) -> np.ndarray:
    """Unrounded counts ``N1 * rho**(-(k-1)/(C-1))``."""
    k = np.arange(profile.C)
    return profile.N1 * float(profile.rho) ** (-k / (profile.C - 1))


def harmonic_mean(counts: Sequence[float]) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise ContractError("harmonic mean needs positive counts")
    if np.all(counts == counts[0]):
        return float(counts[0])
    return float(counts.size / math.fsum(1.0 / counts))


@dataclass(frozen=True, eq=False)
class LabeledSet:
    X: np.ndarray
    y: np.ndarray
    C: int
    class_counts: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ContractError(f"X shape {X.shape} does not match {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.C):
            raise ContractError(f"labels must lie in [0, {self.C})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        counts = np.bincount(y, minlength=self.C)
        object.__setattr__(self, "class_counts", tuple(int(c) for c in counts))

    @property
    def N(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.X[idx], self.y[idx], self.C)


def synth_gaussian_lt(
    profile: LongTailProfile,
    p: int,
    separation: float,
    cov_scale: float,
    rng: RngStream,
    val_per_class: int = 20,
    test_per_class: int = 100,
) -> tuple[LabeledSet, LabeledSet, LabeledSet]:
    """Isotropic Gaussian blobs whose means sit on a sphere of radius ``separation``.

    Returns (train, val, test); train follows ``profile``, val and test are balanced.
    """
    if separation <= 0:
        raise ContractError("separation must be positive")
    if cov_scale < 0:
        raise ContractError("cov_scale must be >= 0")
    C = profile.C
    dirs = sample_gaussian(rng.split(0), C, p)
    means = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def draw(counts, stream):
        xs, ys = [], []
        for k, n in enumerate(counts):
            xs.append(means[k] + sample_gaussian(stream.split(k), n, p, 0.0, cov_scale))
            ys.append(np.full(n, k))
        return LabeledSet(np.vstack(xs), np.concatenate(ys), C)

    train = draw(class_sizes(profile), rng.split(1))
    val = draw([val_per_class] * C, rng.split(2))
    test = draw([test_per_class] * C, rng.split(3))
    return train, val, test


def subsample_longtailed(balanced: LabeledSet, profile: LongTailProfile, rng: RngStream) -> LabeledSet:
    """Draw each class uniformly without replacement down to the profile's counts."""
    if profile.C != balanced.C:
        raise ContractError(f"profile has {profile.C} classes, data has {balanced.C}")
    target = class_sizes(profile)
    keep = []
    for k, n in enumerate(target):
        members = np.flatnonzero(balanced.y == k)
        if members.size < n:
            raise ContractError(f"class {k} has {members.size} samples, profile needs {n}")
        pick = rng.split(k).choice_without_replacement(members.size, n)
        keep.append(np.sort(members[pick]))
    return balanced.subset(np.concatenate(keep))


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(buf: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise ValueError(f"{what}: truncated header at byte 0")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise ValueError(f"{what}: bad magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise ValueError(f"{what}: truncated dimension table at byte {len(buf)}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    if len(buf) - start < need:
        raise ValueError(
            f"{what}: truncated payload at byte {len(buf)}; need {need} bytes from byte {start}"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(dims)


def load_idx(images_path, labels_path, C: int | None = None) -> LabeledSet:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if C is None:
        C = int(y.max()) + 1 if y.size else 1
    return LabeledSet(X, y, C)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ContractError("IDX images must be (n, rows, cols)")
    header = struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


class Group(str, Enum):
    MANY = "Many"
    MEDIUM = "Medium"
    FEW = "Few"


@dataclass(frozen=True)
class GroupAssignment:
    thresholds: tuple[float, float]
    groups: tuple[Group, ...]

    def members(self, group: Group) -> list[int]:
        return [k for k, g in enumerate(self.groups) if g == group]


def assign_groups(counts: Sequence[int], thresholds: tuple[float, float]) -> GroupAssignment:
    """Many if count > many_min, Few if count < few_max, Medium otherwise."""
    many_min, few_max = thresholds
    if few_max > many_min:
        raise ContractError(f"thresholds out of order: few_max={few_max} > many_min={many_min}")
    groups = []
    for n in counts:
        if n > many_min:
            groups.append(Group.MANY)
        elif n < few_max:
            groups.append(Group.FEW)
        else:
            groups.append(Group.MEDIUM)
    return GroupAssignment((many_min, few_max), tuple(groups))


def tertile_thresholds(counts: Sequence[int]) -> tuple[float, float]:
    """Split the log-count range [log min, log max] into three equal bands."""
    lo, hi = math.log(min(counts)), math.log(max(counts))
    if hi == lo:
        return (0.0, 0.0)
    step = (hi - lo) / 3.0
    return (math.exp(lo + 2 * step), math.exp(lo + step))


def save_labeled_set(directory, name: str, ds: LabeledSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_matrix(directory / f"{name}.bin", ds.X)
    sidecar = {"C": ds.C, "class_counts": list(ds.class_counts), "labels": ds.y.tolist()}
    (directory / f"{name}.json").write_text(json.dumps(sidecar, separators=(",", ":")) + "\n")


def load_labeled_set(directory, name: str) -> LabeledSet:
    directory = Path(directory)
    X = load_matrix(directory / f"{name}.bin")
    meta = json.loads((directory / f"{name}.json").read_text())
    ds = LabeledSet(X, np.asarray(meta["labels"], dtype=np.int64), int(meta["C"]))
    if list(ds.class_counts) != list(meta["class_counts"]):
        raise ValueError(f"{name}: class_counts in sidecar disagree with labels")
    return ds
