"""SGD with momentum, the cosine schedule, and the one- and two-stage method presets."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import network as nw
from .classifier import (
    GAMMA_GRID,
    TAU_GRID,
    ClassPriors,
    EtfSpec,
    GridSearchResult,
    LaConfig,
    additive_offset,
    grid_search_la,
    group_accuracies,
    make_etf,
    multiplicative_la,
    per_class_accuracy,
)
from .dataset import GroupAssignment, LabeledSet
from .linalg import ContractError, RngStream, SingularMatrixError
from .losses import ClassWeights, RegConfig, cb_loss, ce_loss, fr_penalty, maxnorm_project, renormalize_columns, wd_selects
from .metrics import fdr

SCOPES = ("whole", "head", "extractor")
LOSSES = ("ce", "cb")
BN_POLICIES = ("normal", "no_wd", "fixed_gamma")
HEAD_POLICIES = ("learned", "etf")

# desk-scale fixed-gamma search grid; the full grid is 0.01..0.20
DESK_BN_GAMMA_GRID = (0.02, 0.05, 0.1, 0.2)
FULL_BN_GAMMA_GRID = tuple(round(0.01 * i, 2) for i in range(1, 21))


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, lr: float, loss: float):
        self.epoch, self.batch, self.lr, self.loss = epoch, batch, lr, loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}, lr {lr:g}")


@dataclass(frozen=True)
class SgdConfig:
    lr0: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ContractError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")


@dataclass(frozen=True)
class StageSpec:
    scope: str = "whole"
    loss: str = "ce"
    reg: RegConfig = field(default_factory=RegConfig)
    bn_policy: str = "normal"
    bn_gamma: float | None = None  # fixed_gamma value; None means search on validation
    head_policy: str = "learned"
    renormalize: bool = False  # scale head columns to unit norm before the stage
    cb_beta: float | None = None  # effective-number weights instead of harmonic

    def __post_init__(self):
        for value, allowed, what in ((self.scope, SCOPES, "scope"), (self.loss, LOSSES, "loss"),
                                     (self.bn_policy, BN_POLICIES, "bn policy"),
                                     (self.head_policy, HEAD_POLICIES, "head policy")):
            if value not in allowed:
                raise ContractError(f"unknown {what} {value!r}; expected one of {allowed}")
        if self.scope == "head" and self.head_policy == "etf":
            raise ContractError("a head-only stage cannot train a fixed ETF head")

    @property
    def wd_subset(self) -> str:
        return "all" if self.bn_policy == "normal" else "exclude_bn"


@dataclass(frozen=True)
class MethodPreset:
    name: str
    stages: tuple[StageSpec, ...]
    post_hoc: LaConfig = field(default_factory=LaConfig)
    la_grid: tuple[float, ...] | None = None
    bn_gamma_grid: tuple[float, ...] = DESK_BN_GAMMA_GRID

    def __post_init__(self):
        if not self.stages:
            raise ContractError("a preset needs at least one stage")

    def grid(self) -> tuple[float, ...]:
        if self.la_grid is not None:
            return self.la_grid
        return TAU_GRID if self.post_hoc.kind == "additive" else GAMMA_GRID


@dataclass
class EpochLog:
    stage: int
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    wall_ms: float

    def record(self) -> dict:
        """Deterministic fields only; wall time stays in memory so log files replay byte-identically."""
        return {"stage": self.stage, "epoch": self.epoch, "lr": self.lr, "train_loss": self.train_loss,
                "train_acc": self.train_acc}


@dataclass
class StageLog:
    epochs: list[EpochLog]
    correct: np.ndarray  # epochs x N, indexed by original sample position


@dataclass
class EvalReport:
    per_class: np.ndarray
    groups: dict[str, float]
    average: float
    fdr_train: float | None = None
    fdr_test: float | None = None

    def to_dict(self) -> dict:
        return {"per_class": [float(v) for v in self.per_class], "groups": dict(self.groups),
                "average": self.average, "fdr_train": self.fdr_train, "fdr_test": self.fdr_test}


def cosine_lr(lr0: float, t: float, T: float) -> float:
    if not 0 <= t <= T:
        raise ContractError(f"epoch {t} outside [0, {T}]")
    if T == 0:
        return lr0
    return lr0 * ((1.0 + math.cos(math.pi * t / T)) / 2.0)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    out = [order[i:i + batch_size] for i in range(0, order.size, batch_size)]
    # a lone trailing sample cannot be batch-normalized; fold it into the previous batch
    if len(out) > 1 and out[-1].size == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def _prepare(net: nw.Network, stage: StageSpec) -> None:
    if stage.head_policy == "etf" and not net.head_fixed:
        net.set_W(make_etf(EtfSpec(net.feature_dim, net.n_classes)))
        if net.head.bias is not None:
            net.head.bias[:] = 0.0
        net.head.trainable = False
        net.head_fixed = True
    if stage.bn_policy == "fixed_gamma":
        if stage.bn_gamma is None:
            raise ContractError("fixed-gamma stage needs a gamma value")
        for bn in net.bn_layers():
            bn.fix_gamma(stage.bn_gamma)
            bn.freeze_beta(0.0)
    if stage.renormalize:
        net.set_W(renormalize_columns(net.W, 1.0))
    net.touch()


def _trainable(net: nw.Network, stage: StageSpec) -> list[nw.ParamSlot]:
    slots = []
    for s in net.param_slots():
        if not s.trainable or (s.kind == "head" and net.head_fixed):
            continue
        if stage.scope == "head" and s.kind != "head":
            continue
        if stage.scope == "extractor" and s.kind == "head":
            continue
        slots.append(s)
    return slots


def _loss_fn(stage: StageSpec, train: LabeledSet):
    if stage.loss == "ce":
        return ce_loss
    if stage.cb_beta is None:
        weights = ClassWeights.harmonic(train.class_counts)
    else:
        weights = ClassWeights.effective_number(stage.cb_beta, train.class_counts)
    return lambda logits, y: cb_loss(logits, y, weights)


def train_stage(net: nw.Network, data: LabeledSet, stage: StageSpec, sgd: SgdConfig, rng: RngStream,
                stage_index: int = 0) -> tuple[nw.Network, StageLog]:
    """Run one training stage in place and return (net, log).

    Head-only stages train on eval-mode features computed once up front, so
    the extractor and its BN running statistics are left untouched.
    """
    if data.p != net.spec.input_dim or data.C != net.n_classes:
        raise ContractError(f"data ({data.p} features, {data.C} classes) does not fit the network")
    _prepare(net, stage)
    slots = _trainable(net, stage)
    loss_fn = _loss_fn(stage, data)
    reg = stage.reg
    lam = reg.lambda_wd
    wd_names = {s.name for s in slots if wd_selects(s.name, stage.wd_subset)} if lam > 0 else set()
    velocity = {s.name: np.zeros_like(s.value) for s in slots}
    head_only = stage.scope == "head"
    cached_features = nw.forward(net, data.X, "eval")[0] if head_only else None

    logs: list[EpochLog] = []
    correct = np.zeros((sgd.epochs, data.N), dtype=bool)
    for epoch in range(sgd.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(sgd.lr0, epoch, sgd.epochs)
        order = rng.split(epoch).permutation(data.N)
        losses, weights = [], []
        for b, idx in enumerate(_batches(order, sgd.batch_size)):
            y = data.y[idx]
            if head_only:
                F = cached_features[idx]
                logits = net.head.forward(F)
                loss, dlogits = loss_fn(logits, y)
                grads = {"head.weight": dlogits.T @ F}
                if net.head.bias is not None:
                    grads["head.bias"] = dlogits.sum(axis=0)
            else:
                F, logits, cache = nw.forward(net, data.X[idx], "train")
                loss, dlogits = loss_fn(logits, y)
                dfeat = None
                if reg.zeta_fr > 0:
                    fr, dfeat = fr_penalty(F, reg.zeta_fr)
                    loss += fr
                grads = nw.backward(net, cache, dlogits, dfeat)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b, lr, loss)
            correct[epoch, idx] = np.argmax(logits, axis=1) == y
            losses.append(loss)
            weights.append(idx.size)
            for s in slots:
                g = grads[s.name]
                if s.name in wd_names:
                    g = g + lam * s.value
                v = velocity[s.name]
                v *= sgd.momentum
                v += g
                s.value[...] -= lr * v
            if reg.maxnorm_eta is not None:
                eta = reg.maxnorm_eta if len(reg.maxnorm_eta) > 1 else reg.maxnorm_eta[0]
                net.head.weight[...] = maxnorm_project(net.W, eta).T
            net.touch()
        logs.append(EpochLog(stage_index, epoch, lr, float(np.average(losses, weights=weights)),
                             float(correct[epoch].mean()), (time.perf_counter() - t0) * 1000.0))
    return net, StageLog(logs, correct)


def _safe_fdr(features, labels) -> float | None:
    try:
        return fdr(features, labels)
    except (SingularMatrixError, ContractError):
        return None


def evaluate(net: nw.Network, test: LabeledSet, groups: GroupAssignment, train: LabeledSet | None = None) -> EvalReport:
    F, logits, _ = nw.forward(net, test.X, "eval")
    pred = np.argmax(logits, axis=1)
    pc = per_class_accuracy(pred, test.y, test.C)
    fdr_train = None
    if train is not None:
        fdr_train = _safe_fdr(nw.forward(net, train.X, "eval")[0], train.y)
    return EvalReport(pc, group_accuracies(pc, groups), float(np.nanmean(pc)), fdr_train, _safe_fdr(F, test.y))


@dataclass
class PresetParams:
    """Hyperparameters shared by every named preset."""

    lambda1: float = 5e-3
    lambda2: float = 0.1
    zeta: float = 1e-2
    maxnorm_eta: float = 1.0
    cb_beta: float | None = None


def _stage1(p: PresetParams, *, loss="ce", wd=True, fr=False, etf=False, bn="normal") -> StageSpec:
    reg = RegConfig(lambda_wd=p.lambda1 if wd else 0.0, zeta_fr=p.zeta if fr else 0.0)
    return StageSpec(scope="extractor" if etf else "whole", loss=loss, reg=reg, bn_policy=bn,
                     head_policy="etf" if etf else "learned", cb_beta=p.cb_beta)


def _base_stages(base: str, p: PresetParams) -> tuple[StageSpec, ...]:
    if base == "ce":
        return (_stage1(p, wd=False),)
    if base == "cb":
        return (_stage1(p, loss="cb", wd=False),)
    if base == "wd":
        return (_stage1(p),)
    if base == "cb_wd":
        return (_stage1(p, loss="cb"),)
    if base in ("wb", "wb_renorm"):
        if base == "wb":
            reg2 = RegConfig(lambda_wd=p.lambda2, maxnorm_eta=(p.maxnorm_eta,))
        else:
            reg2 = RegConfig(lambda_wd=p.lambda2)
        stage2 = StageSpec(scope="head", loss="cb", reg=reg2, renormalize=base == "wb_renorm", cb_beta=p.cb_beta)
        return (_stage1(p), stage2)
    if base == "wd_etf":
        return (_stage1(p, etf=True),)
    if base == "wd_fr_etf":
        return (_stage1(p, fr=True, etf=True),)
    if base == "wd_no_bn":
        return (_stage1(p, bn="no_wd"),)
    if base == "wd_fixed_bn":
        return (_stage1(p, bn="fixed_gamma"),)
    if base == "wd_no_bn_etf":
        return (_stage1(p, bn="no_wd", etf=True),)
    if base == "wd_fixed_bn_etf":
        return (_stage1(p, bn="fixed_gamma", etf=True),)
    raise ContractError(f"unknown preset {base!r}")


BASE_PRESETS = ("ce", "cb", "wd", "cb_wd", "wb", "wb_renorm", "wd_etf", "wd_fr_etf",
                "wd_no_bn", "wd_fixed_bn", "wd_no_bn_etf", "wd_fixed_bn_etf")
LA_SUFFIXES = {"": "none", "+add": "additive", "+mult": "multiplicative"}

# report row order: the ablation table first, then the BN variants and everything else
_LA3 = ("", "+add", "+mult")
PRESET_ORDER = tuple(
    ["ce", "cb"] + [f"wd{s}" for s in _LA3] + ["wb"]
    + [f"{b}{s}" for b in ("wd_etf", "wd_fr_etf", "wd_no_bn_etf", "wd_fixed_bn_etf") for s in _LA3]
    + [f"{b}{s}" for b in ("wd_no_bn", "wd_fixed_bn", "cb_wd", "wb_renorm") for s in _LA3]
    + ["ce+add", "ce+mult", "cb+add", "cb+mult", "wb+add", "wb+mult"]
)


def preset_names() -> tuple[str, ...]:
    return PRESET_ORDER


def build_preset(name: str, params: PresetParams | None = None, la_grid: Sequence[float] | None = None,
                 bn_gamma_grid: Sequence[float] = DESK_BN_GAMMA_GRID) -> MethodPreset:
    """Named recipe ``<base>[+add|+mult]``, e.g. ``wd_fr_etf+mult``."""
    params = params or PresetParams()
    base, suffix = name, ""
    for s in ("+add", "+mult"):
        if name.endswith(s):
            base, suffix = name[: -len(s)], s
    if base not in BASE_PRESETS:
        raise ContractError(f"unknown preset {name!r}; known bases: {', '.join(BASE_PRESETS)}")
    return MethodPreset(name, _base_stages(base, params), LaConfig(LA_SUFFIXES[suffix]),
                        None if la_grid is None else tuple(la_grid), tuple(bn_gamma_grid))


@dataclass
class Splits:
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet


@dataclass
class RunArtifacts:
    stage_logs: list[StageLog]
    la_search: GridSearchResult | None = None
    bn_gamma: float | None = None
    bn_gamma_search: list[tuple[float, float]] = field(default_factory=list)

    def log_records(self) -> list[dict]:
        return [e.record() for log in self.stage_logs for e in log.epochs]


def _run_stages(preset: MethodPreset, splits: Splits, sgds: Sequence[SgdConfig], spec: nw.NetSpec,
                bn_gamma: float | None):
    net = nw.init_network(spec, RngStream(sgds[0].seed, (0,)))
    logs = []
    for i, (stage, sgd) in enumerate(zip(preset.stages, sgds)):
        if stage.bn_policy == "fixed_gamma":
            stage = replace(stage, bn_gamma=bn_gamma if stage.bn_gamma is None else stage.bn_gamma)
        net, log = train_stage(net, splits.train, stage, sgd, RngStream(sgd.seed, (1, i)), i)
        logs.append(log)
    return net, logs


def run_preset(preset: MethodPreset, splits: Splits, sgds: Sequence[SgdConfig] | SgdConfig, spec: nw.NetSpec,
               groups: GroupAssignment) -> tuple[nw.Network, EvalReport, RunArtifacts]:
    """Train every stage, tune post-hoc LA on validation, then evaluate on test.

    Initialization draws from substream (seed, 0); stage i shuffles from (seed, 1, i).
    """
    if isinstance(sgds, SgdConfig):
        sgds = [sgds] * len(preset.stages)
    if len(sgds) != len(preset.stages):
        raise ContractError(f"{len(preset.stages)} stages but {len(sgds)} SGD configs")
    needs_gamma = any(s.bn_policy == "fixed_gamma" and s.bn_gamma is None for s in preset.stages)
    gamma, gamma_rows = None, []
    if needs_gamma:
        best = None
        for g in sorted(preset.bn_gamma_grid):
            cand, logs = _run_stages(preset, splits, sgds, spec, g)
            acc = evaluate(cand, splits.val, groups).average
            gamma_rows.append((g, acc))
            if best is None or acc > best[0]:
                best = (acc, g, cand, logs)
        _, gamma, net, logs = best
    else:
        net, logs = _run_stages(preset, splits, sgds, spec, None)

    search = None
    if preset.post_hoc.kind != "none":
        priors = ClassPriors.from_counts(splits.train.class_counts)
        feats = nw.forward(net, splits.val.X, "eval")[0]
        search = grid_search_la(feats, net.W, splits.val, priors, preset.post_hoc.kind, preset.grid(), groups,
                                net.head.bias)
        if preset.post_hoc.kind == "multiplicative":
            net.set_W(multiplicative_la(net.W, priors, search.best))
        else:
            net.logit_offset = additive_offset(priors, search.best)
            net.touch()
    report = evaluate(net, splits.test, groups, splits.train)
    return net, report, RunArtifacts(logs, search, gamma, gamma_rows)
