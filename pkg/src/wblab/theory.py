"""Numerical checks of the cone-effect bound, the harmonic/arithmetic count ratio
and the stationary point of the second-stage weight-balancing objective."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import network as nw
from .classifier import EtfSpec, make_etf
from .dataset import LabeledSet, LongTailProfile, class_sizes, class_sizes_real, harmonic_mean
from .linalg import ContractError, RngStream, fmt_float
from .losses import softmax


class PremiseError(ContractError):
    def __init__(self, premises: list["Premise"]):
        self.premises = premises
        failed = "; ".join(p.describe() for p in premises if not p.satisfied)
        super().__init__(f"premise violated: {failed}")


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, grad_norm: float):
        self.iterations, self.grad_norm = iterations, grad_norm
        super().__init__(f"no convergence after {iterations} iterations, gradient norm {grad_norm:.3e}")


@dataclass
class Premise:
    name: str
    value: float
    threshold: float
    relation: str  # "<", "<=", ">"
    satisfied: bool

    def describe(self) -> str:
        return f"{self.name} = {self.value:.6g} {self.relation} {self.threshold:.6g} is {self.satisfied}"


@dataclass
class TheoremReport:
    name: str
    premises: list[Premise] = field(default_factory=list)
    measured: dict = field(default_factory=dict)
    bound: float | None = None
    holds: bool | None = None  # None: premises not met, nothing claimed
    tables: dict = field(default_factory=dict)  # name -> {"header": [...], "rows": [[...]]}

    @property
    def applicable(self) -> bool:
        return all(p.satisfied for p in self.premises)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, np.ndarray):
                return clean(v.tolist())
            if isinstance(v, (np.floating, float)):
                return None if not math.isfinite(v) else float(v)
            if isinstance(v, (np.integer, np.bool_)):
                return v.item()
            return v

        return json.dumps(clean(asdict(self)), indent=1, sort_keys=True) + "\n"

    def write_csv(self, table: str, path) -> None:
        t = self.tables[table]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(t["header"])
            for row in t["rows"]:
                w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


# cone effect

@dataclass(frozen=True)
class ConeBoundInput:
    C: int
    epsilon: float
    L: float


def cone_delta(inp: ConeBoundInput) -> float:
    C, eps, L = inp.C, inp.epsilon, inp.L
    if not (0 < eps < 1) or not L > 0 or C < 3:
        return math.nan
    return (1.0 / L) * ((C - 1) / C) * math.log((C - 1) * (1 - eps) / eps)


def cone_premises(inp: ConeBoundInput) -> list[Premise]:
    C, eps, L = inp.C, inp.epsilon, inp.L
    l_max = 2 * math.sqrt(2) * math.log(C - 1) if C > 2 else 0.0
    delta = cone_delta(inp)
    return [
        Premise("epsilon", eps, 1.0 / C, "<", bool(0 < eps < 1.0 / C)),
        Premise("L", L, l_max, "<=", bool(0 < L <= l_max)),
        Premise("delta_min", delta, 1 / math.sqrt(2), ">", bool(delta > 1 / math.sqrt(2))),
        Premise("delta_max", delta, 1.0, "<=", bool(delta <= 1.0)),
    ]


def cone_bound_value(delta: float) -> float:
    return 2.0 * delta * math.sqrt(max(0.0, 1.0 - delta * delta))


def cone_bound(inp: ConeBoundInput) -> tuple[float, float]:
    """Return (delta, 2 delta sqrt(1 - delta^2)); raises PremiseError outside the theorem's range."""
    prem = cone_premises(inp)
    if not all(p.satisfied for p in prem):
        raise PremiseError(prem)
    delta = cone_delta(inp)
    return delta, cone_bound_value(delta)


def _interclass_max_cosine(F: np.ndarray, y: np.ndarray, max_pairs: int, rng: RngStream):
    norms = np.linalg.norm(F, axis=1)
    keep = norms > 0
    U = F[keep] / norms[keep, None]
    lab = y[keep]
    n = lab.size
    total = (n * n - int(np.sum(np.bincount(lab) ** 2))) // 2
    if total == 0:
        return -math.inf, 0, True, int((~keep).sum())
    if total <= max_pairs:
        worst = -math.inf
        step = max(1, 4_000_000 // max(n, 1))
        for s in range(0, n, step):
            G = U[s:s + step] @ U.T
            G[lab[s:s + step, None] == lab[None, :]] = -math.inf
            worst = max(worst, float(G.max()))
        return worst, total, True, int((~keep).sum())
    i = rng.integers(n, max_pairs)
    j = rng.integers(n, max_pairs)
    inter = lab[i] != lab[j]
    cos = np.einsum("ij,ij->i", U[i[inter]], U[j[inter]])
    return float(cos.max(initial=-math.inf)), int(inter.sum()), False, int((~keep).sum())


def check_theorem1(net: nw.Network, data: LabeledSet, max_pairs: int = 5_000_000,
                   rng: RngStream | None = None) -> TheoremReport:
    """Measure epsilon and L on ``data`` and compare every inter-class cosine to the cone bound.

    The head must be a unit-energy simplex ETF without bias; otherwise the
    report is marked not applicable like any other unmet premise.

    Per-sample feature gradients ``W (softmax - onehot)`` come from an eval-mode
    backward pass.  Zero-norm features are excluded from the cosine check.
    """
    C = net.n_classes
    gram_err = float(np.max(np.abs(net.W.T @ net.W - C / (C - 1) * (np.eye(C) - 1.0 / C))))
    bias_max = 0.0 if net.head.bias is None else float(np.max(np.abs(net.head.bias)))
    F, logits, cache = nw.forward(net, data.X, "eval")
    if net.logit_offset is not None:
        logits = logits - net.logit_offset
    d = softmax(logits)
    d[np.arange(data.N), data.y] -= 1.0
    g = nw.backward(net, cache, d)["features"]
    eps = float(np.linalg.norm(g, axis=1).max())
    L = float(np.linalg.norm(F, axis=1).max())
    inp = ConeBoundInput(data.C, eps, L)
    report = TheoremReport("theorem1", [Premise("etf_gram_error", gram_err, 1e-9, "<=", gram_err <= 1e-9),
                                        Premise("head_bias", bias_max, 0.0, "<=", bias_max == 0.0)]
                           + cone_premises(inp))
    delta = cone_delta(inp)
    worst, pairs, exact, zeros = _interclass_max_cosine(F, data.y, max_pairs, rng or RngStream(0, (0xC0E,)))
    report.measured = {"epsilon": eps, "L": L, "delta": delta, "max_interclass_cosine": worst,
                       "pairs_checked": pairs, "exhaustive": exact, "zero_norm_features": zeros}
    if not report.applicable:
        return report
    report.bound = cone_bound_value(delta)
    report.holds = bool(worst <= report.bound + 1e-9)
    return report


# harmonic / arithmetic count ratio

def amhm_ratio(rho: float, C: int) -> float:
    """Closed form ``rho C (rho^(1/(C-1)) - 1)^2 / (rho^(C/(C-1)) - 1)^2``."""
    if rho < 1 or C < 2:
        raise ContractError("need rho >= 1 and C >= 2")
    if rho == 1:
        return 1.0 / C
    if C == 2:
        return 2.0 * rho / (1.0 + rho) ** 2  # the general form with (rho - 1)^2 cancelled
    lr = math.log(rho)
    return rho * C * math.expm1(lr / (C - 1)) ** 2 / math.expm1(C * lr / (C - 1)) ** 2


def amhm_ratio_direct(rho: float, C: int) -> float:
    """``Nbar / N`` from the unrounded counts ``rho^(-k/(C-1))``, k = 0..C-1."""
    if rho < 1 or C < 2:
        raise ContractError("need rho >= 1 and C >= 2")
    n = class_sizes_real(LongTailProfile(C, 1, rho))
    return float(C / (math.fsum(n) * math.fsum(1.0 / n)))


def lemma1_table(rhos=(2, 10, 100, 1000), Cs=(2, 3, 10, 50, 100)) -> TheoremReport:
    rows = []
    worst = 0.0
    for rho in rhos:
        for C in Cs:
            a, b = amhm_ratio(rho, C), amhm_ratio_direct(rho, C)
            rel = abs(a - b) / abs(b)
            worst = max(worst, rel)
            rows.append([float(rho), C, a, b, rel])
    rep = TheoremReport("lemma1", measured={"max_relative_error": worst}, bound=1e-12)
    rep.holds = bool(worst <= 1e-12)
    rep.tables["lemma1"] = {"header": ["rho", "C", "closed", "direct", "relerr"], "rows": rows}
    return rep


# second-stage stationary point

@dataclass(frozen=True)
class NcSynthConfig:
    C: int
    d: int
    rho: float
    lam: float = 0.1
    c0: float = 1.0
    gamma0: float = 0.0
    offset: tuple[float, ...] | None = None
    real_counts: bool = True
    N1: int = 1000
    etf_seed: int = 0

    def __post_init__(self):
        if self.C > self.d:
            raise ContractError(f"need C <= d, got C={self.C}, d={self.d}")
        if self.offset is not None and len(self.offset) != self.d:
            raise ContractError(f"offset must have {self.d} entries")


@dataclass
class NcSynth:
    means: np.ndarray  # C x d
    counts: np.ndarray
    priors: np.ndarray


def nc_synth(config: NcSynthConfig) -> NcSynth:
    """Class means ``c0 * P(Y=k)^(-gamma0) * e_k`` on a unit simplex ETF, plus an optional offset."""
    profile = LongTailProfile(config.C, config.N1, config.rho)
    if config.real_counts:
        counts = class_sizes_real(profile)
    else:
        counts = np.asarray(class_sizes(profile), dtype=np.float64)
    priors = counts / counts.sum()
    E = make_etf(EtfSpec(config.d, config.C, 1.0, config.etf_seed)).T
    means = (config.c0 * priors ** (-config.gamma0))[:, None] * E
    if config.offset is not None:
        means = means + np.asarray(config.offset, dtype=np.float64)
    return NcSynth(means, counts, priors)


def random_offset(d: int, norm: float, seed: int = 1) -> tuple[float, ...]:
    v = RngStream(seed, (0x0FF,)).normal(d)
    return tuple(float(x) for x in v * (norm / np.linalg.norm(v)))


def wb_objective(W: np.ndarray, means: np.ndarray, counts, lam: float) -> tuple[float, np.ndarray]:
    """``(1/N) sum_k N_k (Nbar/N_k) CE(W^T mu_k, k) + (lam/2) ||W||^2`` and its gradient in W (d x C)."""
    counts = np.asarray(counts, dtype=np.float64)
    a = harmonic_mean(counts) / counts.sum()
    Z = means @ W
    Z = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Z).sum(axis=1))
    P = np.exp(Z - lse[:, None])
    C = counts.size
    value = a * float(np.sum(lse - np.diag(Z))) + 0.5 * lam * float(np.sum(W * W))
    grad = a * means.T @ (P - np.eye(C)) + lam * W
    return value, grad


def minimize_wb(means: np.ndarray, counts, lam: float, tol: float = 1e-10, max_iter: int = 100_000):
    """Full-batch gradient descent with Armijo backtracking from W = 0.

    Once the Armijo decrease drops below the float resolution of the
    objective, the step falls back to ``1/L`` with ``L = lam + a ||M||_2^2``
    a global smoothness bound, which guarantees descent without a test.
    """
    if not lam > 0:
        raise ContractError("lambda must be positive")
    d, C = means.shape[1], means.shape[0]
    counts = np.asarray(counts, dtype=np.float64)
    a = harmonic_mean(counts) / counts.sum()
    safe = 1.0 / (lam + a * float(np.linalg.norm(means, 2)) ** 2)
    W = np.zeros((d, C))
    f, g = wb_objective(W, means, counts, lam)
    step = 1.0 / lam
    for it in range(max_iter):
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return W, it, gn
        gg = gn * gn
        t = step
        while True:
            if 0.5 * t * gg <= 1e-13 * max(1.0, abs(f)):
                t = safe
                Wn = W - t * g
                fn, gnew = wb_objective(Wn, means, counts, lam)
                break
            Wn = W - t * g
            fn, gnew = wb_objective(Wn, means, counts, lam)
            if fn <= f - 0.5 * t * gg:
                break
            t *= 0.5
        W, f, g = Wn, fn, gnew
        step = min(2.0 * t, 1.0 / lam)
    raise ConvergenceError(max_iter, float(np.linalg.norm(g)))


def check_theorem2(means: np.ndarray, counts, lam: float, tol: float = 1e-10, c_const: float | None = None,
                   max_iter: int = 100_000) -> tuple[TheoremReport, np.ndarray]:
    """Minimize the second-stage objective and compare w_k* to ``(Nbar/(lam N)) mu_k``.

    With ``c_const`` the report checks ``residual <= (Nbar/(lam N)) ||mu|| + c/(lam rho C)^2``.
    Returns (report, W*) with W* as a d x C matrix.
    """
    means = np.asarray(means, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    C = counts.size
    if means.shape[0] != C:
        raise ContractError(f"{means.shape[0]} means for {C} classes")
    W, iters, gn = minimize_wb(means, counts, lam, tol, max_iter)
    N = counts.sum()
    a = harmonic_mean(counts) / N
    cand = (a / lam) * means.T
    resid = np.linalg.norm(W - cand, axis=0)
    rho = float(counts.max() / counts.min())
    mu = means.mean(axis=0)
    first = (a / lam) * float(np.linalg.norm(mu))
    f_star = wb_objective(W, means, counts, lam)[0]
    f_cand = wb_objective(cand, means, counts, lam)[0]
    scale = lam * rho * C
    rep = TheoremReport("theorem2", [Premise("lambda", lam, 0.0, ">", lam > 0)])
    rep.measured = {
        "rho": rho, "C": C, "iterations": iters, "grad_norm": gn,
        "residual_per_class": resid, "residual_max": float(resid.max()),
        "first_term": first, "scaled_residual": float(resid.max()) * scale ** 2,
        "excess_scaled": (float(resid.max()) - first) * scale ** 2,
        "w_norm_scaled": np.linalg.norm(W, axis=0) * scale,
        "objective_at_solution": f_star, "objective_at_candidate": f_cand,
    }
    ok = f_star <= f_cand + 1e-12 * max(1.0, abs(f_cand))
    if c_const is not None:
        rep.bound = first + c_const / scale ** 2
        ok = ok and float(resid.max()) <= rep.bound
    rep.holds = bool(ok)
    return rep, W


def theorem2_sweep(rhos: Sequence[float], Cs: Sequence[int], base: NcSynthConfig, tol: float = 1e-10,
                   c_const: float | None = None, workers: int = 1) -> TheoremReport:
    """Residual table over (rho, C) cells; cells run concurrently, rows stay in grid order."""
    cells = [(float(r), int(c)) for r in rhos for c in Cs]

    def run(cell):
        rho, C = cell
        cfg = NcSynthConfig(**{**asdict(base), "rho": rho, "C": C})
        s = nc_synth(cfg)
        return check_theorem2(s.means, s.counts, cfg.lam, tol, c_const)[0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            reports = list(ex.map(run, cells))
    else:
        reports = [run(c) for c in cells]
    rows = []
    for (rho, C), r in zip(cells, reports):
        m = r.measured
        rows.append([rho, C, m["residual_max"], m["first_term"], m["scaled_residual"], m["grad_norm"],
                     "" if r.bound is None else r.bound, int(bool(r.holds))])
    rep = TheoremReport("theorem2_sweep", [Premise("lambda", base.lam, 0.0, ">", base.lam > 0)])
    rep.measured = {"cells": len(cells), "max_scaled_residual": max(r.measured["scaled_residual"] for r in reports)}
    rep.holds = all(bool(r.holds) for r in reports)
    rep.tables["theorem2"] = {"header": ["rho", "C", "residual_max", "first_term", "scaled_residual",
                                         "grad_norm", "bound", "holds"], "rows": rows}
    return rep


@dataclass
class LaEquivalence:
    ratios: np.ndarray  # ||w_k|| / ||mu_k||
    cosines: np.ndarray  # cos(w_k, mu_k)
    exponent: float  # slope of log ||w_k|| against log P(Y=k)
    c0: float  # exp(intercept)


def implicit_la_equivalence(W: np.ndarray, means: np.ndarray, priors) -> LaEquivalence:
    W = np.asarray(W, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    wn = np.linalg.norm(W, axis=0)
    mn = np.linalg.norm(means, axis=1)
    cos = np.einsum("ij,ji->i", means, W) / (wn * mn)
    slope, intercept = np.polyfit(np.log(np.asarray(priors, dtype=np.float64)), np.log(wn), 1)
    return LaEquivalence(wn / mn, cos, float(slope), float(math.exp(intercept)))
