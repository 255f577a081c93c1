"""MLP / ResBlock feature extractors with batch norm and a linear classifier head.

Every layer has an exact reverse-mode backward.  Sub-layers are addressable
for probing: an MLP block contributes ``linear, bn_norm, bn_affine, relu``;
a residual block contributes ``linear, bn_norm, bn_affine, relu, linear,
bn_norm, bn_affine, add, relu``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .linalg import ContractError, RngStream, load_matrices, save_matrices

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_cache_ids = itertools.count()


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray | None = None
    trainable: bool = True

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, x):
        out = x @ self.weight.T
        if self.bias is not None:
            out = out + self.bias
        return out


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    gamma_trainable: bool = True
    beta_trainable: bool = True
    gamma_fixed_value: float | None = None

    @classmethod
    def identity(cls, width: int) -> "BatchNormLayer":
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width))

    def fix_gamma(self, value: float) -> None:
        self.gamma[:] = value
        self.gamma_fixed_value = float(value)
        self.gamma_trainable = False

    def freeze_beta(self, value: float = 0.0) -> None:
        self.beta[:] = value
        self.beta_trainable = False

    def normalize(self, x, train: bool):
        """Return (xhat, inv_std) and update running statistics in train mode."""
        if train:
            n = x.shape[0]
            if n < 2:
                raise ContractError("batch norm in train mode needs a batch of at least 2")
            mu = x.mean(axis=0)
            var = ((x - mu) ** 2).mean(axis=0)
            m = self.momentum
            self.running_mean[:] = (1 - m) * self.running_mean + m * mu
            self.running_var[:] = (1 - m) * self.running_var + m * var * (n / (n - 1))
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        return (x - mu) * inv_std, inv_std

    def backward(self, dout, xhat, inv_std, train: bool):
        dgamma = (dout * xhat).sum(axis=0)
        dbeta = dout.sum(axis=0)
        dxhat = dout * self.gamma
        if train:
            n = dout.shape[0]
            dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta


@dataclass
class MlpBlock:
    linear: LinearLayer
    bn: BatchNormLayer

    n_sublayers = 4

    def forward(self, x, train, trace=None):
        h = self.linear.forward(x)
        xhat, inv_std = self.bn.normalize(h, train)
        a = self.bn.gamma * xhat + self.bn.beta
        out = np.maximum(a, 0.0)
        if trace is not None:
            trace.extend([h, xhat, a, out])
        return out, (x, xhat, inv_std, a)

    def backward(self, dout, cache, train, grads, prefix):
        x, xhat, inv_std, a = cache
        da = dout * (a > 0)
        dh, dgamma, dbeta = self.bn.backward(da, xhat, inv_std, train)
        grads[f"{prefix}.bn.gamma"] = dgamma
        grads[f"{prefix}.bn.beta"] = dbeta
        grads[f"{prefix}.linear.weight"] = dh.T @ x
        if self.linear.bias is not None:
            grads[f"{prefix}.linear.bias"] = dh.sum(axis=0)
        return dh @ self.linear.weight

    def layers(self):
        yield "linear", self.linear
        yield "bn", self.bn


@dataclass
class ResBlock:
    """Linear -> BN -> ReLU -> Linear -> BN, plus the skip input, then ReLU."""

    linear1: LinearLayer
    bn1: BatchNormLayer
    linear2: LinearLayer
    bn2: BatchNormLayer

    n_sublayers = 9

    def forward(self, x, train, trace=None):
        h1 = self.linear1.forward(x)
        xh1, is1 = self.bn1.normalize(h1, train)
        a1 = self.bn1.gamma * xh1 + self.bn1.beta
        r1 = np.maximum(a1, 0.0)
        h2 = self.linear2.forward(r1)
        xh2, is2 = self.bn2.normalize(h2, train)
        a2 = self.bn2.gamma * xh2 + self.bn2.beta
        s = a2 + x
        out = np.maximum(s, 0.0)
        if trace is not None:
            trace.extend([h1, xh1, a1, r1, h2, xh2, a2, s, out])
        return out, (x, xh1, is1, a1, r1, xh2, is2, s)

    def backward(self, dout, cache, train, grads, prefix):
        x, xh1, is1, a1, r1, xh2, is2, s = cache
        ds = dout * (s > 0)
        dh2, dg2, db2 = self.bn2.backward(ds, xh2, is2, train)
        grads[f"{prefix}.bn2.gamma"] = dg2
        grads[f"{prefix}.bn2.beta"] = db2
        grads[f"{prefix}.linear2.weight"] = dh2.T @ r1
        if self.linear2.bias is not None:
            grads[f"{prefix}.linear2.bias"] = dh2.sum(axis=0)
        da1 = (dh2 @ self.linear2.weight) * (a1 > 0)
        dh1, dg1, db1 = self.bn1.backward(da1, xh1, is1, train)
        grads[f"{prefix}.bn1.gamma"] = dg1
        grads[f"{prefix}.bn1.beta"] = db1
        grads[f"{prefix}.linear1.weight"] = dh1.T @ x
        if self.linear1.bias is not None:
            grads[f"{prefix}.linear1.bias"] = dh1.sum(axis=0)
        return dh1 @ self.linear1.weight + ds

    def layers(self):
        yield "linear1", self.linear1
        yield "bn1", self.bn1
        yield "linear2", self.linear2
        yield "bn2", self.bn2


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    n_classes: int
    arch: str = "mlp"  # "mlp" | "resblock"
    depth: int = 3
    width: int = 1024
    head_bias: bool = False
    block_bias: bool = True

    def __post_init__(self):
        if self.arch not in ("mlp", "resblock"):
            raise ContractError(f"unknown arch {self.arch!r}")
        if min(self.input_dim, self.n_classes, self.width) < 1 or self.depth < 0:
            raise ContractError(f"invalid network dimensions in {self}")


@dataclass
class ParamSlot:
    name: str
    owner: object
    attr: str
    kind: str  # "linear" | "bn" | "head"

    @property
    def value(self) -> np.ndarray:
        return getattr(self.owner, self.attr)

    @property
    def trainable(self) -> bool:
        if isinstance(self.owner, BatchNormLayer):
            return self.owner.gamma_trainable if self.attr == "gamma" else self.owner.beta_trainable
        return self.owner.trainable


@dataclass
class ForwardCache:
    cache_id: int
    version: int
    train: bool
    inputs: np.ndarray
    block_caches: list
    features: np.ndarray


@dataclass
class Network:
    spec: NetSpec
    blocks: list
    head: LinearLayer
    head_fixed: bool = False
    logit_offset: np.ndarray | None = None  # post-hoc additive adjustment, eval mode only
    version: int = field(default=0)

    @property
    def feature_dim(self) -> int:
        return self.head.in_dim

    @property
    def n_classes(self) -> int:
        return self.head.out_dim

    @property
    def W(self) -> np.ndarray:
        """Classifier weights as a d x C matrix (column k is w_k)."""
        return self.head.weight.T

    def set_W(self, W: np.ndarray) -> None:
        W = np.asarray(W, dtype=np.float64)
        if W.shape != (self.feature_dim, self.n_classes):
            raise ContractError(f"head weight must be {(self.feature_dim, self.n_classes)}, got {W.shape}")
        self.head.weight = np.ascontiguousarray(W.T)
        self.touch()

    def touch(self) -> None:
        self.version += 1

    def bn_layers(self) -> list[BatchNormLayer]:
        return [layer for _, layer in self._named_layers() if isinstance(layer, BatchNormLayer)]

    def _named_layers(self):
        for i, block in enumerate(self.blocks):
            for name, layer in block.layers():
                yield f"blocks.{i}.{name}", layer

    def param_slots(self) -> Iterator[ParamSlot]:
        for name, layer in self._named_layers():
            if isinstance(layer, BatchNormLayer):
                yield ParamSlot(f"{name}.gamma", layer, "gamma", "bn")
                yield ParamSlot(f"{name}.beta", layer, "beta", "bn")
            else:
                yield ParamSlot(f"{name}.weight", layer, "weight", "linear")
                if layer.bias is not None:
                    yield ParamSlot(f"{name}.bias", layer, "bias", "linear")
        yield ParamSlot("head.weight", self.head, "weight", "head")
        if self.head.bias is not None:
            yield ParamSlot("head.bias", self.head, "bias", "head")

    def params(self) -> dict[str, np.ndarray]:
        return {s.name: s.value for s in self.param_slots()}

    def layer_names(self) -> list[str]:
        names = ["input"]
        for i, block in enumerate(self.blocks):
            if isinstance(block, MlpBlock):
                subs = ["linear", "bn_norm", "bn_affine", "relu"]
            else:
                subs = ["linear1", "bn1_norm", "bn1_affine", "relu1", "linear2",
                        "bn2_norm", "bn2_affine", "add", "relu"]
            names.extend(f"blocks.{i}.{s}" for s in subs)
        return names

    def copy(self) -> "Network":
        return _rebuild(self.spec, _snapshot(self), self.head_fixed, self.logit_offset)


def _uniform_linear(rng: RngStream, out_dim: int, in_dim: int, bias: bool) -> LinearLayer:
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform((out_dim, in_dim), -bound, bound)
    return LinearLayer(w, np.zeros(out_dim) if bias else None)


def init_network(spec: NetSpec, rng: RngStream) -> Network:
    """Weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)], biases 0, BN gamma 1, beta 0."""
    blocks = []
    stream = 0

    def lin(o, i, bias=spec.block_bias):
        nonlocal stream
        stream += 1
        return _uniform_linear(rng.split(stream), o, i, bias)

    w = spec.width
    if spec.arch == "mlp":
        for b in range(spec.depth):
            blocks.append(MlpBlock(lin(w, spec.input_dim if b == 0 else w), BatchNormLayer.identity(w)))
    else:
        blocks.append(MlpBlock(lin(w, spec.input_dim), BatchNormLayer.identity(w)))
        for _ in range(spec.depth):
            blocks.append(ResBlock(lin(w, w), BatchNormLayer.identity(w), lin(w, w), BatchNormLayer.identity(w)))
    d = w if blocks else spec.input_dim
    head = _uniform_linear(rng.split(0), spec.n_classes, d, spec.head_bias)
    return Network(spec, blocks, head)


def forward(net: Network, X: np.ndarray, mode: str = "train", trace: list | None = None):
    """Return (features, logits, cache).  ``trace`` collects every sub-layer output."""
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.spec.input_dim:
        raise ContractError(f"input must be (N, {net.spec.input_dim}), got {X.shape}")
    train = mode == "train"
    if train and X.shape[0] < 2:
        raise ContractError("batch norm in train mode needs a batch of at least 2")
    if trace is not None:
        trace.append(X)
    h = X
    caches = []
    for block in net.blocks:
        h, c = block.forward(h, train, trace)
        caches.append(c)
    logits = net.head.forward(h)
    if not train and net.logit_offset is not None:
        logits = logits + net.logit_offset
    cache = ForwardCache(next(_cache_ids), net.version, train, X, caches, h)
    return h, logits, cache


def predict(net: Network, X: np.ndarray) -> np.ndarray:
    """Eval-mode argmax; ties resolve to the lowest class index."""
    _, logits, _ = forward(net, X, "eval")
    return np.argmax(logits, axis=1)


def backward(net: Network, cache: ForwardCache, dlogits: np.ndarray, dfeatures: np.ndarray | None = None) -> dict:
    """Gradients for every parameter plus ``"features"`` and ``"input"``.

    ``dfeatures`` adds a direct loss term on the extractor output (feature regularization).
    """
    if cache.version != net.version:
        raise ContractError("stale forward cache: parameters changed since the forward pass")
    F = cache.features
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (F.shape[0], net.n_classes):
        raise ContractError(f"dlogits must be {(F.shape[0], net.n_classes)}, got {dlogits.shape}")
    grads: dict[str, np.ndarray] = {}
    grads["head.weight"] = dlogits.T @ F
    if net.head.bias is not None:
        grads["head.bias"] = dlogits.sum(axis=0)
    dF = dlogits @ net.head.weight
    if dfeatures is not None:
        dF = dF + dfeatures
    grads["features"] = dF
    dh = dF
    for i in range(len(net.blocks) - 1, -1, -1):
        dh = net.blocks[i].backward(dh, cache.block_caches[i], cache.train, grads, f"blocks.{i}")
    grads["input"] = dh
    return grads


def extract_intermediate(net: Network, X: np.ndarray, layer_index: int, mode: str = "eval") -> np.ndarray:
    n_layers = len(net.layer_names()) - 1
    if not 0 <= layer_index <= n_layers:
        raise ContractError(f"layer_index {layer_index} outside [0, {n_layers}]")
    trace: list = []
    forward(net, X, mode, trace)
    return trace[layer_index]


def _snapshot(net: Network) -> list[tuple[str, np.ndarray, dict]]:
    records = []
    for name, layer in net._named_layers():
        if isinstance(layer, BatchNormLayer):
            flags = {"gamma_trainable": layer.gamma_trainable, "beta_trainable": layer.beta_trainable,
                     "gamma_fixed_value": layer.gamma_fixed_value, "eps": layer.eps, "momentum": layer.momentum}
            for attr in ("gamma", "beta", "running_mean", "running_var"):
                records.append((f"{name}.{attr}", getattr(layer, attr).copy(), flags))
        else:
            flags = {"trainable": layer.trainable}
            records.append((f"{name}.weight", layer.weight.copy(), flags))
            if layer.bias is not None:
                records.append((f"{name}.bias", layer.bias.copy(), flags))
    flags = {"trainable": net.head.trainable}
    records.append(("head.weight", net.head.weight.copy(), flags))
    if net.head.bias is not None:
        records.append(("head.bias", net.head.bias.copy(), flags))
    return records


def _rebuild(spec: NetSpec, records, head_fixed: bool, logit_offset) -> Network:
    net = init_network(spec, RngStream(0))
    by_name = {name: (value, flags) for name, value, flags in records}
    for name, layer in list(net._named_layers()) + [("head", net.head)]:
        if isinstance(layer, BatchNormLayer):
            for attr in ("gamma", "beta", "running_mean", "running_var"):
                value, flags = by_name[f"{name}.{attr}"]
                setattr(layer, attr, np.array(value, dtype=np.float64).reshape(-1))
            layer.gamma_trainable = flags["gamma_trainable"]
            layer.beta_trainable = flags["beta_trainable"]
            layer.gamma_fixed_value = flags["gamma_fixed_value"]
            layer.eps = flags["eps"]
            layer.momentum = flags["momentum"]
        else:
            value, flags = by_name[f"{name}.weight"]
            layer.weight = np.array(value, dtype=np.float64).reshape(layer.weight.shape)
            layer.trainable = flags["trainable"]
            if layer.bias is not None:
                layer.bias = np.array(by_name[f"{name}.bias"][0], dtype=np.float64).reshape(-1)
    net.head_fixed = head_fixed
    net.logit_offset = None if logit_offset is None else np.array(logit_offset, dtype=np.float64)
    return net


def save_checkpoint(net: Network, path) -> None:
    """Write ``<path>.bin`` (matrix records) and ``<path>.json`` (manifest)."""
    path = Path(path)
    records = _snapshot(net)
    mats = [np.atleast_2d(v) for _, v, _ in records]
    manifest = {
        "format": "wblab-checkpoint/1",
        "spec": asdict(net.spec),
        "head_fixed": net.head_fixed,
        "logit_offset": None if net.logit_offset is None else [float(v) for v in net.logit_offset],
        "records": [{"name": n, "shape": list(v.shape), "flags": f} for n, v, f in records],
    }
    if net.logit_offset is not None:
        mats.append(np.atleast_2d(net.logit_offset))
    save_matrices(path.with_suffix(".bin"), mats)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> Network:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    mats = load_matrices(path.with_suffix(".bin"))
    recs = manifest["records"]
    if len(mats) < len(recs):
        raise ValueError(f"{path}: manifest lists {len(recs)} records, file has {len(mats)}")
    records = [(r["name"], m.reshape(r["shape"]), r["flags"]) for r, m in zip(recs, mats)]
    offset = mats[len(recs)].reshape(-1) if manifest["logit_offset"] is not None else None
    return _rebuild(NetSpec(**manifest["spec"]), records, manifest["head_fixed"], offset)
