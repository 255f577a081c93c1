"""Command-line front end: ``wblab {synth,train,metrics,verify,report}``.

Exit codes: 0 success (or theorem holds), 1 usage or config error,
2 runtime failure (including a theorem violation), 3 theorem premises not met.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import metrics as mt
from . import network as nw
from . import theory as th
from .dataset import (
    CIFAR10_LT_THRESHOLDS,
    CIFAR100_LT_THRESHOLDS,
    LongTailProfile,
    assign_groups,
    load_idx,
    load_labeled_set,
    save_labeled_set,
    subsample_longtailed,
    synth_gaussian_lt,
    tertile_thresholds,
)
from .linalg import ContractError, RngStream
from .trainer import (
    DESK_BN_GAMMA_GRID,
    PRESET_ORDER,
    PresetParams,
    SgdConfig,
    Splits,
    build_preset,
    run_preset,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NOT_APPLICABLE = 0, 1, 2, 3
OUT_ENV = "WBLAB_OUT"

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset"],
    "properties": {
        "dataset": {
            "oneOf": [
                {
                    "type": "object", "additionalProperties": False,
                    "required": ["kind", "C", "N1", "rho", "p"],
                    "properties": {
                        "kind": {"const": "synthetic"}, "C": {"type": "integer", "minimum": 2}, "N1": _pos_int,
                        "rho": {"type": "number", "minimum": 1}, "p": _pos_int,
                        "separation": {"type": "number", "exclusiveMinimum": 0},
                        "cov_scale": {"type": "number", "minimum": 0},
                        "val_per_class": _pos_int, "test_per_class": _pos_int, "seed": {"type": "integer"},
                        "groups": {"$ref": "#/$defs/groups"},
                    },
                },
                {
                    "type": "object", "additionalProperties": False,
                    "required": ["kind", "path"],
                    "properties": {"kind": {"const": "dir"}, "path": {"type": "string"},
                                   "groups": {"$ref": "#/$defs/groups"}},
                },
                {
                    "type": "object", "additionalProperties": False,
                    "required": ["kind", "train_images", "train_labels", "test_images", "test_labels"],
                    "properties": {
                        "kind": {"const": "idx"}, "C": {"type": "integer", "minimum": 2},
                        "train_images": {"type": "string"}, "train_labels": {"type": "string"},
                        "test_images": {"type": "string"}, "test_labels": {"type": "string"},
                        "N1": _pos_int, "rho": {"type": "number", "minimum": 1},
                        "val_per_class": _pos_int,
                        "seed": {"type": "integer"}, "groups": {"$ref": "#/$defs/groups"},
                    },
                },
            ]
        },
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {"arch": {"enum": ["mlp", "resblock"]}, "depth": {"type": "integer", "minimum": 0},
                           "width": _pos_int, "head_bias": {"type": "boolean"}, "block_bias": {"type": "boolean"}},
        },
        "method": {
            "type": "object", "additionalProperties": False,
            "required": ["preset"],
            "properties": {
                "preset": {"enum": list(PRESET_ORDER)},
                "params": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"lambda1": {"type": "number", "minimum": 0},
                                   "lambda2": {"type": "number", "minimum": 0},
                                   "zeta": {"type": "number", "minimum": 0},
                                   "maxnorm_eta": {"type": "number", "exclusiveMinimum": 0},
                                   "cb_beta": {"type": ["number", "null"], "minimum": 0, "exclusiveMaximum": 1}},
                },
                "stages": {
                    "type": "array", "minItems": 1,
                    "items": {
                        "type": "object", "additionalProperties": False,
                        "properties": {"lr0": {"type": "number", "exclusiveMinimum": 0},
                                       "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                                       "batch_size": _pos_int, "epochs": {"type": "integer", "minimum": 0}},
                    },
                },
                "la_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                "bn_gamma_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
            },
        },
        "metrics": {
            "type": "object", "additionalProperties": False,
            "properties": {"split": {"enum": ["train", "test"]}, "probes": _pos_int, "max_pairs": _pos_int,
                           "cosine_mode": {"enum": ["pairwise", "class_mean"]}, "seed": {"type": "integer"}},
        },
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "output": {"type": "string"},
    },
    "$defs": {
        "groups": {
            "oneOf": [
                {"enum": ["tertile", "cifar10", "cifar100"]},
                {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            ]
        }
    },
}

STAGE2_DEFAULTS = {"lr0": 0.05, "momentum": 0.9, "batch_size": 64, "epochs": 10}
STAGE1_DEFAULTS = {"lr0": 0.05, "momentum": 0.9, "batch_size": 64, "epochs": 60}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON: {err}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise UsageError(f"config schema error at {where}: {err.message}") from None


def _prepare_out(out: Path, force: bool, names: list[str]) -> None:
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise UsageError(f"{out} already holds {', '.join(clash)}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _out_dir(args, cfg: dict | None) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg and cfg.get("output"):
        return Path(cfg["output"])
    raise UsageError("no output directory: pass --out or set 'output' in the config")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# data

def build_splits(ds_cfg: dict) -> Splits:
    kind = ds_cfg["kind"]
    if kind == "synthetic":
        prof = LongTailProfile(ds_cfg["C"], ds_cfg["N1"], ds_cfg["rho"])
        tr, va, te = synth_gaussian_lt(prof, ds_cfg["p"], ds_cfg.get("separation", 4.0), ds_cfg.get("cov_scale", 1.0),
                                       RngStream(ds_cfg.get("seed", 0), (7,)), ds_cfg.get("val_per_class", 20),
                                       ds_cfg.get("test_per_class", 100))
        return Splits(tr, va, te)
    if kind == "dir":
        d = Path(ds_cfg["path"])
        return Splits(*(load_labeled_set(d, n) for n in ("train", "val", "test")))
    full = load_idx(ds_cfg["train_images"], ds_cfg["train_labels"], ds_cfg.get("C"))
    test = load_idx(ds_cfg["test_images"], ds_cfg["test_labels"], full.C)
    rng = RngStream(ds_cfg.get("seed", 0), (8,))
    nval = ds_cfg.get("val_per_class", 20)
    val_idx, rest_idx = [], []
    for k in range(full.C):
        members = np.flatnonzero(full.y == k)
        if members.size <= nval:
            raise UsageError(f"class {k} has {members.size} samples, need more than val_per_class={nval}")
        perm = members[rng.split(k).permutation(members.size)]
        val_idx.append(np.sort(perm[:nval]))
        rest_idx.append(np.sort(perm[nval:]))
    val = full.subset(np.concatenate(val_idx))
    train = full.subset(np.concatenate(rest_idx))
    if "rho" in ds_cfg:
        n1 = ds_cfg.get("N1", min(train.class_counts))
        train = subsample_longtailed(train, LongTailProfile(full.C, n1, ds_cfg["rho"]), rng.split(1000))
    return Splits(train, val, test)


def build_groups(ds_cfg: dict, counts):
    spec = ds_cfg.get("groups", "tertile")
    if spec == "tertile":
        th_ = tertile_thresholds(counts)
    elif spec == "cifar10":
        th_ = CIFAR10_LT_THRESHOLDS
    elif spec == "cifar100":
        th_ = CIFAR100_LT_THRESHOLDS
    else:
        th_ = tuple(spec)
    return assign_groups(counts, th_)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["dataset"]["seed"] = args.seed
    if cfg["dataset"]["kind"] != "synthetic":
        raise UsageError("synth needs a synthetic dataset section")
    out = _out_dir(args, cfg)
    names = [f"{s}.{e}" for s in ("train", "val", "test") for e in ("bin", "json")] + ["manifest.json"]
    _prepare_out(out, args.force, names)
    splits = build_splits(cfg["dataset"])
    for name in ("train", "val", "test"):
        save_labeled_set(out, name, getattr(splits, name))
    _dump(out / "manifest.json", {
        "dataset": cfg["dataset"], "C": splits.train.C, "p": splits.train.p,
        "class_counts": {n: list(getattr(splits, n).class_counts) for n in ("train", "val", "test")},
    })
    return EXIT_OK


# training

def _model_spec(cfg: dict, splits: Splits) -> nw.NetSpec:
    m = {"arch": "mlp", "depth": 3, "width": 64, **cfg.get("model", {})}
    return nw.NetSpec(splits.train.p, splits.train.C, m["arch"], m["depth"], m["width"],
                      m.get("head_bias", False), m.get("block_bias", True))


def _sgd_list(cfg: dict, n_stages: int, seed: int) -> list[SgdConfig]:
    given = cfg["method"].get("stages", [])
    if len(given) > n_stages:
        raise UsageError(f"preset has {n_stages} stage(s), config lists {len(given)}")
    out = []
    for i in range(n_stages):
        base = STAGE1_DEFAULTS if i == 0 else STAGE2_DEFAULTS
        out.append(SgdConfig(**{**base, **(given[i] if i < len(given) else {})}, seed=seed))
    return out


def _train_one(cfg: dict, seed: int) -> dict:
    splits = build_splits(cfg["dataset"])
    groups = build_groups(cfg["dataset"], splits.train.class_counts)
    meth = cfg["method"]
    preset = build_preset(meth["preset"], PresetParams(**meth.get("params", {})), meth.get("la_grid"),
                          meth.get("bn_gamma_grid", DESK_BN_GAMMA_GRID))
    spec = _model_spec(cfg, splits)
    net, report, art = run_preset(preset, splits, _sgd_list(cfg, len(preset.stages), seed), spec, groups)
    summary = {
        "preset": preset.name, "seed": seed, **report.to_dict(),
        "groups_assignment": [g.value for g in groups.groups],
        "la_best": None if art.la_search is None else art.la_search.best,
        "bn_gamma": art.bn_gamma,
    }
    return {"net": net, "report": summary, "log": art.log_records(),
            "la_rows": None if art.la_search is None else art.la_search, "gamma_rows": art.bn_gamma_search}


def _aggregate(reports: list[dict]) -> dict:
    keys = {"fdr_train": lambda r: r["fdr_train"], "fdr_test": lambda r: r["fdr_test"],
            "Many": lambda r: r["groups"]["Many"], "Medium": lambda r: r["groups"]["Medium"],
            "Few": lambda r: r["groups"]["Few"], "average": lambda r: r["average"]}
    agg = {"preset": reports[0]["preset"], "seeds": [r["seed"] for r in reports]}
    for k, get in keys.items():
        vals = np.array([np.nan if get(r) is None else get(r) for r in reports], dtype=np.float64)
        ok = vals[np.isfinite(vals)]
        agg[k] = {"mean": float(ok.mean()) if ok.size else None,
                  "std": float(ok.std(ddof=1)) if ok.size > 1 else (0.0 if ok.size else None), "n": int(ok.size)}
    return agg


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if "method" not in cfg:
        raise UsageError("train needs a 'method' section")
    seeds = [args.seed] if args.seed is not None else cfg.get("seeds", [0])
    out = _out_dir(args, cfg) / cfg["method"]["preset"]
    _prepare_out(out, args.force, [f"seed_{s}" for s in seeds] + ["aggregate.json"])
    if args.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(args.workers) as ex:
            results = list(ex.map(_train_one, [cfg] * len(seeds), seeds))
    else:
        results = [_train_one(cfg, s) for s in seeds]
    for seed, res in zip(seeds, results):
        d = out / f"seed_{seed}"
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        nw.save_checkpoint(res["net"], d / "checkpoint")
        with open(d / "log.jsonl", "w") as fh:
            for rec in res["log"]:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        _dump(d / "report.json", res["report"])
        if res["la_rows"] is not None:
            res["la_rows"].write_csv(d / "la_search.csv")
        if res["gamma_rows"]:
            mt.write_rows_csv(d / "bn_gamma_search.csv", ["gamma", "val_average"], res["gamma_rows"])
    _dump(out / "aggregate.json", _aggregate([r["report"] for r in results]))
    _dump(out / "config.json", cfg)
    return EXIT_OK


# diagnostics

def cmd_metrics(args) -> int:
    cfg = load_config(args.config)
    net = nw.load_checkpoint(args.checkpoint)
    splits = build_splits(cfg["dataset"])
    mcfg = cfg.get("metrics", {})
    data = getattr(splits, mcfg.get("split", "test"))
    out = _out_dir(args, None)
    names = ["fdr.json", "cosine.csv", "norms.csv", "bn_stats.json", "probe_fdr.csv"]
    _prepare_out(out, args.force, names)
    rng = RngStream(mcfg.get("seed", 0), (11,))
    F = nw.forward(net, data.X, "eval")[0]
    fdr_vals = {}
    for name in ("train", "test"):
        ds = getattr(splits, name)
        try:
            fdr_vals[name] = mt.fdr(nw.forward(net, ds.X, "eval")[0], ds.y)
        except mt.FdrSingularError as err:
            fdr_vals[name] = None
            fdr_vals[f"{name}_error"] = str(err)
    _dump(out / "fdr.json", fdr_vals)
    cos = mt.cosine_matrix(F, data.y, data.C, mcfg.get("max_pairs", 10_000), rng.split(0),
                           mcfg.get("cosine_mode", "pairwise"))
    mt.write_matrix_csv(out / "cosine.csv", cos.values)
    norms = mt.mean_norms(F, data.y, data.C)
    counts = splits.train.class_counts
    mt.write_rows_csv(out / "norms.csv", ["class", "train_count", "mean_feature_norm", "head_norm"],
                      [[k, counts[k], float(norms[k]), float(np.linalg.norm(net.W[:, k]))] for k in range(data.C)])
    bn = mt.bn_stats(net) if net.bn_layers() else {}
    _dump(out / "bn_stats.json", {**bn, "cosine_off_diagonal_mean": cos.off_diagonal_mean(),
                                  "cosine_diagonal_mean": cos.diagonal_mean(), "zero_norm_excluded": cos.excluded})
    probes = mt.random_probe_fdr(F, data.y, mcfg.get("probes", 3), rng.split(1))
    mt.write_rows_csv(out / "probe_fdr.csv", ["layers", "fdr"],
                      [[i, "" if v is None else float(v)] for i, v in enumerate(probes)])
    return EXIT_OK


def cmd_verify(args) -> int:
    out = _out_dir(args, None)
    _prepare_out(out, args.force, [f"{args.which}.json"])
    if args.which == "lemma1":
        rep = th.lemma1_table()
        rep.write_csv("lemma1", out / "lemma1.csv")
    elif args.which == "theorem2":
        base = th.NcSynthConfig(C=args.C[0], d=args.d, rho=args.rho[0], lam=args.lam, c0=args.c0,
                                gamma0=args.gamma0,
                                offset=th.random_offset(args.d, args.offset_norm) if args.offset_norm > 0 else None)
        rep = th.theorem2_sweep(args.rho, args.C, base, args.tol, args.c_const, args.workers)
        rep.write_csv("theorem2", out / "theorem2.csv")
    else:
        if not args.checkpoint or not args.config:
            raise UsageError("theorem1 needs --checkpoint and --config (for the dataset)")
        cfg = load_config(args.config)
        net = nw.load_checkpoint(args.checkpoint)
        data = getattr(build_splits(cfg["dataset"]), args.split)
        rep = th.check_theorem1(net, data)
    (out / f"{args.which}.json").write_text(rep.to_json())
    if rep.holds is None:
        failed = [p.describe() for p in rep.premises if not p.satisfied]
        print(f"{args.which}: premises not met ({'; '.join(failed)})", file=sys.stderr)
        return EXIT_NOT_APPLICABLE
    if not rep.holds:
        print(f"{args.which}: VIOLATED", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# reporting

REPORT_COLUMNS = ("fdr_train", "fdr_test", "Many", "Medium", "Few", "average")


def _pm(cell: dict, pct: bool) -> str:
    if cell["mean"] is None:
        return "n/a"
    scale = 100.0 if pct else 1.0
    return f"{cell['mean'] * scale:.2f} ± {cell['std'] * scale:.2f}"


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    found = {}
    for p in sorted(run_dir.glob("*/aggregate.json")) if run_dir.is_dir() else []:
        agg = json.loads(p.read_text())
        found[agg["preset"]] = agg
    if not found:
        raise UsageError(f"{run_dir}: no runs found; expected <preset>/aggregate.json with "
                         f"<preset>/seed_<n>/{{checkpoint.bin,checkpoint.json,log.jsonl,report.json}}")
    order = [n for n in PRESET_ORDER if n in found]
    out = Path(args.out) if args.out else run_dir
    _prepare_out(out, args.force, ["table.md", "table.csv"])
    lines = ["| Method | LA | FDR train | FDR test | Many | Medium | Few | Average |",
             "|---|---|---|---|---|---|---|---|"]
    rows = []
    for name in order:
        a = found[name]
        base, la = name, "N/A"
        for suf, lab in (("+add", "Add"), ("+mult", "Mult")):
            if name.endswith(suf):
                base, la = name[: -len(suf)], lab
        cells = [_pm(a[c], c not in ("fdr_train", "fdr_test")) for c in REPORT_COLUMNS]
        lines.append(f"| {base} | {la} | " + " | ".join(cells) + " |")
        row = [base, la]
        for c in REPORT_COLUMNS:
            row += [a[c]["mean"], a[c]["std"]]
        rows.append(row)
    (out / "table.md").write_text("\n".join(lines) + "\n")
    header = ["method", "la"] + [f"{c}_{s}" for c in REPORT_COLUMNS for s in ("mean", "std")]
    mt.write_rows_csv(out / "table.csv", header, [[("" if v is None else v) for v in r] for r in rows])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wblab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the config's seeds with one seed")
        sp.add_argument("--out", help="output directory (else $%s, else config 'output')" % OUT_ENV)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--workers", type=int, default=1, help="parallel workers for seeds or sweep cells")

    common(sub.add_parser("synth", help="write train/val/test files and a manifest"))
    common(sub.add_parser("train", help="train a preset over one or more seeds"))
    m = sub.add_parser("metrics", help="feature diagnostics for a checkpoint")
    common(m)
    m.add_argument("--checkpoint", required=True, help="checkpoint path without extension")
    v = sub.add_parser("verify", help="numerical theorem checks")
    common(v, config_required=False)
    v.add_argument("which", choices=["theorem1", "lemma1", "theorem2"])
    v.add_argument("--checkpoint")
    v.add_argument("--split", choices=["train", "val", "test"], default="train")
    v.add_argument("--rho", type=float, nargs="+", default=[50.0, 100.0, 200.0])
    v.add_argument("--C", type=int, nargs="+", default=[50])
    v.add_argument("--d", type=int, default=64)
    v.add_argument("--lam", type=float, default=0.1)
    v.add_argument("--c0", type=float, default=1.0)
    v.add_argument("--gamma0", type=float, default=0.0)
    v.add_argument("--offset-norm", type=float, default=0.0)
    v.add_argument("--c-const", type=float, default=None)
    v.add_argument("--tol", type=float, default=1e-10)
    r = sub.add_parser("report", help="Table-style markdown and CSV from a run directory")
    r.add_argument("run_dir")
    r.add_argument("--out")
    r.add_argument("--force", action="store_true")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "metrics": cmd_metrics, "verify": cmd_verify,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"wblab: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, th.ConvergenceError, OSError, ValueError, RuntimeError) as err:
        print(f"wblab: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
