"""Command-line interface.

Every subcommand reads an optional JSON config of flat dotted keys
(``{"train.lr": 0.001, ...}``); command-line flags override it. The merged
config is echoed next to the outputs, and all files are written atomically.

Exit codes: 0 success, 1 usage or runtime error, 2 a certification failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import rademacher as rad
from .capacity import DataBounds, OperatorBound, composite_measure, gen_bound, rademacher_bound
from .network import CheckpointError, atomic_write_text, init_deeponet, load_checkpoint, save_checkpoint
from .operator_data import (
    AntiderivativeConfig,
    DatasetFormatError,
    PendulumConfig,
    load_dataset,
    make_antiderivative_dataset,
    make_pendulum_dataset,
    save_dataset,
)
from .seeding import substream
from .training import TrainConfig, TrainingDivergedError, gen_gap_report, train

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2


class UsageError(Exception):
    pass


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_float(v):
    return None if v is None or str(v).lower() == "none" else float(v)


# key -> (type, default, help)
COMMON = {
    "seed": (int, 0, "global seed; every random stream is derived from it"),
    "out": (str, ".", "output directory"),
    "threads": (int, 1, "worker threads (results do not depend on it)"),
}

SCHEMAS = {
    "generate": {
        "task": (str, "pendulum", "pendulum or antiderivative"),
        "m": (int, 64, "number of samples"),
        "name": (str, "", "output file stem (default: <task>_m<m>_s<seed>)"),
        "data.T": (float, 1.0, "time horizon"),
        "data.J": (int, 5, "Fourier modes in the forcing"),
        "data.A": (float, 1.0, "coefficient amplitude"),
        "data.sensors": (int, 16, "sensor points on [0, T]"),
        "data.constant_feature": (_bool, True, "append a constant 1 to branch and trunk inputs"),
        "data.k": (float, 1.0, "pendulum restoring coefficient"),
        "data.y0": (float, 0.0, "initial angle"),
        "data.v0": (float, 0.0, "initial angular velocity"),
        "data.steps": (int, 1000, "RK4 steps over [0, T]"),
    },
    "train": {
        "train": (str, "", "training set (JSONL)"),
        "test": (str, "", "test set (JSONL)"),
        "name": (str, "run", "output file stem"),
        "model.width": (int, 32, "hidden width of both nets"),
        "model.depth": (int, 3, "layers per net"),
        "model.p": (int, 32, "output width p"),
        "model.activation": (str, "abs", "abs, relu or identity"),
        "train.lam": (float, 0.0, "weight of the composite-capacity penalty"),
        "train.lam_warmup": (int, 0, "epochs of linear penalty warm-up"),
        "train.optimizer": (str, "adam", "adam or sgd"),
        "train.lr": (float, 1e-3, "learning rate"),
        "train.momentum": (float, 0.0, "sgd momentum"),
        "train.epochs": (int, 125, "epochs"),
        "train.batch_size": (int, 32, "minibatch size"),
        "train.eval_every": (int, 1, "epochs between history rows"),
        "train.delta": (float, 0.05, "failure probability in the gap bound"),
        "train.op_bound": (_opt_float, None, "bound on |G(f)(x)| (default: from the dataset header)"),
    },
    "capacity": {
        "model": (str, "", "checkpoint (JSON)"),
        "name": (str, "", "output file stem (default: checkpoint stem)"),
    },
    "bounds": {
        "model": (str, "", "checkpoint (JSON)"),
        "data": (str, "", "dataset the bounds are evaluated on"),
        "name": (str, "", "output file stem (default: checkpoint stem)"),
        "op_bound": (_opt_float, None, "bound on |G(f)(x)| (default: from the dataset header)"),
        "delta": (float, 0.05, "failure probability"),
    },
    "verify": {
        "suite": (str, "all", "all or a comma list of contraction,abs_sup,rank_one,peeling,dominance"),
        "name": (str, "verify", "output file stem"),
        "contraction_trials": (int, 10**6, "random tuples for the contraction checks"),
        "contraction_L": (float, 1.0, "constant L tested in the contraction inequality"),
        "abs_sup_trials": (int, 100, "random finite families"),
        "rank_one_datasets": (int, 100, "random datasets, all sign vectors each"),
        "peeling_cases": (int, 10, "random peeling instances per lemma"),
        "dominance_classes": (int, 50, "random classes for the bound-dominance suite"),
    },
    "report": {
        "inputs": (str, "", "comma-separated files written by the other subcommands"),
        "name": (str, "report", "output file stem"),
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deeponet-capacity", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, schema in SCHEMAS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="JSON file of flat dotted keys")
        for key, (_, default, help_) in {**COMMON, **schema}.items():
            p.add_argument(f"--{key}", dest=key, default=None, help=f"{help_} (default: {default})")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    schema = {**COMMON, **SCHEMAS[command]}
    cfg = {k: d for k, (_, d, _) in schema.items()}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(schema))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in schema:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    for key, (typ, _, _) in schema.items():
        if cfg[key] is None:
            continue
        try:
            cfg[key] = typ(cfg[key])
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad value for {key}: {e}") from None
    return cfg


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _need(cfg, *keys):
    for k in keys:
        if not cfg[k]:
            raise UsageError(f"--{k} is required")


def _echo(out: Path, name: str, command: str, cfg: dict) -> None:
    atomic_write_text(out / f"{name}.config.json", _dumps({"command": command, "config": cfg}))


# ---------------------------------------------------------------------------


def cmd_generate(cfg: dict, out: Path) -> int:
    task = cfg["task"]
    common = dict(
        T=cfg["data.T"], J=cfg["data.J"], A=cfg["data.A"], sensors=cfg["data.sensors"], constant_feature=cfg["data.constant_feature"]
    )
    if task == "pendulum":
        dcfg = PendulumConfig(**common, k=cfg["data.k"], y0=cfg["data.y0"], v0=cfg["data.v0"], steps=cfg["data.steps"])
        ds = make_pendulum_dataset(dcfg, cfg["m"], cfg["seed"])
    elif task == "antiderivative":
        ds = make_antiderivative_dataset(AntiderivativeConfig(**common), cfg["m"], cfg["seed"])
    else:
        raise UsageError(f"unknown task {task!r}")
    name = cfg["name"] or f"{task}_m{cfg['m']}_s{cfg['seed']}"
    save_dataset(ds, out / f"{name}.jsonl")
    _echo(out, name, "generate", cfg)
    print(out / f"{name}.jsonl")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    _need(cfg, "train", "test")
    tr, te = load_dataset(cfg["train"]), load_dataset(cfg["test"])
    if tr.d1 != te.d1 or tr.d2 != te.d2:
        raise UsageError("train and test sets have different input dims")
    w, q, p = cfg["model.width"], cfg["model.depth"], cfg["model.p"]
    if q < 1 or w < 1 or p < 1:
        raise UsageError("model sizes must be positive")
    model0 = init_deeponet([tr.d1] + [w] * (q - 1) + [p], [tr.d2] + [w] * (q - 1) + [p], cfg["model.activation"], substream(cfg["seed"], "init"))
    tcfg = TrainConfig(
        lam=cfg["train.lam"],
        lam_warmup=cfg["train.lam_warmup"],
        optimizer=cfg["train.optimizer"],
        lr=cfg["train.lr"],
        momentum=cfg["train.momentum"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["seed"],
        eval_every=cfg["train.eval_every"],
        delta=cfg["train.delta"],
        op_bound=cfg["train.op_bound"],
    )
    name = cfg["name"]
    try:
        run = train(tcfg, model0, tr, te)
    except TrainingDivergedError as e:
        save_checkpoint(e.last_good, out / f"{name}.last_good.ckpt.json")
        raise
    save_checkpoint(run.model, out / f"{name}.ckpt.json")
    atomic_write_text(out / f"{name}.history.csv", run.history_csv())
    gap = gen_gap_report(run.model, tr, te, op_bound=tcfg.op_bound, delta=tcfg.delta)
    gap.update(initial_train_loss=run.initial_train_loss, lam=tcfg.lam, seed=tcfg.seed)
    atomic_write_text(out / f"{name}.gap.json", _dumps(gap))
    _echo(out, name, "train", cfg)
    print(out / f"{name}.ckpt.json")
    return EXIT_OK


def _stem(path: str) -> str:
    s = Path(path).name
    for suffix in (".ckpt.json", ".json"):
        if s.endswith(suffix):
            return s[: -len(suffix)]
    return s


def cmd_capacity(cfg: dict, out: Path) -> int:
    _need(cfg, "model")
    report = composite_measure(load_checkpoint(cfg["model"]))
    name = cfg["name"] or _stem(cfg["model"])
    atomic_write_text(out / f"{name}.capacity.json", report.to_json())
    atomic_write_text(out / f"{name}.capacity.csv", report.csv_text())
    _echo(out, f"{name}.capacity", "capacity", cfg)
    print(out / f"{name}.capacity.json")
    return EXIT_OK


def cmd_bounds(cfg: dict, out: Path) -> int:
    _need(cfg, "model", "data")
    model, ds = load_checkpoint(cfg["model"]), load_dataset(cfg["data"])
    report = composite_measure(model)
    db = DataBounds.from_dataset(ds)
    L = max(model.branch.activation.contraction_constant, model.trunk.activation.contraction_constant)
    emp, avg = rademacher_bound(report, L, db, ds)
    op = cfg["op_bound"] if cfg["op_bound"] is not None else float(ds.meta.get("op_bound", 0.0))
    gb = gen_bound(report, db, OperatorBound(op, cfg["delta"]), (model.branch.activation, model.trunk.activation))
    result = {
        "capacity": report.to_dict(),
        "data_bounds": {"M_xB": db.M_xB, "M_xT": db.M_xT, "m_xB": db.m_xB, "m_xT": db.m_xT, "m": db.m},
        "rademacher_empirical": emp,
        "rademacher_average": avg,
        "B": gb.B,
        "op_bound": op,
        "delta": cfg["delta"],
        "gap_bound_with_factor": gb.gap_with_factor,
        "gap_bound_without_factor": gb.gap_without_factor,
    }
    name = cfg["name"] or _stem(cfg["model"])
    atomic_write_text(out / f"{name}.bounds.json", _dumps(result))
    _echo(out, f"{name}.bounds", "bounds", cfg)
    print(out / f"{name}.bounds.json")
    return EXIT_OK


SUITES = ("contraction", "abs_sup", "rank_one", "peeling", "dominance")


class _Data:
    def __init__(self, x_B, x_T):
        self.x_B, self.x_T = x_B, x_T


def random_class(rng: np.random.Generator) -> rad.ClassSpec:
    """A small random class for the dominance suite."""
    kind = rad.KINDS[int(rng.integers(len(rad.KINDS)))]
    d1, d2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    C = float(np.exp(rng.uniform(-1, 1)))
    if kind == "linear11":
        p = int(rng.integers(1, 4))
        return rad.ClassSpec(kind, (d1, p), (d2, p), "identity", C)
    if kind == "relu22":
        p = int(rng.integers(1, 3))
        return rad.ClassSpec(kind, (d1, int(rng.integers(1, 4)), p), (d2, int(rng.integers(1, 4)), p), "relu", C)
    act = "abs" if rng.random() < 0.8 else "identity"
    n = int(rng.integers(2, 4))
    p = 1 if kind == "spheres" else int(rng.integers(1, 3))
    bw = (d1,) + tuple(int(w) for w in rng.integers(1, 4, size=n - 1)) + (p,)
    tw = (d2,) + tuple(int(w) for w in rng.integers(1, 4, size=n - 1)) + (p,)
    return rad.ClassSpec(kind, bw, tw, act, C)


def dominance_suite(n_classes: int, seed: int, threads: int = 1, max_m: int = 6) -> dict:
    rng = substream(seed, "verify", 77)
    rows, violations = [], 0
    for i in range(n_classes):
        spec = random_class(rng)
        m = int(rng.integers(2, max_m + 1))
        data = _Data(rng.standard_normal((m, spec.branch_widths[0])), rng.standard_normal((m, spec.trunk_widths[0])))
        est = rad.estimate_empirical_rademacher(spec, data, None, seed + i, threads=threads)
        bad = est.value > est.bound * (1 + 1e-9)
        violations += bad
        rows.append({"kind": spec.kind, "branch": spec.branch_widths, "trunk": spec.trunk_widths, "activation": spec.activation, "m": m, "estimate": est.value, "bound": est.bound, "ok": not bad})
    return {"name": "dominance", "trials": n_classes, "violations": int(violations), "max_ratio": max(r["estimate"] / r["bound"] for r in rows if r["bound"] > 0), "classes": rows}


def peeling_suite(cases: int, seed: int) -> list:
    rng = substream(seed, "verify", 88)
    out = []
    for lemma in ("outer", "inner"):
        worst, viol = 0.0, 0
        for i in range(cases):
            n = int(rng.integers(3, 5))
            p = int(rng.integers(1, 3))
            bw = tuple(int(w) for w in rng.integers(1, 4, size=n)) + (p,)
            tw = tuple(int(w) for w in rng.integers(1, 4, size=n)) + (p,)
            spec = rad.ClassSpec("composite", bw, tw, "abs", 1.0)
            m = int(rng.integers(2, rad.EXACT_M + 1))
            data = _Data(rng.standard_normal((m, bw[0])), rng.standard_normal((m, tw[0])))
            r = rad.check_peeling(spec, data, lemma, None, seed + i)
            worst = max(worst, r["ratio"])
            viol += r["violations"]
        out.append({"name": f"peeling_{lemma}", "trials": cases, "max_ratio": worst, "violations": int(viol)})
    return out


def cmd_verify(cfg: dict, out: Path) -> int:
    suites = SUITES if cfg["suite"] == "all" else tuple(s.strip() for s in cfg["suite"].split(","))
    unknown = [s for s in suites if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s): {', '.join(unknown)}")
    seed = cfg["seed"]
    results = []
    for s in suites:
        t0 = time.perf_counter()
        if s == "contraction":
            part = [
                rad.check_contraction("abs", cfg["contraction_trials"], seed, cfg["contraction_L"]),
                rad.check_contraction("biased_abs", cfg["contraction_trials"], seed, cfg["contraction_L"]),
            ]
        elif s == "abs_sup":
            part = [rad.check_abs_sup(cfg["abs_sup_trials"], seed)]
        elif s == "rank_one":
            part = [rad.check_rank_one(cfg["rank_one_datasets"], 12, seed)]
        elif s == "peeling":
            part = peeling_suite(cfg["peeling_cases"], seed)
        else:
            part = [dominance_suite(cfg["dominance_classes"], seed, cfg["threads"])]
        for r in part:
            r["seconds"] = round(time.perf_counter() - t0, 3)
        results.extend(part)
    failed = [r["name"] for r in results if r["violations"]]
    body = {"results": results, "violations": sum(r["violations"] for r in results), "failed": failed}
    atomic_write_text(out / f"{cfg['name']}.json", _dumps(body))
    _echo(out, cfg["name"], "verify", cfg)
    for r in results:
        print(f"{r['name']}: {'PASS' if not r['violations'] else 'FAIL'} (violations={r['violations']}, max_ratio={r['max_ratio']:.6g})")
    if failed:
        print(f"certification failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def cmd_report(cfg: dict, out: Path) -> int:
    _need(cfg, "inputs")
    rows = []
    for path in [p.strip() for p in cfg["inputs"].split(",") if p.strip()]:
        name = Path(path).name
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise UsageError(f"cannot read {path}: {e}") from None
        if name.endswith(".history.csv"):
            hist = list(csv.DictReader(io.StringIO(text)))
            if hist:
                last = hist[-1]
                rows.append({"source": name, "kind": "history", **{k: float(v) for k, v in last.items()}})
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError:
            raise UsageError(f"{path} is not a JSON report or history CSV") from None
        if name.endswith(".gap.json"):
            rows.append({"source": name, "kind": "gap", **{k: obj.get(k) for k in ("lam", "seed", "train_loss", "test_loss", "empirical_gap", "composite", "gap_bound_with_factor", "gap_bound_without_factor")}})
        elif name.endswith(".capacity.json"):
            rows.append({"source": name, "kind": "capacity", "composite": obj["composite"], "c_outer": obj["c_outer"], "lipschitz_product": obj["lipschitz_product"]})
        elif name.endswith(".bounds.json"):
            rows.append({"source": name, "kind": "bounds", "composite": obj["capacity"]["composite"], "rademacher_empirical": obj["rademacher_empirical"], "rademacher_average": obj["rademacher_average"], "gap_bound_with_factor": obj["gap_bound_with_factor"], "gap_bound_without_factor": obj["gap_bound_without_factor"]})
        elif "results" in obj:
            for r in obj["results"]:
                rows.append({"source": name, "kind": "verify", "check": r["name"], "violations": r["violations"], "max_ratio": r["max_ratio"]})
        else:
            raise UsageError(f"{path}: unrecognized report file")
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    md = ["# Summary", ""]
    for kind in dict.fromkeys(r["kind"] for r in rows):
        sel = [r for r in rows if r["kind"] == kind]
        kc = [c for c in cols if any(c in r for r in sel) and c != "kind"]
        md += [f"## {kind}", "", "| " + " | ".join(kc) + " |", "|" + "---|" * len(kc)]
        md += ["| " + " | ".join(_fmt(r.get(c)) for c in kc) + " |" for r in sel]
        md.append("")
    gaps = [r for r in rows if r["kind"] == "gap" and r.get("gap_bound_with_factor") is not None]
    if gaps:
        held = sum(r["empirical_gap"] <= r["gap_bound_with_factor"] for r in gaps)
        md += [f"Empirical gap within the bound in {held} of {len(gaps)} runs.", ""]
    atomic_write_text(out / f"{cfg['name']}.md", "\n".join(md))
    atomic_write_text(out / f"{cfg['name']}.csv", buf.getvalue())
    print(out / f"{cfg['name']}.md")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "capacity": cmd_capacity,
    "bounds": cmd_bounds,
    "verify": cmd_verify,
    "report": cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing subcommand: " + " | ".join(COMMANDS))
        cfg = resolve_config(args.command, args)
        if cfg["threads"] < 1:
            raise UsageError("--threads must be at least 1")
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (CheckpointError, DatasetFormatError) as e:
        loc = getattr(e, "location", "")
        print(f"error: {e}{f' at {loc}' if loc else ''}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
