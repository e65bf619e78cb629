"""Command line: ``hifgl {synth,partition,train,evaluate,report,selftest}``.

Exit codes: 0 success, 1 user error (bad flags, missing files), 2 internal
invariant violation (failed self-test, ledger mismatch, protocol error).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import subprocess
import sys
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, metrics, selftest
from .federation import ConfigError, TrainConfig, evaluate, sub_seed, train
from .graph import (DatasetError, PartitionError, apply_partition_json, cross_edge_fraction,
                    cross_edge_loss, load_dataset, normalize_structure, partition_random, partition_to_json,
                    privacy_leakage, silo_edge_stats)
from .nn import ModelError, load_checkpoint, save_checkpoint
from .secmp import AuditLog, CommLedger, ProtocolError
from .synthetic import make_citation_graph, write_dataset

log = logging.getLogger("hifgl")


class UserError(Exception):
    pass


class InvariantError(Exception):
    pass


# flag name -> TrainConfig field
FLAG_FIELDS = {
    "arch": "arch", "layers": "num_layers", "hidden": "hidden_dim", "epochs": "epochs",
    "lr": "lr", "lr_gamma": "lr_gamma", "lr_step": "lr_step", "optimizer": "optimizer",
    "scheme": "fed_scheme", "fedprox_mu": "fedprox_mu", "local_steps": "local_steps",
    "t_privacy": "t_privacy", "seed": "seed", "dp_sigma": "dp_sigma", "patience": "patience",
}


# -- files ------------------------------------------------------------------------

def atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    config: dict
    dataset: dict
    seed: int
    silos: int
    version: str
    sources: dict
    outputs: dict = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        # everything that determines the results; output paths and worker count do not
        key = json.dumps({"config": self.config, "dataset": self.dataset, "silos": self.silos,
                          "partition": self.outputs.get("partition_digest")}, sort_keys=True)
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def to_json(self) -> str:
        doc = {"run_id": self.run_id, "version": self.version, "seed": self.seed, "silos": self.silos,
               "config": self.config, "config_sources": self.sources, "dataset": self.dataset,
               "outputs": self.outputs}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# -- dataset resolution -----------------------------------------------------------

def resolve_dataset(args) -> tuple[Path, Path]:
    if args.dataset_content or args.dataset_cites:
        if not (args.dataset_content and args.dataset_cites):
            raise UserError("--dataset-content and --dataset-cites go together")
        content, cites = Path(args.dataset_content), Path(args.dataset_cites)
    elif args.dataset:
        name = args.dataset
        roots = [Path(os.environ["HIFGL_DATA_DIR"])] if os.environ.get("HIFGL_DATA_DIR") else []
        roots.append(Path("data"))
        for root in roots:
            content, cites = root / name / f"{name}.content", root / name / f"{name}.cites"
            if content.exists() and cites.exists():
                break
        else:
            where = ", ".join(str(r / name) for r in roots)
            raise UserError(f"dataset {name!r} not found (looked in {where}); "
                            f"set HIFGL_DATA_DIR or pass --dataset-content/--dataset-cites")
    else:
        raise UserError("give --dataset NAME or --dataset-content/--dataset-cites")
    for p in (content, cites):
        if not p.is_file():
            raise UserError(f"missing dataset file {p}")
    return content, cites


def dataset_fingerprint(content: Path, cites: Path) -> dict:
    return {"content": str(content), "cites": str(cites),
            "content_sha256": _digest(content), "cites_sha256": _digest(cites)}


def load_partitioned(args, content, cites):
    g = load_dataset(content, cites)
    if getattr(args, "partition", None):
        text = Path(args.partition).read_text()
        return apply_partition_json(g, text), text
    silos = args.silos if args.silos is not None else 5
    seed = args.seed if args.seed is not None else 0
    g = partition_random(g, silos, seed=sub_seed(seed, "partition"))
    return g, partition_to_json(g, seed=seed)


# -- config ---------------------------------------------------------------------------

def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Keys are flag or field names."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UserError(f"cannot read config file: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        key = FLAG_FIELDS.get(key, key)
        if key not in TrainConfig.field_names() and key not in ("silos", "workers"):
            raise UserError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(name: str, raw):
    default = getattr(TrainConfig(), name, None)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        return str(raw).lower() in ("1", "true", "yes", "on")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {raw!r}") from exc
    return str(raw)


def build_config(args) -> tuple[TrainConfig, dict, int]:
    """CLI flags override the config file, which overrides defaults."""
    values, sources = {}, {}
    file_vals = read_config_file(args.config) if args.config else {}
    for key, raw in file_vals.items():
        if key in ("silos", "workers"):
            continue
        values[key] = _coerce(key, raw)
        sources[key] = "file"
    for flag, name in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = _coerce(name, v)
            sources[name] = "flag"
    silos = args.silos if args.silos is not None else int(file_vals.get("silos", 5))
    cfg = TrainConfig(**values)
    for name in TrainConfig.field_names():
        sources.setdefault(name, "default")
    return cfg, dict(sorted(sources.items())), silos


# -- subcommands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    g = make_citation_graph(num_nodes=args.nodes, num_features=args.features, num_classes=args.classes,
                            num_links=args.links, homophily=args.homophily, seed=args.seed)
    content, cites = write_dataset(g, Path(args.out_dir) / args.name, args.name)
    print(f"wrote {content} and {cites}: {g.num_nodes} nodes, {g.num_edges} links")
    return 0


def cmd_partition(args) -> int:
    content, cites = resolve_dataset(args)
    args.partition = None
    g, text = load_partitioned(args, content, cites)
    out = Path(args.out) if args.out else Path(args.out_dir or ".") / "partition.json"
    atomic_write(out, text)
    leak = privacy_leakage(g)
    stats = silo_edge_stats(g)
    rows = []
    for s in range(g.num_silos):
        nodes = g.silo_nodes(s)
        split = np.bincount(g.split_of[nodes], minlength=3)
        rows.append({"silo": s, "nodes": len(nodes), "train": int(split[0]), "val": int(split[1]),
                     "test": int(split[2]), "intra_edges": stats.intra_edges[s],
                     "leakage": leak.per_silo_fraction[s]})
    print(metrics.text_table(rows))
    print(f"\nmean leakage fraction   {leak.mean_fraction:.4f}")
    print(f"cross edges             {stats.cross_edges}")
    print(f"cross-edge loss         {cross_edge_loss(g):.4f}")
    print(f"cross-edge fraction     {cross_edge_fraction(g):.4f}")
    print(f"partition written to {out}")
    return 0


def _history_csv(history: list[dict], num_silos: int) -> str:
    buf = io.StringIO()
    cols = ["round", "lr", "train_loss", "val_acc", "test_acc"] + [f"silo{s}_test_acc" for s in range(num_silos)]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in history:
        w.writerow([rec["round"], repr(rec["lr"]), repr(rec["train_loss"]), repr(rec["val_acc"]),
                    repr(rec["test_acc"])] + [repr(x) for x in rec["per_silo_acc"]])
    return buf.getvalue()


def cmd_train(args) -> int:
    cfg, sources, silos = build_config(args)
    args.silos = silos
    args.seed = cfg.seed
    content, cites = resolve_dataset(args)
    g, part_text = load_partitioned(args, content, cites)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.to_dict(), dataset_fingerprint(content, cites), cfg.seed, g.num_silos,
                           version_string(), sources)
    manifest.outputs = {
        "partition": "partition.json", "partition_digest": hashlib.sha256(part_text.encode()).hexdigest(),
        "history": "history.jsonl", "history_csv": "history.csv", "timings": "timings.jsonl",
        "ledger": "ledger.json", "result": "result.json", "checkpoints": [],
    }
    audit = AuditLog(out / "audit.tsv") if args.audit else None
    try:
        result = train(cfg, g, workers=args.workers, audit=audit)
    finally:
        if audit is not None:
            audit.close()
    run_id = manifest.run_id
    ckpts = []
    if cfg.fed_scheme == "local":
        for s, m in enumerate(result.models):
            name = f"model_silo{s}.ckpt"
            save_checkpoint(out / name, m, run_id=run_id, silo=s)
            ckpts.append(name)
    else:
        save_checkpoint(out / "model.ckpt", result.models[0], run_id=run_id)
        ckpts.append("model.ckpt")
    manifest.outputs["checkpoints"] = ckpts
    if audit is not None:
        manifest.outputs["audit"] = "audit.tsv"

    atomic_write(out / "partition.json", part_text)
    history_lines = "".join(json.dumps(dict(rec, run_id=run_id), sort_keys=True) + "\n" for rec in result.history)
    atomic_write(out / "history.jsonl", history_lines)
    atomic_write(out / "history.csv", _history_csv(result.history, g.num_silos))
    atomic_write(out / "timings.jsonl",
                 "".join(json.dumps(dict(t, run_id=run_id)) + "\n" for t in result.timings))
    comm = metrics.comm_report(result.ledger, g, cfg, xi=result.models[0].num_scalars)
    atomic_write(out / "ledger.json", json.dumps({"run_id": run_id, "ledger": result.ledger.to_dict(),
                                                  "conformance": comm.to_dict()}, indent=2, sort_keys=True) + "\n")
    res = {"run_id": run_id, "scheme": cfg.fed_scheme, "arch": cfg.arch, "best": result.best,
           "final": result.final, "xi": result.models[0].num_scalars}
    if result.audit is not None:
        res["audit"] = result.audit
    atomic_write(out / "result.json", json.dumps(res, indent=2, sort_keys=True) + "\n")
    atomic_write(out / "manifest.json", manifest.to_json())

    print(f"run {run_id}: {cfg.fed_scheme}-{cfg.arch}, {len(result.history)} rounds")
    print(f"best val {result.best['val_acc']:.4f} at round {result.best['round']}, "
          f"test there {result.best['test_acc']:.4f}; final test {result.final['test_acc']:.4f}")
    print(f"ledger conformance: {'ok' if comm.all_ok else 'MISMATCH'}")
    if result.audit is not None:
        print(f"audit: {result.audit['violations']} violations, {result.audit['single_neighbor_flags']} single-neighbor flags")
    if not comm.all_ok:
        raise InvariantError("communication ledger does not match the closed forms")
    if result.audit is not None and result.audit["violations"]:
        raise InvariantError("privacy audit recorded violations")
    return 0


def _load_run(run_dir: Path) -> tuple[dict, dict]:
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text())
        res = json.loads((run_dir / "result.json").read_text())
    except FileNotFoundError as exc:
        raise UserError(f"{run_dir} is not a finished run: {exc.filename} missing") from exc
    return manifest, res


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    manifest, _ = _load_run(run_dir)
    ds = manifest["dataset"]
    content, cites = Path(ds["content"]), Path(ds["cites"])
    for p, key in ((content, "content_sha256"), (cites, "cites_sha256")):
        if not p.is_file():
            raise UserError(f"dataset file {p} recorded in the manifest is missing")
        if _digest(p) != ds[key]:
            raise UserError(f"{p} changed since the run (digest mismatch)")
    g = apply_partition_json(load_dataset(content, cites), (run_dir / "partition.json").read_text())
    cfg = TrainConfig(**manifest["config"])
    g = normalize_structure(g, cfg.symmetrize, cfg.self_loops)
    models = [load_checkpoint(run_dir / c)[0] for c in manifest["outputs"]["checkpoints"]]
    drop = cfg.fed_scheme in ("local", "fedavg", "fedprox")
    res = evaluate(models if len(models) > 1 else models[0], g, args.split, drop_cross_edges=drop)
    rows = [{"silo": s, "acc": a} for s, a in enumerate(res.per_silo_acc)]
    print(metrics.text_table(rows))
    print(f"\n{args.split} accuracy (pooled) {res.global_acc:.4f}")
    return 0


def _run_acc(path: str) -> float:
    p = Path(path)
    if p.is_dir():
        _, res = _load_run(p)
        return float(res["best"]["test_acc"])
    try:
        return float(path)
    except ValueError:
        raise UserError(f"{path!r} is neither a run directory nor an accuracy") from None


def cmd_report(args) -> int:
    out = {}
    ok = True
    if args.model or args.lower or args.upper:
        if not (args.model and args.lower and args.upper):
            raise UserError("gain needs --model, --lower and --upper")
        gr = metrics.gain_report(_run_acc(args.model), _run_acc(args.lower), _run_acc(args.upper))
        out["gain"] = gr.__dict__
        print(metrics.text_table([{"acc_model": gr.acc_model, "acc_lower": gr.acc_lower,
                                   "acc_upper": gr.acc_upper, "gain_%": round(100 * gr.gain, 2)}]))
    for run in args.run or []:
        run_dir = Path(run)
        manifest, res = _load_run(run_dir)
        ledger_doc = json.loads((run_dir / "ledger.json").read_text())
        ds = manifest["dataset"]
        g = apply_partition_json(load_dataset(ds["content"], ds["cites"]), (run_dir / "partition.json").read_text())
        cfg = TrainConfig(**manifest["config"])
        raw = ledger_doc["ledger"]
        ledger = CommLedger(raw["device_device_scalars"], raw["device_silo_scalars"], raw["silo_server_scalars"],
                            Counter(raw["per_payload"]),
                            {int(k): Counter(v) for k, v in raw["per_layer"].items()},
                            raw["param_requests"], raw["forward_passes"], raw["rounds"])
        comm = metrics.comm_report(ledger, g, cfg, xi=res["xi"])
        space = metrics.space_report(g, cfg, res["xi"])
        ok &= comm.all_ok and space.within_bound
        out[str(run_dir)] = {"comm": comm.to_dict(), "space": space.to_dict()}
        print(f"\n{run_dir} ({cfg.fed_scheme}-{cfg.arch})")
        print(metrics.text_table([{"check": c.name, "measured": c.measured, "expected": c.expected, "ok": c.ok}
                                  for c in comm.checks]))
        print(f"storage delta {space.delta} <= bound {space.delta_bound}: {space.within_bound}")
    if not out:
        raise UserError("nothing to report: pass --model/--lower/--upper and/or --run")
    if args.out:
        atomic_write(Path(args.out), metrics.to_json(out) + "\n")
    if not ok:
        raise InvariantError("conformance check failed")
    return 0


def cmd_selftest(args) -> int:
    suites = selftest.SUITES if args.suite == "all" else (args.suite,)
    results = selftest.run(suites, t=args.t, fault=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<10} {r.seconds:6.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.ok]
    if args.inject_fault:
        sensitive = {"coding", "invertibility"} & set(suites)
        if sensitive and sensitive <= set(failed):
            print(f"injected fault {args.inject_fault!r} detected as expected")
            return 0
        raise InvariantError(f"injected fault {args.inject_fault!r} went undetected")
    if failed:
        raise InvariantError(f"failed suites: {', '.join(failed)}")
    return 0


# -- parser ------------------------------------------------------------------------------

def _dataset_args(p):
    p.add_argument("--dataset", help="name looked up under $HIFGL_DATA_DIR/<name>/ or ./data/<name>/")
    p.add_argument("--dataset-content")
    p.add_argument("--dataset-cites")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hifgl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded citation-like dataset")
    p.add_argument("--out-dir", default="data")
    p.add_argument("--name", default="synth")
    p.add_argument("--nodes", type=int, default=2708)
    p.add_argument("--features", type=int, default=1433)
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--links", type=int, default=5278)
    p.add_argument("--homophily", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("partition", help="random silo partition and leakage statistics")
    _dataset_args(p)
    p.add_argument("--silos", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="partition file (default <out-dir>/partition.json)")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="run one training configuration")
    _dataset_args(p)
    p.add_argument("--partition", help="partition JSON; otherwise partition on the fly")
    p.add_argument("--silos", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--scheme", choices=("local", "fedavg", "fedprox", "global", "hifgl"))
    p.add_argument("--arch", choices=("mlp", "gcn", "sage"))
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-gamma", type=float)
    p.add_argument("--lr-step", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--fedprox-mu", type=float)
    p.add_argument("--local-steps", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--t-privacy", type=int)
    p.add_argument("--dp-sigma", type=float)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config", help="key=value file; flags take precedence")
    p.add_argument("--audit", action="store_true", help="write the cross-boundary payload log")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a finished run's checkpoint")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="graph information gain and ledger conformance")
    p.add_argument("--model", help="run directory or accuracy")
    p.add_argument("--lower", help="lower-bound run (graph-free MLP) or accuracy")
    p.add_argument("--upper", help="upper-bound run (centralized) or accuracy")
    p.add_argument("--run", action="append", help="run directory to check; repeatable")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="coding, invertibility, oracle and gradient suites")
    p.add_argument("--suite", choices=("all",) + selftest.SUITES, default="all")
    p.add_argument("--t", type=int, help="privacy threshold for the coding suites")
    p.add_argument("--inject-fault", choices=selftest.FAULTS)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HIFGL_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UserError, ConfigError, DatasetError, PartitionError, metrics.DegenerateGainError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InvariantError, ProtocolError, ModelError, FloatingPointError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
