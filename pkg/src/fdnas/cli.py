"""Command line runner: gen, search, cluster-search, derive, finetune, eval, report.

Every subcommand works inside one run directory (``--out``, default from the
config) and writes ``<command>.config.json`` there with the resolved config.
Failures exit nonzero with a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import pipeline
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import load_dataset, load_manifest, save_dataset, save_manifest
from .latency import PROFILES, load_latency_table, save_latency_table
from .supernet import DerivedArchitecture

log = logging.getLogger("fdnas")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"usage: {message}")


# -- run directory helpers -----------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, rows) -> None:
    _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as err:
        raise CLIError(f"output directory {out} is not writable: {err}") from err
    return out


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CLIError(f"{path} not found ({hint})")
    return path


def _inputs(cfg: ExperimentConfig, out: Path):
    ds = load_dataset(_require(out / "dataset.bin", "run `gen` first"))
    parts = load_manifest(_require(out / "partition.json", "run `gen` first"))
    if len(parts) != cfg.federation.num_devices:
        raise CLIError(f"partition has {len(parts)} devices, config asks for {cfg.federation.num_devices}")
    return ds, parts


def _tables(cfg: ExperimentConfig, out: Path) -> dict:
    space = cfg.search_space()
    tables = {}
    for path in sorted((out / "tables").glob("*.csv")):
        t = load_latency_table(path, space)
        tables[t.hardware_tag] = t
    if not tables:
        raise CLIError(f"no latency tables under {out / 'tables'} (run `gen` first)")
    for tag, path in cfg.cluster.tables.items():
        tables[tag] = load_latency_table(path, space)
    return tables


def _load_arch(path: Path, cfg: ExperimentConfig) -> DerivedArchitecture:
    arch = DerivedArchitecture.from_json(_require(path, "run `derive` first").read_text(encoding="utf-8"))
    space = cfg.search_space()
    if arch.space.hash() != space.hash():
        raise CLIError(f"architecture search space {arch.space.hash()} does not match "
                       f"configured search space {space.hash()}")
    return arch


# -- subcommands ---------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, args, out: Path) -> dict:
    ds = pipeline.build_dataset(cfg)
    parts = pipeline.build_partitions(cfg, ds)
    save_dataset(ds, out / "dataset.bin")
    save_manifest(parts, out / "partition.json", cfg.seed, pipeline.partition_spec(cfg))
    (out / "tables").mkdir(exist_ok=True)
    space = cfg.search_space()
    for tag, table in sorted(pipeline.build_tables(cfg, space).items()):
        save_latency_table(table, out / "tables" / f"{tag}.csv")
    return {"samples": len(ds), "devices": len(parts), "tables": sorted(PROFILES)}


def cmd_search(cfg: ExperimentConfig, args, out: Path) -> dict:
    ds, parts = _inputs(cfg, out)
    tables = _tables(cfg, out)
    rounds = cfg.federation.rounds if args.rounds is None else args.rounds
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.header.get("kind") != "supernet":
        raise CLIError(f"{args.resume} is not a SuperNet checkpoint")
    ckpt_path = out / "supernet.ckpt"
    timing_path = out / "search_timing.json"
    timing = json.loads(timing_path.read_text()) if resume is not None and timing_path.exists() else {}
    run = pipeline.prepare_search(cfg, parts, tables, rounds, resume)

    def on_round(server, report):
        log.info("round %d  reg_loss %.4f  latency %.4f ms", report.round, report.reg_loss,
                 report.expected_latency_ms)
        timing[str(report.round)] = report.wall_s
        save_checkpoint(pipeline.search_checkpoint(cfg, run, rounds), ckpt_path)
        _write_jsonl(out / "rounds.jsonl", [r.metrics() for r in server.history])
        _write_json(timing_path, timing)

    pipeline.continue_search(cfg, run, ds, rounds, args.until, args.workers, on_round)
    save_checkpoint(pipeline.search_checkpoint(cfg, run, rounds), ckpt_path)
    _write_jsonl(out / "rounds.jsonl", [r.metrics() for r in run.server.history])
    _write_json(timing_path, timing)
    return {"round": run.server.round, "rounds_total": rounds, "checkpoint": str(ckpt_path)}


def cmd_cluster_search(cfg: ExperimentConfig, args, out: Path) -> dict:
    ds, parts = _inputs(cfg, out)
    tables = _tables(cfg, out)
    path = Path(args.checkpoint or out / "supernet.ckpt")
    ckpt = load_checkpoint(_require(path, "run `search` first"))
    space = cfg.search_space()
    init = pipeline.supernet_from_checkpoint(ckpt, space)
    results = pipeline.run_cluster_search(cfg, init.global_state, ds, parts, tables, rounds=args.rounds,
                                          workers=args.workers, checkpoint_id=f"{path.name}@round{ckpt.round}")
    summary = {}
    for tag, res in sorted(results.items()):
        cdir = out / "clusters" / tag
        cdir.mkdir(parents=True, exist_ok=True)
        if res.error:
            summary[tag] = {"error": res.error}
            continue
        save_checkpoint(pipeline.cluster_checkpoint(cfg, res), cdir / "supernet.ckpt")
        _write_jsonl(cdir / "rounds.jsonl", [r.metrics() for r in res.server.history])
        _write_text(cdir / "architecture.json", res.architecture.to_json())
        summary[tag] = {"architecture": res.architecture.summary(), "rounds": res.server.round}
    _write_json(out / "clusters.json", summary)
    failed = sorted(t for t, s in summary.items() if "error" in s)
    if failed and len(failed) == len(summary):
        raise CLIError(f"every cluster failed: {failed}")
    return summary


def cmd_derive(cfg: ExperimentConfig, args, out: Path) -> dict:
    path = Path(args.checkpoint or out / "supernet.ckpt")
    arch = pipeline.derive_from_checkpoint(_require(path, "run `search` first"), cfg.search_space())
    dest = Path(args.arch or out / "architecture.json")
    _write_text(dest, arch.to_json())
    return {"architecture": arch.summary(), "flags": arch.flags, "path": str(dest)}


def cmd_finetune(cfg: ExperimentConfig, args, out: Path) -> dict:
    ds, parts = _inputs(cfg, out)
    arch = _load_arch(Path(args.arch or out / "architecture.json"), cfg)
    net, history = pipeline.run_finetune(cfg, arch, ds, parts, rounds=args.rounds, workers=args.workers,
                                         on_round=lambda r: log.info("finetune round %d  loss %.4f",
                                                                     r["round"], r["train_loss"]))
    dest = Path(args.weights or out / "compact.ckpt")
    save_checkpoint(pipeline.compact_checkpoint(cfg, net, arch, len(history)), dest)
    _write_jsonl(out / "finetune.jsonl", history)
    return {"rounds": len(history), "final_train_loss": history[-1]["train_loss"] if history else None}


def cmd_eval(cfg: ExperimentConfig, args, out: Path) -> dict:
    ds, parts = _inputs(cfg, out)
    arch = _load_arch(Path(args.arch or out / "architecture.json"), cfg)
    net = pipeline.load_compact(load_checkpoint(_require(Path(args.weights or out / "compact.ckpt"),
                                                         "run `finetune` first")), arch)
    m = pipeline.metrics(cfg, net, arch, ds, parts, _tables(cfg, out))
    m["seed"] = cfg.seed
    _write_json(out / "metrics.json", m)
    return {k: m[k] for k in ("acc_fedavg", "acc_local_mean", "params", "flops")}


REPORT_FIELDS = ["run_id", "seed", "acc_fedavg", "acc_local_mean", "params_M", "flops_M"]


def report_rows(run_dirs) -> tuple[list[str], list[dict]]:
    rows, profiles = [], set()
    for d in run_dirs:
        d = Path(d)
        m = json.loads(_require(d / "metrics.json", "run `eval` first").read_text(encoding="utf-8"))
        timing_path = d / "search_timing.json"
        timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
        row = {
            "run_id": d.name,
            "seed": m.get("seed", ""),
            "acc_fedavg": m["acc_fedavg"],
            "acc_local_mean": m["acc_local_mean"],
            "params_M": m["params"] / 1e6,
            "flops_M": m["flops"] / 1e6,
            "search_wall_s": sum(timing.values()) if timing else "",
        }
        for tag, ms in m["exp_latency_ms"].items():
            row[f"exp_latency_ms_{tag}"] = ms
            profiles.add(tag)
        rows.append(row)
    fields = REPORT_FIELDS + [f"exp_latency_ms_{t}" for t in sorted(profiles)] + ["search_wall_s"]
    return fields, rows


def cmd_report(cfg: ExperimentConfig, args, out: Path) -> dict:
    if not args.runs:
        raise CLIError("report needs at least one run directory")
    fields, rows = report_rows(args.runs)
    dest = Path(args.csv or out / "report.csv")
    with dest.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return {"rows": len(rows), "path": str(dest)}


COMMANDS = {
    "gen": cmd_gen,
    "search": cmd_search,
    "cluster-search": cmd_cluster_search,
    "derive": cmd_derive,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fdnas", description="Federated direct neural architecture search on toy data.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out", help="run directory (overrides config out_dir)")
        p.add_argument("--workers", type=int, help="device updates run in this many threads")
        p.add_argument("--resume", help="SuperNet checkpoint to continue from (search)")
        p.add_argument("--rounds", type=int, help="override the round count of this step")
        p.add_argument("--until", type=int, help="stop search after this round, keeping the schedule")
        p.add_argument("--checkpoint", help="SuperNet checkpoint (cluster-search, derive)")
        p.add_argument("--arch", help="architecture JSON path")
        p.add_argument("--weights", help="compact network checkpoint path")
        p.add_argument("--csv", help="report destination (report)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories holding metrics.json")
    return parser


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if command is None:
            raise CLIError("usage: a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
        overrides = {"seed": args.seed, "out_dir": args.out, "workers": args.workers}
        cfg = load_config(args.config, overrides).validate()
        out = _out_dir(cfg)
        _write_text(out / f"{command}.config.json", cfg.resolved_json())
        start = time.perf_counter()
        result = COMMANDS[command](cfg, args, out)
        log.info("%s finished in %.1f s", command, time.perf_counter() - start)
        print(json.dumps({"command": command, "ok": True, **result}, sort_keys=True))
        return 0
    except Exception as err:  # noqa: BLE001 - every failure becomes a JSON error record
        print(json.dumps({"command": command, "ok": False, "error": type(err).__name__, "message": str(err)},
                         sort_keys=True), file=sys.stderr)
        return 2 if isinstance(err, CLIError) and str(err).startswith("usage") else 1


if __name__ == "__main__":
    raise SystemExit(main())
