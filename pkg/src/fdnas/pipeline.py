"""Config-driven experiment steps shared by the command line and the acceptance suite."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint
from .config import ExperimentConfig
from .data import (Dataset, DevicePartition, PartitionSpec, default_groups, gen_synthetic, load_raw_images,
                   partition, split_train_val_test)
from .federation import (ClusterResult, FinetuneSettings, LocalSettings, ServerState, cluster_by_tag,
                         evaluate, finetune_fedavg, init_server, make_devices, restore_server, run_cfdnas,
                         run_fdnas, server_checkpoint)
from .latency import PROFILES, LatencyTable, arch_flops, arch_latency, load_latency_table, synth_latency_table
from .search_space import SearchSpace
from .supernet import CompactNet, DerivedArchitecture, derive_normal_net, extract_compact_net

HW_ORDER = ("gpu", "cpu", "phone")


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "raw":
        return load_raw_images(d.images_path, d.labels_path, d.num_classes)
    return gen_synthetic(d.num_classes, d.per_class, (d.channels, d.image_size, d.image_size), d.difficulty,
                         cfg.seed)


def partition_spec(cfg: ExperimentConfig) -> PartitionSpec:
    p = cfg.partition
    return PartitionSpec(kind=p.kind, groups=p.groups, concentration=p.concentration, tags=p.tags, seed=cfg.seed)


def build_partitions(cfg: ExperimentConfig, ds: Dataset) -> list[DevicePartition]:
    parts = partition(ds, partition_spec(cfg), cfg.federation.num_devices, cfg.seed)
    return [split_train_val_test(p, cfg.partition.val_fraction, cfg.partition.test_fraction, cfg.seed)
            for p in parts]


def hardware_tags(cfg: ExperimentConfig) -> list[str]:
    """Configured tags, or gpu/cpu/phone over three contiguous device blocks."""
    if cfg.federation.hardware_tags is not None:
        return [str(t) for t in cfg.federation.hardware_tags]
    k = cfg.federation.num_devices
    if k < 3:
        return ["gpu"] * k
    tags = [""] * k
    for g, (_, devs) in enumerate(default_groups(3, k)):
        for d in devs:
            tags[d] = HW_ORDER[g]
    return tags


def build_tables(cfg: ExperimentConfig, space: SearchSpace) -> dict[str, LatencyTable]:
    tables = {tag: synth_latency_table(prof, space) for tag, prof in PROFILES.items()}
    for tag, path in cfg.cluster.tables.items():
        tables[tag] = load_latency_table(path, space)
    return tables


def local_settings(cfg: ExperimentConfig, rounds: int | None = None) -> LocalSettings:
    return LocalSettings.from_config(cfg, rounds=rounds)


@dataclass
class SearchRun:
    server: ServerState
    devices: list
    settings: LocalSettings
    table: LatencyTable


def prepare_search(cfg: ExperimentConfig, parts: list[DevicePartition], tables: dict, rounds: int | None = None,
                   resume: Checkpoint | None = None) -> SearchRun:
    space = cfg.search_space()
    settings = local_settings(cfg, cfg.federation.rounds if rounds is None else rounds)
    devices = make_devices(space, parts, hardware_tags(cfg), settings, cfg.federation.identical_device_seeds)
    server = restore_server(resume, space, devices) if resume is not None else init_server(space, cfg.seed)
    return SearchRun(server, devices, settings, tables[cfg.loss.search_profile])


def continue_search(cfg: ExperimentConfig, run: SearchRun, ds: Dataset, rounds: int | None = None,
                    until: int | None = None, workers: int | None = None, on_round=None) -> SearchRun:
    rounds = cfg.federation.rounds if rounds is None else rounds
    run_fdnas(run.server, run.devices, ds, run.settings, run.table, rounds, cfg.federation.online, until=until,
              workers=cfg.workers if workers is None else workers, on_round=on_round)
    return run


def run_search(cfg: ExperimentConfig, ds: Dataset, parts: list[DevicePartition], tables: dict,
               rounds: int | None = None, until: int | None = None, resume: Checkpoint | None = None,
               workers: int | None = None, on_round=None) -> SearchRun:
    run = prepare_search(cfg, parts, tables, rounds, resume)
    return continue_search(cfg, run, ds, rounds, until, workers, on_round)


def search_checkpoint(cfg: ExperimentConfig, run: SearchRun, rounds: int) -> Checkpoint:
    return server_checkpoint(run.server, run.devices, {"seed": cfg.seed, "rounds_total": rounds,
                                                       "kind": "supernet", "config": cfg.to_dict()})


def cluster_checkpoint(cfg: ExperimentConfig, result: ClusterResult) -> Checkpoint:
    return server_checkpoint(result.server, [], {"seed": cfg.seed, "kind": "supernet", "cluster": result.tag,
                                                 "architecture": json.loads(result.architecture.to_json())})


def cluster_plan(cfg: ExperimentConfig, devices, tables: dict):
    plan = cluster_by_tag(devices, cfg.cluster.key)
    for tag in plan.clusters:
        plan.lambda2[tag] = float(cfg.cluster.lambda2.get(tag, cfg.cluster.default_lambda2))
        plan.tables[tag] = tables.get(tag, tables[cfg.loss.search_profile])
    return plan


def run_cluster_search(cfg: ExperimentConfig, init_state: dict, ds: Dataset, parts, tables: dict,
                       rounds: int | None = None, workers: int | None = None,
                       checkpoint_id: str = "") -> dict[str, ClusterResult]:
    space = cfg.search_space()
    rounds = cfg.cluster.rounds if rounds is None else rounds
    settings = local_settings(cfg, rounds)
    devices = make_devices(space, parts, hardware_tags(cfg), settings, cfg.federation.identical_device_seeds)
    plan = cluster_plan(cfg, devices, tables)
    return run_cfdnas(init_state, space, devices, ds, plan, rounds, settings, cfg.federation.online,
                      workers=cfg.workers if workers is None else workers,
                      reset_optimizers=cfg.cluster.reset_optimizers, checkpoint_id=checkpoint_id)


def finetune_settings(cfg: ExperimentConfig, rounds: int | None = None) -> FinetuneSettings:
    f = cfg.finetune
    return FinetuneSettings(rounds=f.rounds if rounds is None else rounds, local_epochs=f.local_epochs, lr=f.lr,
                            batch_size=f.batch_size, momentum=cfg.optim.momentum,
                            weight_decay=2.0 * cfg.loss.lambda1, root_seed=cfg.seed)


def run_finetune(cfg: ExperimentConfig, arch: DerivedArchitecture, ds: Dataset, parts, rounds: int | None = None,
                 workers: int | None = None, on_round=None):
    return finetune_fedavg(arch, parts, ds, finetune_settings(cfg, rounds),
                           workers=cfg.workers if workers is None else workers, on_round=on_round)


def metrics(cfg: ExperimentConfig, net: CompactNet, arch: DerivedArchitecture, ds: Dataset, parts,
            tables: dict) -> dict:
    e = cfg.eval
    out = {
        "acc_fedavg": evaluate(net, parts, ds, "federated_averaged"),
        "acc_local_mean": evaluate(net, parts, ds, "mean_local", e.local_epochs, e.lr, cfg.finetune.batch_size,
                                   cfg.seed),
        "params": net.num_weights(),
        "flops": arch_flops(arch),
        "exp_latency_ms": {tag: arch_latency(arch, t) for tag, t in sorted(tables.items())},
        "architecture": arch.summary(),
    }
    return out


def compact_checkpoint(cfg: ExperimentConfig, net: CompactNet, arch: DerivedArchitecture, rounds: int) -> Checkpoint:
    header = {"kind": "compact", "seed": cfg.seed, "search_space_hash": arch.space.hash(),
              "architecture": json.loads(arch.to_json())}
    return Checkpoint(rounds, header, {f"weights/{k}": v for k, v in net.state_dict().items()})


def load_compact(ckpt: Checkpoint, arch: DerivedArchitecture) -> CompactNet:
    if ckpt.header.get("kind") != "compact":
        raise ValueError("not a compact-network checkpoint")
    if ckpt.header.get("search_space_hash") != arch.space.hash():
        raise ValueError(f"weights were trained for search space {ckpt.header.get('search_space_hash')}, "
                         f"architecture uses {arch.space.hash()}")
    embedded = DerivedArchitecture.from_json(json.dumps(ckpt.header["architecture"]))
    if embedded.choices != arch.choices:
        raise ValueError(f"weights belong to architecture {embedded.summary()}, not {arch.summary()}")
    net = CompactNet(arch, 0)
    net.load_state_dict(ckpt.group("weights"))
    return net


def supernet_from_checkpoint(ckpt: Checkpoint, space: SearchSpace) -> ServerState:
    return restore_server(ckpt, space)


def derive_from_checkpoint(path, space: SearchSpace) -> DerivedArchitecture:
    ckpt = load_checkpoint(path)
    server = restore_server(ckpt, space)
    return derive_normal_net(server.to_net(), f"{Path(path).name}@round{ckpt.round}")


def inherited_net(server: ServerState, arch: DerivedArchitecture) -> CompactNet:
    """Compact net carrying the SuperNet's weights for the kept candidates."""
    return extract_compact_net(server.to_net(), arch)

