"""Latency lookup tables and multiply-add accounting.

Tables map ``(layer_index, candidate_id)`` to milliseconds. They are
synthesised from a MAC-count model per hardware profile, or loaded from a
``layer,candidate,ms`` CSV with a ``<name>.meta.json`` sidecar.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .search_space import CandidateSpec, LayerSpec, SearchSpace


@dataclass(frozen=True)
class HardwareProfile:
    tag: str
    throughput: float  # MACs per ms
    overhead_ms: float = 0.0
    batch_size: int = 1
    # extra cost multiplier on depthwise MACs with kernel >= 5
    large_kernel_factor: float = 1.0

    def __post_init__(self):
        if not self.throughput > 0:
            raise ValueError(f"profile {self.tag!r}: throughput must be positive")
        if self.overhead_ms < 0 or self.batch_size < 1 or self.large_kernel_factor <= 0:
            raise ValueError(f"profile {self.tag!r}: invalid overhead, batch size or kernel factor")


# The CPU profile punishes 5x5 depthwise kernels hardest; the phone runs at batch 1.
PROFILES = {
    "gpu": HardwareProfile("gpu", throughput=2.0e7, overhead_ms=0.02, batch_size=128, large_kernel_factor=1.0),
    "cpu": HardwareProfile("cpu", throughput=4.0e6, overhead_ms=0.01, batch_size=128, large_kernel_factor=2.5),
    "phone": HardwareProfile("phone", throughput=4.0e4, overhead_ms=0.1, batch_size=1, large_kernel_factor=1.5),
}


def get_profile(tag: str) -> HardwareProfile:
    try:
        return PROFILES[tag]
    except KeyError:
        raise ValueError(f"unknown hardware profile {tag!r}; known: {sorted(PROFILES)}") from None


def conv_macs(kernel: int, cin: int, cout: int, height: int, width: int, depthwise: bool = False) -> int:
    """k^2*Cin*Cout*H*W for a dense conv, k^2*C*H*W for depthwise (output map size)."""
    if depthwise:
        if cin != cout:
            raise ValueError("depthwise conv needs equal channels")
        return kernel * kernel * cin * height * width
    return kernel * kernel * cin * cout * height * width


def candidate_ops(cand: CandidateSpec, layer: LayerSpec) -> list[dict]:
    """The convolutions inside one candidate, with their output map sizes."""
    if cand.kind != "mbconv":
        return []
    hidden = layer.in_channels * cand.expansion
    s_in, s_out = layer.in_size, layer.out_size
    ops = []
    if cand.expansion != 1:
        ops.append(dict(kernel=1, cin=layer.in_channels, cout=hidden, size=s_in, depthwise=False))
    ops.append(dict(kernel=cand.kernel, cin=hidden, cout=hidden, size=s_out, depthwise=True))
    ops.append(dict(kernel=1, cin=hidden, cout=layer.out_channels, size=s_out, depthwise=False))
    return ops


def flops_of_candidate(cand: CandidateSpec | str, layer: LayerSpec) -> int:
    if isinstance(cand, str):
        cand = CandidateSpec.parse(cand)
    if layer.in_size < 1:
        raise ValueError(f"layer {layer.index}: unresolved input size")
    return sum(conv_macs(o["kernel"], o["cin"], o["cout"], o["size"], o["size"], o["depthwise"])
               for o in candidate_ops(cand, layer))


def _weighted_macs(cand: CandidateSpec, layer: LayerSpec, profile: HardwareProfile) -> float:
    total = 0.0
    for o in candidate_ops(cand, layer):
        macs = conv_macs(o["kernel"], o["cin"], o["cout"], o["size"], o["size"], o["depthwise"])
        if o["depthwise"] and o["kernel"] >= 5:
            macs *= profile.large_kernel_factor
        total += macs
    return total


@dataclass
class LatencyTable:
    hardware_tag: str
    batch_size: int
    entries: dict[tuple[int, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, ms in self.entries.items():
            if not np.isfinite(ms) or ms < 0:
                raise ValueError(f"latency entry {key} must be a finite non-negative number, got {ms}")

    def lookup(self, layer: int, candidate: str) -> float:
        try:
            return self.entries[(layer, candidate)]
        except KeyError:
            raise KeyError(f"latency table {self.hardware_tag!r} has no entry for "
                           f"(layer={layer}, candidate={candidate!r})") from None

    def vector(self, layer: LayerSpec) -> np.ndarray:
        return np.array([self.lookup(layer.index, c) for c in layer.candidate_ids()])

    def missing(self, space: SearchSpace) -> list[tuple[int, str]]:
        return [(l.index, c) for l in space.layers for c in l.candidate_ids() if (l.index, c) not in self.entries]

    def validate(self, space: SearchSpace) -> None:
        miss = self.missing(space)
        if miss:
            raise ValueError(f"latency table {self.hardware_tag!r} is missing entries {miss}")

    def scaled(self, factor: float) -> "LatencyTable":
        return LatencyTable(self.hardware_tag, self.batch_size,
                            {k: v * factor for k, v in self.entries.items()})


def synth_latency_table(profile: HardwareProfile, space: SearchSpace) -> LatencyTable:
    entries = {}
    for layer in space.layers:
        for cand in layer.candidates:
            macs = _weighted_macs(cand, layer, profile)
            entries[(layer.index, cand.id)] = profile.batch_size * macs / profile.throughput + profile.overhead_ms
    return LatencyTable(profile.tag, profile.batch_size, entries)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def save_latency_table(table: LatencyTable, path) -> None:
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "candidate", "ms"])
    for (layer, cand), ms in sorted(table.entries.items()):
        writer.writerow([layer, cand, repr(float(ms))])
    path.write_text(buf.getvalue(), encoding="utf-8")
    meta = {"hardware_tag": table.hardware_tag, "batch_size": table.batch_size}
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_latency_table(path, space: SearchSpace | None = None) -> LatencyTable:
    """Read a table; with ``space`` given, every (layer, candidate) must be present."""
    path = Path(path)
    meta = json.loads(_meta_path(path).read_text(encoding="utf-8"))
    entries = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["layer", "candidate", "ms"]:
            raise ValueError(f"{path}: header must be layer,candidate,ms; got {reader.fieldnames}")
        for row in reader:
            key = (int(row["layer"]), row["candidate"])
            if key in entries:
                raise ValueError(f"{path}: duplicate entry {key}")
            ms = float(row["ms"])
            if ms < 0:
                raise ValueError(f"{path}: negative latency for {key}")
            entries[key] = ms
    table = LatencyTable(meta["hardware_tag"], int(meta["batch_size"]), entries)
    if space is not None:
        table.validate(space)
    return table


# -- whole-network accounting -------------------------------------------------


def stem_head_macs(space: SearchSpace) -> int:
    s = space.stem_size
    stem = conv_macs(3, space.in_channels, space.stem_channels, s, s)
    head = space.out_channels * space.num_classes
    return stem + head


def arch_flops(arch) -> int:
    """Multiply-adds of a derived network: stem, kept candidates and classifier."""
    return stem_head_macs(arch.space) + sum(
        flops_of_candidate(arch.candidate(i), layer) for i, layer in enumerate(arch.space.layers))


def arch_latency(arch, table: LatencyTable) -> float:
    return float(sum(table.lookup(layer.index, arch.candidate(layer.index).id) for layer in arch.space.layers))


def supernet_expected_latency(probs, space: SearchSpace, table: LatencyTable) -> float:
    return float(sum(np.dot(p, table.vector(layer)) for p, layer in zip(probs, space.layers)))
