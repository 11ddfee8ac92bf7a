"""Declarative description of the searchable layer stack."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

DEFAULT_CANDIDATES = ("mbconv_e3_k3", "mbconv_e3_k5", "mbconv_e6_k3", "identity", "zero")


@dataclass(frozen=True)
class CandidateSpec:
    kind: str  # "mbconv" | "identity" | "zero"
    expansion: int = 0
    kernel: int = 0

    def __post_init__(self):
        if self.kind == "mbconv":
            if self.expansion not in (1, 3, 6) or self.kernel not in (3, 5):
                raise ValueError(f"unsupported mbconv e={self.expansion} k={self.kernel}")
        elif self.kind not in ("identity", "zero"):
            raise ValueError(f"unknown candidate kind {self.kind!r}")

    @property
    def id(self) -> str:
        if self.kind == "mbconv":
            return f"mbconv_e{self.expansion}_k{self.kernel}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "CandidateSpec":
        if text in ("identity", "zero"):
            return cls(text)
        try:
            kind, e, k = text.split("_")
            assert kind == "mbconv" and e[0] == "e" and k[0] == "k"
            return cls("mbconv", int(e[1:]), int(k[1:]))
        except (ValueError, AssertionError):
            raise ValueError(f"cannot parse candidate id {text!r}") from None


@dataclass(frozen=True)
class LayerSpec:
    index: int
    in_channels: int
    out_channels: int
    stride: int
    in_size: int
    candidates: tuple[CandidateSpec, ...]

    @property
    def out_size(self) -> int:
        return (self.in_size - 1) // self.stride + 1

    @property
    def shape_preserving(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels

    def candidate_ids(self) -> list[str]:
        return [c.id for c in self.candidates]


@dataclass(frozen=True)
class SearchSpace:
    in_channels: int
    image_size: int
    num_classes: int
    stem_channels: int
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)
    stem_stride: int = 1

    @property
    def stem_size(self) -> int:
        return (self.image_size - 1) // self.stem_stride + 1

    def __post_init__(self):
        if self.stem_stride not in (1, 2):
            raise ValueError("stem stride must be 1 or 2")
        prev_c, prev_s = self.stem_channels, self.stem_size
        for i, layer in enumerate(self.layers):
            if layer.index != i:
                raise ValueError(f"layer {i} has index {layer.index}")
            if layer.in_channels != prev_c or layer.in_size != prev_s:
                raise ValueError(f"layer {i} input ({layer.in_channels}ch, {layer.in_size}px) "
                                 f"does not match previous output ({prev_c}ch, {prev_s}px)")
            if len(layer.candidates) < 2:
                raise ValueError(f"layer {i} needs at least two candidates")
            ids = layer.candidate_ids()
            if len(set(ids)) != len(ids):
                raise ValueError(f"layer {i} has duplicate candidates {ids}")
            if "identity" in ids and not layer.shape_preserving:
                raise ValueError(f"layer {i}: identity is illegal on a shape-changing layer")
            prev_c, prev_s = layer.out_channels, layer.out_size

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels if self.layers else self.stem_channels

    @property
    def downsample_layers(self) -> list[int]:
        return [layer.index for layer in self.layers if layer.stride == 2]

    @classmethod
    def build(
        cls,
        *,
        in_channels: int,
        image_size: int,
        num_classes: int,
        stem_channels: int,
        widths: list[int],
        strides: list[int],
        candidates: list[str] | tuple[str, ...] = DEFAULT_CANDIDATES,
        zero_on_downsample: bool = False,
        stem_stride: int = 1,
    ) -> "SearchSpace":
        """Assemble layers; identity is dropped from shape-changing layers,
        and zero as well unless ``zero_on_downsample``."""
        if len(widths) != len(strides):
            raise ValueError("widths and strides must have equal length")
        cands = tuple(CandidateSpec.parse(c) for c in candidates)
        layers = []
        c_in, size = stem_channels, (image_size - 1) // stem_stride + 1
        for i, (c_out, s) in enumerate(zip(widths, strides)):
            preserving = s == 1 and c_in == c_out
            keep = tuple(
                c for c in cands
                if preserving or (c.kind == "mbconv" or (c.kind == "zero" and zero_on_downsample))
            )
            layer = LayerSpec(i, c_in, c_out, s, size, keep)
            layers.append(layer)
            c_in, size = c_out, layer.out_size
        return cls(in_channels, image_size, num_classes, stem_channels, tuple(layers), stem_stride)

    def to_dict(self) -> dict:
        d = asdict(self)
        for layer in d["layers"]:
            layer["candidates"] = [CandidateSpec(**c).id for c in layer["candidates"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        layers = tuple(
            LayerSpec(
                index=l["index"],
                in_channels=l["in_channels"],
                out_channels=l["out_channels"],
                stride=l["stride"],
                in_size=l["in_size"],
                candidates=tuple(CandidateSpec.parse(c) for c in l["candidates"]),
            )
            for l in d["layers"]
        )
        return cls(d["in_channels"], d["image_size"], d["num_classes"], d["stem_channels"], layers,
                   d.get("stem_stride", 1))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
