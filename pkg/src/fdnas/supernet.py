"""Gated SuperNet: mixed layers, binary-gate sampling and architecture updates.

Each searchable layer holds N operation candidates and a vector of
architecture logits ``alpha``; candidate probabilities are the softmax of
``alpha``. Weight steps run one sampled path per layer. Architecture steps
sample two candidates per layer, back-propagate to their gates, turn gate
gradients into logit gradients over the sampled pair, and rescale the pair
so the probability mass of the unsampled candidates is untouched.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Parameter, Tensor, adam_step
from .nn import Block, ConvBN, Head, Network, make_candidate
from .search_space import LayerSpec, SearchSpace

SIMPLEX_TOL = 1e-9


def logsumexp(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    m = float(np.max(a))
    return m + float(np.log(np.sum(np.exp(a - m))))


# -- probabilities and sampling --------------------------------------------


def compute_probs(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.all(np.isfinite(alpha)):
        raise ValueError(f"architecture parameters must be finite, got {alpha}")
    z = np.exp(alpha - alpha.max())
    return z / z.sum()


def _check_simplex(p: np.ndarray) -> None:
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probability vector must be 1-d and nonempty")
    if np.any(p < -SIMPLEX_TOL) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"probabilities off the simplex: sum={p.sum()!r}, min={p.min()!r}")


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(np.clip(p, 0.0, None))
    n = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(n, p.size - 1)


def sample_gate(p, rng: np.random.Generator) -> np.ndarray:
    """One-hot gate with index n drawn with probability p[n]."""
    p = np.asarray(p, dtype=np.float64)
    _check_simplex(p)
    gate = np.zeros(p.size)
    gate[_draw(p, rng)] = 1.0
    return gate


@dataclass(frozen=True)
class PairSample:
    i: int
    j: int
    q: np.ndarray  # (p_i, p_j) / (p_i + p_j)
    step: int = 0

    def __iter__(self):
        return iter((self.i, self.j, self.q))


def sample_active_pair(p, rng: np.random.Generator, step: int = 0) -> PairSample:
    """Two distinct candidates drawn without replacement proportionally to p.

    The pair is returned in ascending index order with its renormalised
    two-way distribution ``q``.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.size < 2:
        raise ValueError("pair sampling needs at least two candidates")
    _check_simplex(p)
    first = _draw(p, rng)
    rest = p.copy()
    rest[first] = 0.0
    if rest.sum() <= 0.0:
        rest = np.ones_like(p)
        rest[first] = 0.0
    second = _draw(rest / rest.sum(), rng)
    i, j = sorted((first, second))
    pair_p = np.array([p[i], p[j]])
    return PairSample(i, j, pair_p / pair_p.sum(), step)


# -- architecture gradient and updates -------------------------------------


def arch_gradient(dL_db, p) -> np.ndarray:
    """dL/dalpha_n = sum_m dL/db_m * p_m * (delta_nm - p_n)."""
    g = np.asarray(dL_db, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError(f"length mismatch: dL/db {g.shape} vs p {p.shape}")
    _check_simplex(p)
    return p * (g - np.dot(g, p))


class MixedLayer(Block):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.index = spec.index
        self.stride = spec.stride
        self.candidates: list[Block] = []
        for cand in spec.candidates:
            block = make_candidate(f"layers.{spec.index}.{cand.id}", cand, spec, rng)
            self.candidates.append(block)
            self.params.update(block.params)
        self.alpha = self._param(f"layers.{spec.index}.alpha", np.zeros(len(spec.candidates)), trainable=False)
        self.arch_steps = 0

    @property
    def n(self) -> int:
        return len(self.candidates)

    def probs(self) -> np.ndarray:
        return compute_probs(self.alpha.data)


def rescale_alphas(layer: MixedLayer, pair, pre_update_pair_mass: float, mode: str = "pair") -> bool:
    """Shift the sampled pair's logits by one constant so their joint
    probability equals ``pre_update_pair_mass``.

    The other logits are untouched, so ratios among the unsampled
    probabilities are preserved. ``mode="global"`` instead subtracts the
    logsumexp from every logit, which leaves p unchanged. Returns True when
    the target mass was degenerate and had to be clamped.
    """
    a = layer.alpha.data
    if mode == "global":
        a -= logsumexp(a)
        return False
    if mode != "pair":
        raise ValueError(f"unknown rescale mode {mode!r}")
    i, j = int(pair[0]), int(pair[1])
    others = np.ones(a.size, dtype=bool)
    others[[i, j]] = False
    if not others.any():
        # Two candidates only: any common shift leaves p unchanged.
        return False
    m = float(pre_update_pair_mass)
    clamped = not (1e-6 <= m <= 1.0 - 1e-6)
    if clamped:
        m = min(max(m, 1e-6), 1.0 - 1e-6)
    shift = np.log(m) - np.log1p(-m) + logsumexp(a[others]) - logsumexp(a[[i, j]])
    a[i] += shift
    a[j] += shift
    return clamped


def pair_arch_step(
    layer: MixedLayer,
    dL_db_pair,
    pair: PairSample,
    adam_state: OptimizerState,
    lr: float | None = None,
    rescale: str = "pair",
) -> np.ndarray:
    """Adam update of the two sampled logits from their gate gradients."""
    if pair.step != layer.arch_steps:
        raise ValueError(f"stale pair for layer {layer.index}: sampled at step {pair.step}, "
                         f"layer is at step {layer.arch_steps}")
    g2 = np.asarray(dL_db_pair, dtype=np.float64)
    if g2.shape != (2,):
        raise ValueError("dL_db_pair must have two entries")
    i, j = pair.i, pair.j
    before = layer.alpha.data.copy()
    mass = float(compute_probs(before)[[i, j]].sum())
    grad = np.zeros(layer.n)
    grad[[i, j]] = arch_gradient(g2, pair.q)
    mask = np.zeros(layer.n, dtype=bool)
    mask[[i, j]] = True
    pid = layer.alpha.name
    adam_step({pid: layer.alpha}, {pid: grad}, adam_state, masks={pid: mask}, lr=lr)
    if not np.array_equal(before[[i, j]], layer.alpha.data[[i, j]]):
        rescale_alphas(layer, (i, j), mass, mode=rescale)
    layer.arch_steps += 1
    return layer.alpha.data


# -- latency-aware loss ------------------------------------------------------


def expected_layer_latency(p, F) -> float:
    p = np.asarray(p, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if p.shape != F.shape:
        raise ValueError(f"latency vector {F.shape} does not match probabilities {p.shape}")
    return float(np.dot(p, F))


def latency_alpha_grad(p, F, lambda2: float) -> np.ndarray:
    """Exact gradient of lambda2 * sum_n p_n(alpha) F_n with respect to alpha."""
    return arch_gradient(lambda2 * np.asarray(F, dtype=np.float64), p)


def loss_terms(ce: float, params, layer_latencies, lambda1: float, lambda2: float) -> dict[str, float]:
    if ce < 0:
        raise ValueError(f"cross-entropy must be non-negative, got {ce}")
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("regularisation weights must be non-negative")
    values = params.values() if isinstance(params, dict) else params
    wreg = float(sum(np.vdot(p.data, p.data) for p in values)) if lambda1 else 0.0
    lat = float(np.sum(layer_latencies))
    return {
        "ce": float(ce),
        "weight_reg": lambda1 * wreg,
        "latency": lambda2 * lat,
        "total": float(ce) + lambda1 * wreg + lambda2 * lat,
    }


def total_loss(ce: float, params, layer_latencies, lambda1: float, lambda2: float) -> float:
    """ce + lambda1 * sum ||w||^2 + lambda2 * sum of expected layer latencies."""
    return loss_terms(ce, params, layer_latencies, lambda1, lambda2)["total"]


# -- the network -------------------------------------------------------------


@dataclass
class GateSample:
    layer_index: int
    active: tuple[int, ...]
    mask: np.ndarray
    gates: dict[int, Tensor] = field(default_factory=dict)
    pair: PairSample | None = None

    def gate_grads(self) -> np.ndarray:
        """dL/db for the sampled candidates, in ``active`` order."""
        return np.array([
            0.0 if self.gates[n].grad is None else float(self.gates[n].grad.reshape(-1)[0])
            for n in self.active
        ])


class SuperNet(Network):
    def __init__(self, space: SearchSpace, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.space = space
        self.stem = ConvBN("stem", space.in_channels, space.stem_channels, 3, space.stem_stride, rng)
        self.layers = [MixedLayer(spec, rng) for spec in space.layers]
        self.head = Head("head", space.out_channels, space.num_classes, rng)
        self._params: dict[str, Parameter] = {}
        for block in (self.stem, *self.layers, self.head):
            self._params.update(block.params)
        self.activation_counts = [0] * len(self.layers)

    def parameters(self) -> dict[str, Parameter]:
        return self._params

    def arch_parameters(self) -> dict[str, Parameter]:
        return {layer.alpha.name: layer.alpha for layer in self.layers}

    def alphas(self) -> list[np.ndarray]:
        return [layer.alpha.data.copy() for layer in self.layers]

    def probs(self) -> list[np.ndarray]:
        return [layer.probs() for layer in self.layers]

    def _run(self, layer: MixedLayer, n: int, x, training, update_stats):
        self.activation_counts[layer.index] += 1
        try:
            return layer.candidates[n].forward(x, training, update_stats)
        except ad.ShapeError as err:
            raise ad.ShapeError(f"layer {layer.index}: {err}") from err

    def forward_path(self, x, choices, training=False, update_stats=False) -> Tensor:
        """Run a fixed candidate per layer."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.activation_counts = [0] * len(self.layers)
        h = self.stem.forward(x, training, update_stats)
        for layer, n in zip(self.layers, choices):
            h = self._run(layer, int(n), h, training, update_stats)
        return self.head.forward(h, training, update_stats)


def forward_train(
    net: SuperNet,
    batch,
    rng: np.random.Generator,
    mode: str = "weight_step",
    update_stats: bool | None = None,
) -> tuple[Tensor, list[GateSample]]:
    """Sampled forward pass.

    ``weight_step`` executes one candidate per layer; ``arch_step`` executes
    the two candidates of a sampled pair, combined through gate tensors that
    carry dL/db after backward. Batch-norm running statistics are only
    updated on weight steps by default.
    """
    if mode not in ("weight_step", "arch_step"):
        raise ValueError(f"unknown mode {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if update_stats is None:
        update_stats = mode == "weight_step"
    net.activation_counts = [0] * len(net.layers)
    h = net.stem.forward(x, True, update_stats)
    samples = []
    for layer in net.layers:
        p = layer.probs()
        mask = np.zeros(layer.n, dtype=bool)
        if mode == "weight_step":
            n = int(np.argmax(sample_gate(p, rng)))
            mask[n] = True
            h = net._run(layer, n, h, True, update_stats)
            samples.append(GateSample(layer.index, (n,), mask))
        else:
            pair = sample_active_pair(p, rng, step=layer.arch_steps)
            on_first = rng.random() < pair.q[0]
            gates = {
                pair.i: Tensor(np.array([1.0 if on_first else 0.0]), requires_grad=True),
                pair.j: Tensor(np.array([0.0 if on_first else 1.0]), requires_grad=True),
            }
            mask[[pair.i, pair.j]] = True
            out_i = net._run(layer, pair.i, h, True, update_stats)
            out_j = net._run(layer, pair.j, h, True, update_stats)
            h = ad.add(ad.scale(out_i, gates[pair.i]), ad.scale(out_j, gates[pair.j]))
            samples.append(GateSample(layer.index, (pair.i, pair.j), mask, gates, pair))
    return net.head.forward(h, True, update_stats), samples


def forward_mixed(net: SuperNet, batch, probs=None, training: bool = True) -> tuple[Tensor, list[list[Tensor]]]:
    """Every candidate runs; layer output is sum_n p_n * o_n(x).

    Gate tensors hold p_n and collect dL/db_n. Test-scale oracle only.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    net.activation_counts = [0] * len(net.layers)
    h = net.stem.forward(x, training, False)
    all_gates = []
    for k, layer in enumerate(net.layers):
        p = layer.probs() if probs is None else np.asarray(probs[k], dtype=np.float64)
        gates = [Tensor(np.array([p[n]]), requires_grad=True) for n in range(layer.n)]
        acc = None
        for n in range(layer.n):
            term = ad.scale(net._run(layer, n, h, training, False), gates[n])
            acc = term if acc is None else ad.add(acc, term)
        h = acc
        all_gates.append(gates)
    return net.head.forward(h, training, False), all_gates


# -- derivation ----------------------------------------------------------------


def alpha_hash(alphas) -> str:
    h = hashlib.sha256()
    for a in alphas:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


@dataclass
class DerivedArchitecture:
    space: SearchSpace
    choices: tuple[int, ...]
    provenance: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.choices = tuple(int(c) for c in self.choices)
        if len(self.choices) != self.space.num_layers:
            raise ValueError("one choice per layer required")
        for layer, c in zip(self.space.layers, self.choices):
            if not 0 <= c < len(layer.candidates):
                raise ValueError(f"layer {layer.index}: choice {c} out of range")
            if layer.candidates[c].kind == "identity" and not layer.shape_preserving:
                raise ValueError(f"layer {layer.index}: identity chosen on a shape-changing layer")

    def candidate(self, index: int):
        return self.space.layers[index].candidates[self.choices[index]]

    def layer_records(self) -> list[dict]:
        out = []
        for layer, c in zip(self.space.layers, self.choices):
            cand = layer.candidates[c]
            out.append({
                "layer_index": layer.index,
                "candidate": cand.id,
                "kind": cand.kind,
                "expansion": cand.expansion,
                "kernel": cand.kernel,
                "stride": layer.stride,
                "channels": [layer.in_channels, layer.out_channels],
            })
        return out

    def to_json(self) -> str:
        doc = {
            "format": "fdnas-architecture",
            "version": 1,
            "search_space": self.space.to_dict(),
            "search_space_hash": self.space.hash(),
            "layers": self.layer_records(),
            "choices": list(self.choices),
            "provenance": self.provenance,
            "flags": self.flags,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DerivedArchitecture":
        doc = json.loads(text)
        if doc.get("format") != "fdnas-architecture":
            raise ValueError("not an architecture document")
        space = SearchSpace.from_dict(doc["search_space"])
        if space.hash() != doc["search_space_hash"]:
            raise ValueError("architecture search-space hash does not match its embedded search space")
        return cls(space, tuple(doc["choices"]), doc.get("provenance", {}), list(doc.get("flags", [])))

    def summary(self) -> list[str]:
        return [self.candidate(i).id for i in range(len(self.choices))]


def derive_normal_net(net: SuperNet, checkpoint_id: str = "") -> DerivedArchitecture:
    """Keep the highest-probability candidate per layer (ties -> lowest index).

    Every layer sits on the network's only path, so a winning ``zero``
    would disconnect the net; it is replaced by the runner-up and flagged.
    """
    choices, flags = [], []
    alphas = net.alphas()
    for layer, a in zip(net.layers, alphas):
        if not np.all(np.isfinite(a)):
            raise ValueError(f"layer {layer.index}: non-finite alpha")
        c = int(np.argmax(a))
        if layer.spec.candidates[c].kind == "zero":
            rest = a.copy()
            rest[c] = -np.inf
            runner = int(np.argmax(rest))
            flags.append(f"layer {layer.index}: zero won, replaced by {layer.spec.candidates[runner].id}")
            c = runner
        choices.append(c)
    prov = {"checkpoint": checkpoint_id, "alpha_hash": alpha_hash(alphas)}
    return DerivedArchitecture(net.space, tuple(choices), prov, flags)


class CompactNet(Network):
    """The standalone network of a derived architecture.

    Parameter ids match the SuperNet's ids for the kept candidates, so
    weights can be copied across by id.
    """

    def __init__(self, arch: DerivedArchitecture, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        space = arch.space
        self.arch = arch
        self.space = space
        self.stem = ConvBN("stem", space.in_channels, space.stem_channels, 3, space.stem_stride, rng)
        self.blocks = [
            make_candidate(f"layers.{layer.index}.{layer.candidates[c].id}", layer.candidates[c], layer, rng)
            for layer, c in zip(space.layers, arch.choices)
        ]
        self.head = Head("head", space.out_channels, space.num_classes, rng)
        self._params: dict[str, Parameter] = {}
        for block in (self.stem, *self.blocks, self.head):
            self._params.update(block.params)

    def parameters(self) -> dict[str, Parameter]:
        return self._params

    def forward(self, x, training=False, update_stats=False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = self.stem.forward(x, training, update_stats)
        for block in self.blocks:
            h = block.forward(h, training, update_stats)
        return self.head.forward(h, training, update_stats)


def extract_compact_net(net: SuperNet, arch: DerivedArchitecture) -> CompactNet:
    """Compact network carrying the SuperNet's weights for the chosen candidates."""
    if arch.space.hash() != net.space.hash():
        raise ValueError(f"architecture search space {arch.space.hash()} does not match "
                         f"SuperNet search space {net.space.hash()}")
    compact = CompactNet(arch, 0)
    state = net.state_dict()
    compact.load_state_dict({k: state[k] for k in compact.parameters()})
    return compact
