"""Federated search protocol: device updates, weighted aggregation, round loop,
tag clustering with per-cluster adaptation, FedAvg fine-tuning, evaluation.

All randomness comes from named streams derived from one root seed, so a
device's draws depend only on (root seed, phase, salt, device key, epoch) and
never on thread scheduling or on which other devices took part in a round.
"""

from __future__ import annotations

import copy
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, cosine_lr, sgd_momentum_step
from .checkpoint import Checkpoint
from .data import Dataset, DevicePartition
from .latency import LatencyTable, supernet_expected_latency
from .search_space import SearchSpace
from .supernet import (CompactNet, DerivedArchitecture, SuperNet, compute_probs, derive_normal_net,
                       forward_train, pair_arch_step)

_PHASES = {"init": 1, "device": 2, "online": 3, "finetune_init": 4, "finetune": 5, "eval": 6}


def stream(root_seed: int, phase: str, *keys: int) -> np.random.Generator:
    """Independent generator for one named purpose."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), _PHASES[phase], *map(int, keys)]))


# -- settings and state --------------------------------------------------------


@dataclass
class LocalSettings:
    epochs: int = 5
    batch_size: int = 32
    lr_w: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4
    lr_alpha: float = 0.006
    betas: tuple[float, float] = (0.0, 0.999)
    eps: float = 1e-8
    lambda2: float = 0.0
    interleave: str = "per_epoch"
    rescale: str = "pair"
    total_epochs: int = 1  # horizon of the cosine schedule, in local epochs
    root_seed: int = 0
    salt: int = 0  # separates the streams of independent runs sharing a root seed

    @classmethod
    def from_config(cls, cfg, rounds: int | None = None, lambda2: float | None = None, salt: int = 0):
        rounds = cfg.federation.rounds if rounds is None else rounds
        e = cfg.federation.local_epochs
        return cls(
            epochs=e, batch_size=cfg.optim.batch_size, lr_w=cfg.optim.lr_w, momentum=cfg.optim.momentum,
            weight_decay=2.0 * cfg.loss.lambda1, lr_alpha=cfg.optim.lr_alpha, betas=tuple(cfg.optim.betas),
            eps=cfg.optim.eps, lambda2=cfg.loss.lambda2 if lambda2 is None else lambda2,
            interleave=cfg.optim.interleave, rescale=cfg.optim.rescale,
            total_epochs=max(1, rounds * e), root_seed=cfg.seed, salt=salt)

    def weight_optimizer(self) -> OptimizerState:
        return OptimizerState("sgd_momentum", self.lr_w, momentum=self.momentum, weight_decay=self.weight_decay)

    def arch_optimizer(self) -> OptimizerState:
        return OptimizerState("adam", self.lr_alpha, betas=tuple(self.betas), eps=self.eps, group="arch")


@dataclass
class DeviceState:
    device_id: int
    partition: DevicePartition
    hardware_tag: str
    net: SuperNet | CompactNet
    w_opt: OptimizerState
    a_opt: OptimizerState | None = None
    seed_key: int | None = None

    def __post_init__(self):
        if self.seed_key is None:
            self.seed_key = self.device_id
        if self.partition.num_train == 0:
            raise ValueError(f"device {self.device_id} has no training samples")

    @property
    def data_tag(self) -> str:
        return self.partition.tag

    @property
    def n_k(self) -> int:
        return self.partition.num_train

    def tag(self, key: str) -> str:
        return self.hardware_tag if key == "hardware" else self.data_tag


@dataclass
class DeviceResult:
    device_id: int
    n_k: int
    state: dict | None
    train_loss: float = math.nan
    val_loss: float = math.nan
    ok: bool = True
    error: str = ""


@dataclass
class RoundReport:
    round: int
    participants: list[int]
    train_loss: dict
    val_loss: dict
    sizes: dict
    normalizer: int
    expected_latency_ms: float
    reg_loss: float
    failed: list[int] = field(default_factory=list)
    wall_s: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("train_loss", "val_loss", "sizes"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d

    def metrics(self) -> dict:
        """Everything except wall time; deterministic for a fixed seed."""
        d = self.to_dict()
        d.pop("wall_s")
        return d


@dataclass
class ServerState:
    space: SearchSpace
    global_state: dict
    round: int = 0
    history: list[RoundReport] = field(default_factory=list)

    def probs(self) -> list[np.ndarray]:
        return [compute_probs(self.global_state[f"layers.{l.index}.alpha"]) for l in self.space.layers]

    def to_net(self) -> SuperNet:
        net = SuperNet(self.space, 0)
        net.load_state_dict(self.global_state)
        return net


@dataclass
class ClusterPlan:
    clusters: dict[str, list[int]]
    lambda2: dict[str, float] = field(default_factory=dict)
    tables: dict[str, LatencyTable] = field(default_factory=dict)

    def __post_init__(self):
        seen = {}
        for tag, ids in self.clusters.items():
            for d in ids:
                if d in seen:
                    raise ValueError(f"device {d} is in clusters {seen[d]!r} and {tag!r}")
                seen[d] = tag


def init_server(space: SearchSpace, root_seed: int) -> ServerState:
    net = SuperNet(space, stream(root_seed, "init", 0))
    return ServerState(space, net.state_dict())


def make_devices(space: SearchSpace, partitions: list[DevicePartition], hardware_tags: list[str],
                 settings: LocalSettings, identical_seeds: bool = False) -> list[DeviceState]:
    """One SuperNet replica per device; weights arrive with the first global broadcast."""
    devices = []
    for part, hw in zip(partitions, hardware_tags):
        devices.append(DeviceState(part.device_id, part, hw, SuperNet(space, 0), settings.weight_optimizer(),
                                   settings.arch_optimizer(), 0 if identical_seeds else part.device_id))
    return devices


# -- local training -------------------------------------------------------------


def _batches(idx: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = idx[rng.permutation(idx.size)]
    return [order[s:s + batch_size] for s in range(0, order.size, batch_size)]


def _active_params(net: SuperNet, samples) -> dict:
    """Stem, head and the sampled candidate of every layer; nothing else moves."""
    prefixes = tuple(f"layers.{s.layer_index}.{net.layers[s.layer_index].spec.candidates[s.active[0]].id}."
                     for s in samples)
    return {k: p for k, p in net.trainable().items()
            if not k.startswith("layers.") or k.startswith(prefixes)}


def weight_step(net: SuperNet, x, y, rng, opt: OptimizerState, lr: float) -> float:
    with ad.Tape() as tape:
        logits, samples = forward_train(net, x, rng, "weight_step")
        loss = ad.cross_entropy(logits, y)
    params = _active_params(net, samples)
    grads = ad.backward(tape, loss, params.values())
    sgd_momentum_step(params, grads, opt, lr=lr)
    return loss.item()


def arch_step(net: SuperNet, x, y, rng, opt: OptimizerState, latency: list | None, lambda2: float,
              rescale: str = "pair") -> float:
    """Pair-sampled gate gradients, plus lambda2 * F on the sampled pair, drive Adam on alpha."""
    with net.frozen(), ad.Tape() as tape:
        logits, samples = forward_train(net, x, rng, "arch_step")
        loss = ad.cross_entropy(logits, y)
        ad.backward(tape, loss, ())
    for s in samples:
        g = s.gate_grads()
        if latency is not None and lambda2:
            g = g + lambda2 * latency[s.layer_index][list(s.active)]
        pair_arch_step(net.layers[s.layer_index], g, s.pair, opt, rescale=rescale)
    return loss.item()


def _check_loss(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what} loss")
    return value


def local_search_epochs(device: DeviceState, dataset: Dataset, s: LocalSettings, latency: list | None,
                        epoch_start: int, epochs: int) -> tuple[float, float]:
    """ProxylessNAS-style epochs on one device; returns mean train and val cross-entropy."""
    part, net = device.partition, device.net
    if part.train.size == 0 or part.val.size == 0:
        raise ValueError(f"device {device.device_id}: empty train or validation loader")
    tr_sum = tr_n = va_sum = va_n = 0.0
    for e in range(epochs):
        g = epoch_start + e
        rng = stream(s.root_seed, "device", s.salt, device.seed_key, g)
        lr = cosine_lr(min(g, s.total_epochs), s.total_epochs, s.lr_w)
        tb = _batches(part.train, s.batch_size, rng)
        vb = _batches(part.val, s.batch_size, rng)
        if s.interleave == "per_epoch":
            plan = [("w", b) for b in tb] + [("a", b) for b in vb]
        else:
            plan = [step for k, b in enumerate(tb) for step in (("w", b), ("a", vb[k % len(vb)]))]
        for kind, b in plan:
            x, y = dataset.features[b], dataset.labels[b]
            if kind == "w":
                loss = _check_loss(weight_step(net, x, y, rng, device.w_opt, lr), "train")
                tr_sum, tr_n = tr_sum + loss * b.size, tr_n + b.size
            else:
                loss = _check_loss(arch_step(net, x, y, rng, device.a_opt, latency, s.lambda2, s.rescale), "val")
                va_sum, va_n = va_sum + loss * b.size, va_n + b.size
    return tr_sum / max(tr_n, 1), va_sum / max(va_n, 1)


def _latency_vectors(space: SearchSpace, table: LatencyTable | None) -> list | None:
    return None if table is None else [table.vector(layer) for layer in space.layers]


def device_update(global_state: dict, device: DeviceState, dataset: Dataset, settings: LocalSettings,
                  table: LatencyTable | None, round_index: int) -> DeviceResult:
    """Load the globals, run E local epochs, return the local parameters.

    A non-finite loss or gradient aborts this device for the round.
    """
    if settings.epochs < 1:
        raise ValueError("local epochs must be at least 1")
    device.net.load_state_dict(global_state)
    try:
        tr, va = local_search_epochs(device, dataset, settings, _latency_vectors(device.net.space, table),
                                     round_index * settings.epochs, settings.epochs)
    except FloatingPointError as err:
        return DeviceResult(device.device_id, device.n_k, None, ok=False, error=str(err))
    return DeviceResult(device.device_id, device.n_k, device.net.state_dict(), tr, va)


def run_proxyless(device: DeviceState, dataset: Dataset, settings: LocalSettings, table: LatencyTable | None,
                  epochs: int) -> tuple[float, float]:
    """Centralised reference: ``epochs`` local epochs on one device, no server."""
    return local_search_epochs(device, dataset, settings, _latency_vectors(device.net.space, table), 0, epochs)


# -- server side ----------------------------------------------------------------


def aggregation_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes <= 0):
        raise ValueError("aggregation needs at least one participant with positive size")
    return sizes / sizes.sum()


def aggregate(updates: list[tuple[dict, int]]) -> dict:
    """Size-weighted mean of parameter maps.

    Computed as ref + sum_k w_k (u_k - ref) with ref the elementwise minimum
    and the weighted terms summed in sorted order, so the result does not
    depend on the order of ``updates`` and K identical inputs return that
    input exactly.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    keys = set(updates[0][0])
    for state, _ in updates[1:]:
        if set(state) != keys:
            raise ValueError(f"parameter id sets differ: {sorted(keys ^ set(state))}")
    w = aggregation_weights([n for _, n in updates])
    out = {}
    for key in sorted(keys):
        stack = np.stack([np.asarray(state[key], dtype=np.float64) for state, _ in updates])
        ref = stack.min(axis=0)
        terms = np.sort((stack - ref) * w.reshape((-1,) + (1,) * ref.ndim), axis=0)
        acc = np.zeros_like(ref)
        for t in terms:
            acc += t
        out[key] = ref + acc
    return out


def sample_online(device_ids, policy, rng: np.random.Generator) -> list[int]:
    """``policy``: "all", ("fraction", f) or ("fixed", m); anything with ``kind``/``value`` also works."""
    ids = sorted(int(d) for d in device_ids)
    kind, value = (policy, None) if isinstance(policy, str) else (
        (policy.kind, policy.value) if hasattr(policy, "kind") else tuple(policy))
    if kind == "all":
        return ids
    if kind == "fraction":
        if not 0 < value <= 1:
            raise ValueError(f"online fraction must be in (0, 1], got {value}")
        m = max(1, int(round(value * len(ids))))
    elif kind == "fixed":
        m = int(value)
        if m > len(ids):
            raise ValueError(f"cannot sample {m} online devices out of {len(ids)}")
        if m < 1:
            raise ValueError("at least one device must be online")
    else:
        raise ValueError(f"unknown online policy {kind!r}")
    return sorted(int(d) for d in rng.choice(ids, size=m, replace=False))


def _map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def run_fdnas(server: ServerState, devices: list[DeviceState], dataset: Dataset, settings: LocalSettings,
              table: LatencyTable | None, rounds: int, online="all", until: int | None = None,
              workers: int = 1, on_round=None) -> ServerState:
    """Rounds of sample -> device updates -> aggregate, from ``server.round`` up to ``rounds``.

    ``until`` stops early without changing the schedule horizon.
    """
    end = rounds if until is None else min(until, rounds)
    by_id = {d.device_id: d for d in devices}
    while server.round < end:
        t = server.round
        start = time.perf_counter()
        ids = sample_online(by_id, online, stream(settings.root_seed, "online", settings.salt, t))
        results = _map(lambda d: device_update(server.global_state, d, dataset, settings, table, t),
                       [by_id[i] for i in ids], workers)
        ok = [r for r in results if r.ok]
        if not ok:
            raise RuntimeError(f"round {t}: every participating device failed")
        server.global_state = aggregate([(r.state, r.n_k) for r in ok])
        normalizer = sum(r.n_k for r in ok)
        tr = float(sum(r.n_k * r.train_loss for r in ok) / normalizer)
        lat = supernet_expected_latency(server.probs(), server.space, table) if table is not None else 0.0
        report = RoundReport(
            round=t + 1,
            participants=[r.device_id for r in ok],
            train_loss={r.device_id: r.train_loss for r in ok},
            val_loss={r.device_id: r.val_loss for r in ok},
            sizes={r.device_id: r.n_k for r in ok},
            normalizer=normalizer,
            expected_latency_ms=lat,
            reg_loss=tr + settings.lambda2 * lat,
            failed=[r.device_id for r in results if not r.ok],
            wall_s=time.perf_counter() - start,
        )
        server.round += 1
        server.history.append(report)
        if on_round is not None:
            on_round(server, report)
    return server


# -- checkpoints of a whole run ----------------------------------------------------


def server_checkpoint(server: ServerState, devices: list[DeviceState], header: dict | None = None) -> Checkpoint:
    arrays = {f"global/{k}": v for k, v in server.global_state.items()}
    for d in devices:
        for k, v in d.w_opt.arrays().items():
            arrays[f"device/{d.device_id}/w_opt/{k}"] = v
        if d.a_opt is not None:
            for k, v in d.a_opt.arrays().items():
                arrays[f"device/{d.device_id}/a_opt/{k}"] = v
        if isinstance(d.net, SuperNet):
            arrays[f"device/{d.device_id}/arch_steps"] = np.array([l.arch_steps for l in d.net.layers], float)
    head = {
        "search_space": server.space.to_dict(),
        "search_space_hash": server.space.hash(),
        "history": [r.to_dict() for r in server.history],
    }
    head.update(header or {})
    return Checkpoint(server.round, head, arrays)


def restore_server(ckpt: Checkpoint, space: SearchSpace, devices: list[DeviceState] | None = None) -> ServerState:
    if ckpt.header.get("search_space_hash") != space.hash():
        raise ValueError(f"checkpoint search space {ckpt.header.get('search_space_hash')} does not match "
                         f"configured search space {space.hash()}")
    history = [RoundReport(**{**r, "train_loss": {int(k): v for k, v in r["train_loss"].items()},
                              "val_loss": {int(k): v for k, v in r["val_loss"].items()},
                              "sizes": {int(k): v for k, v in r["sizes"].items()}})
               for r in ckpt.header.get("history", [])]
    server = ServerState(space, ckpt.group("global"), ckpt.round, history)
    for d in devices or []:
        d.w_opt.load_arrays(ckpt.group(f"device/{d.device_id}/w_opt"))
        if d.a_opt is not None:
            d.a_opt.load_arrays(ckpt.group(f"device/{d.device_id}/a_opt"))
        steps = ckpt.arrays.get(f"device/{d.device_id}/arch_steps")
        if steps is not None and isinstance(d.net, SuperNet):
            for layer, n in zip(d.net.layers, steps):
                layer.arch_steps = int(n)
    return server


# -- clustering ------------------------------------------------------------------


def cluster_by_tag(devices: list[DeviceState], key: str = "hardware") -> ClusterPlan:
    if key not in ("hardware", "data"):
        raise ValueError(f"unknown cluster key {key!r}")
    clusters: dict[str, list[int]] = {}
    for d in sorted(devices, key=lambda d: d.device_id):
        tag = d.tag(key)
        if not tag:
            raise ValueError(f"device {d.device_id} has no {key} tag")
        clusters.setdefault(tag, []).append(d.device_id)
    return ClusterPlan(clusters)


@dataclass
class ClusterResult:
    tag: str
    server: ServerState | None
    architecture: DerivedArchitecture | None
    error: str = ""


def run_cfdnas(init_state: dict, space: SearchSpace, devices: list[DeviceState], dataset: Dataset,
               plan: ClusterPlan, rounds: int, base: LocalSettings, online="all", workers: int = 1,
               reset_optimizers: bool = True, checkpoint_id: str = "") -> dict[str, ClusterResult]:
    """Adapt the SuperNet ``init_state`` separately inside every cluster.

    Each cluster works on private device copies and its own stream salt
    (derived from the sorted tag position), so results do not depend on the
    order clusters run in. A failing cluster is reported, not propagated.
    """
    by_id = {d.device_id: d for d in devices}
    tags = sorted(plan.clusters)
    results = {}
    for pos, tag in enumerate(tags):
        ids = plan.clusters[tag]
        if not ids:
            results[tag] = ClusterResult(tag, None, None, "empty cluster skipped")
            continue
        lam = plan.lambda2.get(tag, base.lambda2)
        settings = LocalSettings(**{**asdict(base), "lambda2": lam, "salt": base.salt + 1 + pos,
                                    "total_epochs": max(1, rounds * base.epochs)})
        members = []
        for i in ids:
            src = by_id[i]
            w_opt = settings.weight_optimizer() if reset_optimizers else copy.deepcopy(src.w_opt)
            a_opt = settings.arch_optimizer() if reset_optimizers else copy.deepcopy(src.a_opt)
            members.append(DeviceState(i, src.partition, src.hardware_tag, SuperNet(space, 0), w_opt, a_opt,
                                       src.seed_key))
        try:
            server = ServerState(space, {k: v.copy() for k, v in init_state.items()})
            run_fdnas(server, members, dataset, settings, plan.tables.get(tag), rounds, online, workers=workers)
            arch = derive_normal_net(server.to_net(), checkpoint_id)
            arch.provenance["cluster"] = tag
            results[tag] = ClusterResult(tag, server, arch)
        except (RuntimeError, ValueError, FloatingPointError) as err:
            results[tag] = ClusterResult(tag, None, None, f"{type(err).__name__}: {err}")
    return results


# -- FedAvg fine-tuning and evaluation -------------------------------------------------


def _train_compact(net: CompactNet, dataset: Dataset, idx: np.ndarray, epochs: int, lr_fn, batch_size: int,
                   opt: OptimizerState, rng_fn) -> float:
    loss_sum = n = 0.0
    params = net.trainable()
    for e in range(epochs):
        rng = rng_fn(e)
        lr = lr_fn(e)
        for b in _batches(idx, batch_size, rng):
            with ad.Tape() as tape:
                loss = ad.cross_entropy(net.forward(dataset.features[b], True, True), dataset.labels[b])
            grads = ad.backward(tape, loss, params.values())
            sgd_momentum_step(params, grads, opt, lr=lr)
            loss_sum, n = loss_sum + _check_loss(loss.item(), "train") * b.size, n + b.size
    return loss_sum / max(n, 1)


@dataclass
class FinetuneSettings:
    rounds: int = 50
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 3e-4
    root_seed: int = 0


def finetune_fedavg(arch: DerivedArchitecture, partitions: list[DevicePartition], dataset: Dataset,
                    s: FinetuneSettings, workers: int = 1, init_state: dict | None = None,
                    on_round=None) -> tuple[CompactNet, list[dict]]:
    """Plain FedAvg on the compact network, weights initialised from scratch."""
    global_net = CompactNet(arch, stream(s.root_seed, "finetune_init", 0))
    if init_state is not None:
        global_net.load_state_dict(init_state)
    state = global_net.state_dict()
    total = max(1, s.rounds * s.local_epochs)
    replicas = {p.device_id: (copy.deepcopy(global_net),
                              OptimizerState("sgd_momentum", s.lr, momentum=s.momentum,
                                             weight_decay=s.weight_decay)) for p in partitions}
    history = []
    for t in range(s.rounds):
        def work(p, t=t):
            net, opt = replicas[p.device_id]
            net.load_state_dict(state)
            try:
                loss = _train_compact(
                    net, dataset, p.train, s.local_epochs,
                    lambda e: cosine_lr(t * s.local_epochs + e, total, s.lr), s.batch_size, opt,
                    lambda e: stream(s.root_seed, "finetune", p.device_id, t * s.local_epochs + e))
            except FloatingPointError:
                return p, None, math.nan
            return p, net.state_dict(), loss

        out = [(p, st, loss) for p, st, loss in _map(work, list(partitions), workers) if st is not None]
        if not out:
            raise RuntimeError(f"fine-tuning round {t}: every device failed")
        state = aggregate([(st, p.num_train) for p, st, _ in out])
        n = sum(p.num_train for p, _, _ in out)
        rec = {"round": t + 1, "train_loss": float(sum(p.num_train * l for p, _, l in out) / n)}
        history.append(rec)
        if on_round is not None:
            on_round(rec)
    global_net.load_state_dict(state)
    return global_net, history


def predict(net, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for s in range(0, len(x), chunk):
            out.append(np.argmax(net.forward(x[s:s + chunk], False, False).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net, partitions: list[DevicePartition], dataset: Dataset, mode: str = "federated_averaged",
             local_epochs: int = 1, lr: float = 0.01, batch_size: int = 32, root_seed: int = 0) -> float:
    """``federated_averaged``: the net on the union of test sets.
    ``mean_local``: per device, fine-tune ``local_epochs`` then test locally; unweighted mean."""
    if mode == "federated_averaged":
        idx = np.concatenate([p.test for p in partitions])
        if idx.size == 0:
            raise ValueError("no test samples")
        return float(np.mean(predict(net, dataset.features[idx]) == dataset.labels[idx]))
    if mode != "mean_local":
        raise ValueError(f"unknown evaluation mode {mode!r}")
    accs = []
    for p in partitions:
        if p.test.size == 0:
            raise ValueError(f"device {p.device_id} has no test samples")
        local = net
        if local_epochs > 0:
            local = copy.deepcopy(net)
            opt = OptimizerState("sgd_momentum", lr, momentum=0.9)
            _train_compact(local, dataset, p.train, local_epochs, lambda e: lr, batch_size, opt,
                           lambda e: stream(root_seed, "eval", p.device_id, e))
        accs.append(float(np.mean(predict(local, dataset.features[p.test]) == dataset.labels[p.test])))
    return float(np.mean(accs))
