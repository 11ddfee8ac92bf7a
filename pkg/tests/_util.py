"""Shared builders and oracles for the test modules."""

from __future__ import annotations

import numpy as np

from fdnas import autodiff as ad
from fdnas.autodiff import finite_diff_grad, relative_error
from fdnas.config import config_from_dict
from fdnas.search_space import SearchSpace
from fdnas.supernet import SuperNet, arch_gradient, compute_probs, forward_mixed

# one "<PASS|FAIL> criterion <n>: ..." line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []

MBCONVS = ["mbconv_e1_k3", "mbconv_e3_k3", "mbconv_e3_k5", "mbconv_e6_k3"]


def tiny_space(widths=(4, 4), strides=(1, 1), candidates=("identity", "mbconv_e1_k3", "mbconv_e3_k3"),
               num_classes=3, image_size=8, stem_channels=4) -> SearchSpace:
    return SearchSpace.build(in_channels=1, image_size=image_size, num_classes=num_classes,
                             stem_channels=stem_channels, widths=list(widths), strides=list(strides),
                             candidates=list(candidates), stem_stride=2)


def random_tiny_space(rng: np.random.Generator) -> SearchSpace:
    """At most two layers and at most three candidates per layer."""
    n_layers = int(rng.integers(1, 3))
    widths, strides = [], []
    c = 4
    for _ in range(n_layers):
        c = int(rng.choice([c, c, 6]))
        widths.append(c)
        strides.append(int(rng.choice([1, 1, 2])))
    n = int(rng.integers(2, 4))
    shape_changing = any(s != 1 for s in strides) or any(w != 4 for w in widths)
    pool = MBCONVS if shape_changing else ["identity"] + MBCONVS
    cands = list(rng.choice(pool, size=n, replace=False))
    return tiny_space(widths, strides, cands)


def tiny_config(**over):
    doc = {
        "seed": 0,
        "data": {"per_class": 12, "difficulty": 0.3},
        "federation": {"num_devices": 4, "rounds": 2, "local_epochs": 1},
        "cluster": {"rounds": 1},
        "finetune": {"rounds": 2, "local_epochs": 1},
        "eval": {"local_epochs": 1},
    }
    for key, value in over.items():
        if isinstance(value, dict):
            doc.setdefault(key, {}).update(value)
        else:
            doc[key] = value
    return config_from_dict(doc).validate()


def mixed_loss(net: SuperNet, x, y, alphas) -> float:
    with ad.no_grad():
        logits, _ = forward_mixed(net, x, [compute_probs(a) for a in alphas])
        return ad.cross_entropy(logits, y).item()


def gradient_oracle(seed: int, weight_coords: int = 24) -> tuple[float, float]:
    """Relative errors of (alpha gradient, weight gradient) on one random tiny SuperNet.

    The alpha gradient is arch_gradient applied to the gate gradients dL/db
    of a mixed forward; the reference is central differences of the mixed
    loss in alpha. Weight gradients are checked on a random coordinate subset.
    """
    rng = np.random.default_rng(seed)
    space = random_tiny_space(rng)
    net = SuperNet(space, rng)
    for layer in net.layers:
        layer.alpha.data[:] = rng.normal(size=layer.n)
    for p in net.trainable().values():
        if p.name.endswith("gamma"):
            p.data[:] = rng.uniform(0.5, 1.5, size=p.shape)
    x = rng.normal(size=(4, 1, space.image_size, space.image_size))
    y = rng.integers(0, space.num_classes, size=4)

    params = net.trainable()
    with ad.Tape() as tape:
        logits, gates = forward_mixed(net, x)
        loss = ad.cross_entropy(logits, y)
    wgrads = ad.backward(tape, loss, params.values())
    analytic = np.concatenate([
        arch_gradient([float(g.grad[0]) for g in layer_gates], layer.probs())
        for layer, layer_gates in zip(net.layers, gates)
    ])

    sizes = [layer.n for layer in net.layers]
    theta0 = np.concatenate(net.alphas())

    def f_alpha(theta):
        return mixed_loss(net, x, y, np.split(theta, np.cumsum(sizes)[:-1]))

    a_err = relative_error(analytic, finite_diff_grad(f_alpha, theta0, eps=1e-6))

    names = sorted(params)
    flat = [(name, i) for name in names for i in range(params[name].data.size)]
    picks = [flat[k] for k in rng.choice(len(flat), size=min(weight_coords, len(flat)), replace=False)]
    alphas = net.alphas()
    numeric, exact = [], []
    for name, i in picks:
        p = params[name].data.reshape(-1)
        orig = p[i]

        def f_w(v, p=p, i=i):
            p[i] = v[0]
            return mixed_loss(net, x, y, alphas)

        numeric.append(finite_diff_grad(f_w, [orig], eps=1e-6)[0])
        p[i] = orig
        exact.append(wgrads[name].reshape(-1)[i])
    w_err = relative_error(exact, numeric)
    return a_err, w_err
