"""Building blocks shared by the SuperNet and derived compact networks."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .search_space import CandidateSpec, LayerSpec, SearchSpace


class Block:
    """Owns a flat, ordered set of named parameters."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}

    def _param(self, name: str, data, trainable: bool = True) -> Parameter:
        p = Parameter(data, name=name, trainable=trainable)
        self.params[name] = p
        return p

    def forward(self, x: Tensor, training: bool = True, update_stats: bool = False) -> Tensor:
        raise NotImplementedError


class BatchNorm(Block):
    def __init__(self, prefix: str, channels: int):
        super().__init__()
        self.gamma = self._param(f"{prefix}.gamma", np.ones(channels))
        self.beta = self._param(f"{prefix}.beta", np.zeros(channels))
        self.running_mean = self._param(f"{prefix}.running_mean", np.zeros(channels), trainable=False)
        self.running_var = self._param(f"{prefix}.running_var", np.ones(channels), trainable=False)

    def forward(self, x, training=True, update_stats=False):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=training, update_stats=update_stats)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ConvBN(Block):
    """conv -> batch norm -> optional relu6; ``depthwise`` uses one filter per channel."""

    def __init__(self, prefix, cin, cout, k, stride, rng, depthwise=False, act=True):
        super().__init__()
        self.stride, self.depthwise, self.act = stride, depthwise, act
        if depthwise:
            assert cin == cout
            self.weight = self._param(f"{prefix}.weight", _he(rng, (cin, k, k), k * k))
        else:
            self.weight = self._param(f"{prefix}.weight", _he(rng, (cout, cin, k, k), cin * k * k))
        self.bn = BatchNorm(f"{prefix}.bn", cout)
        self.params.update(self.bn.params)

    def forward(self, x, training=True, update_stats=False):
        if self.depthwise:
            y = ad.depthwise_conv2d(x, self.weight, stride=self.stride)
        else:
            y = ad.conv2d(x, self.weight, stride=self.stride)
        y = self.bn.forward(y, training, update_stats)
        return ad.relu6(y) if self.act else y


class MBConv(Block):
    """Inverted residual block: 1x1 expand, kxk depthwise, 1x1 linear project.

    The skip connection is added when stride is 1 and channels match.
    """

    def __init__(self, prefix, cin, cout, expansion, kernel, stride, rng):
        super().__init__()
        hidden = cin * expansion
        self.expand = None
        if expansion != 1:
            self.expand = ConvBN(f"{prefix}.expand", cin, hidden, 1, 1, rng)
            self.params.update(self.expand.params)
        self.dw = ConvBN(f"{prefix}.dw", hidden, hidden, kernel, stride, rng, depthwise=True)
        self.project = ConvBN(f"{prefix}.project", hidden, cout, 1, 1, rng, act=False)
        self.params.update(self.dw.params)
        self.params.update(self.project.params)
        self.residual = stride == 1 and cin == cout
        if self.residual:
            # residual blocks start as the identity map
            self.project.bn.gamma.data[...] = 0.0

    def forward(self, x, training=True, update_stats=False):
        h = x if self.expand is None else self.expand.forward(x, training, update_stats)
        h = self.dw.forward(h, training, update_stats)
        h = self.project.forward(h, training, update_stats)
        return ad.add(h, x) if self.residual else h


class Identity(Block):
    def forward(self, x, training=True, update_stats=False):
        return x


class Zero(Block):
    def __init__(self, cout: int, stride: int):
        super().__init__()
        self.cout, self.stride = cout, stride

    def forward(self, x, training=True, update_stats=False):
        b, _, h, w = x.shape
        ho, wo = (h - 1) // self.stride + 1, (w - 1) // self.stride + 1
        return Tensor(np.zeros((b, self.cout, ho, wo)))


def make_candidate(prefix: str, cand: CandidateSpec, layer: LayerSpec, rng) -> Block:
    if cand.kind == "mbconv":
        return MBConv(prefix, layer.in_channels, layer.out_channels, cand.expansion, cand.kernel,
                      layer.stride, rng)
    if cand.kind == "identity":
        if not layer.shape_preserving:
            raise ValueError(f"layer {layer.index}: identity on a shape-changing layer")
        return Identity()
    return Zero(layer.out_channels, layer.stride)


class Head(Block):
    def __init__(self, prefix, cin, num_classes, rng):
        super().__init__()
        bound = 1.0 / np.sqrt(cin)
        self.weight = self._param(f"{prefix}.weight", rng.uniform(-bound, bound, (num_classes, cin)))
        self.bias = self._param(f"{prefix}.bias", np.zeros(num_classes))

    def forward(self, x, training=True, update_stats=False):
        return ad.linear(ad.global_avg_pool(x), self.weight, self.bias)


class Network:
    """Common parameter plumbing for SuperNet and CompactNet."""

    space: SearchSpace

    def parameters(self) -> dict[str, Parameter]:
        raise NotImplementedError

    def trainable(self) -> dict[str, Parameter]:
        return {k: p for k, p in self.parameters().items() if p.trainable and not k.endswith(".alpha")}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing {missing[:5]} extra {extra[:5]}")
        for k, p in params.items():
            if k in state:
                arr = np.asarray(state[k], dtype=np.float64)
                if arr.shape != p.data.shape:
                    raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
                p.data[...] = arr

    @contextmanager
    def frozen(self):
        """Parameters stop requiring grad inside the block (gate gradients only)."""
        params = list(self.parameters().values())
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    def num_weights(self) -> int:
        return int(sum(p.data.size for p in self.trainable().values()))
