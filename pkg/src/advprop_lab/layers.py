"""Route-indexed batch normalization and the fixed desk-scale network.

A :class:`DualBatchNorm` keeps ``K`` independent sets of statistics and affine
parameters.  Route 0 is the main (clean) route; routes ``1..K-1`` are
auxiliary and can be dropped for inference without touching route 0.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TRAIN = "train"
EVAL = "eval"


class RouteError(ValueError):
    """Raised when a forward pass asks for a BN route the model does not have."""


@dataclass
class BNRoute:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


class DualBatchNorm:
    """Batch norm with ``routes`` independent statistic/affine sets.

    With ``share_affine=True`` every route reuses route 0's gamma/beta and only
    the running statistics are per-route.
    """

    def __init__(self, channels: int, routes: int = 2, momentum: float = 0.99,
                 eps: float = 1e-5, share_affine: bool = False):
        if routes < 1:
            raise ValueError("a DualBatchNorm needs at least one route")
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.share_affine = share_affine
        self.track_stats = True
        self.routes: List[BNRoute] = []
        for r in range(routes):
            if share_affine and r > 0:
                gamma, beta = self.routes[0].gamma, self.routes[0].beta
            else:
                gamma = Tensor(np.ones(channels), requires_grad=True)
                beta = Tensor(np.zeros(channels), requires_grad=True)
            self.routes.append(BNRoute(gamma, beta, np.zeros(channels), np.ones(channels)))

    @property
    def num_routes(self) -> int:
        return len(self.routes)

    def route(self, index: int) -> BNRoute:
        if not 0 <= index < len(self.routes):
            raise RouteError(f"route {index} absent (layer has {len(self.routes)} routes)")
        return self.routes[index]

    def __call__(self, x: Tensor, route: int = 0, mode: str = TRAIN) -> Tensor:
        return dual_bn_forward(self, x, route, mode)


def dual_bn_forward(layer: DualBatchNorm, x: Tensor, route: int = 0, mode: str = TRAIN) -> Tensor:
    if x.ndim not in (2, 4) or x.shape[1] != layer.channels:
        raise ValueError(f"expected {layer.channels} channels, got input of shape {x.shape}")
    r = layer.route(route)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if mode == EVAL:
        inv = 1.0 / np.sqrt(r.running_var + layer.eps)
        scale = (r.gamma.data * inv).reshape(bshape)
        shift = (r.beta.data - r.gamma.data * r.running_mean * inv).reshape(bshape)
        return Tensor(x.data * scale + shift)
    if mode != TRAIN:
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[0] < 2:
        raise ValueError("train-mode batch norm needs a batch of at least 2")
    out, mu, var = ad.batch_norm(x, r.gamma, r.beta, layer.eps)
    if layer.track_stats:
        m = layer.momentum
        r.running_mean = m * r.running_mean + (1.0 - m) * mu
        r.running_var = m * r.running_var + (1.0 - m) * var
    return out


class Model:
    """Base for models that thread a BN route through every normalization layer."""

    num_routes = 1

    def forward(self, x: Tensor, route: int = 0, mode: str = TRAIN) -> Tensor:
        raise NotImplementedError

    __call__ = forward

    def named_parameters(self) -> Dict[str, Tensor]:
        return {}

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def bn_layers(self) -> List[DualBatchNorm]:
        return []

    def check_route(self, route: int) -> None:
        if not 0 <= route < self.num_routes:
            raise RouteError(f"route {route} absent (model has {self.num_routes} routes)")

    @contextlib.contextmanager
    def frozen_stats(self) -> Iterator[None]:
        """Suppress running-statistic updates in every BN layer."""
        layers = self.bn_layers()
        saved = [bn.track_stats for bn in layers]
        for bn in layers:
            bn.track_stats = False
        try:
            yield
        finally:
            for bn, flag in zip(layers, saved):
                bn.track_stats = flag

    @contextlib.contextmanager
    def frozen_params(self) -> Iterator[None]:
        """Detach parameters from the tape (input gradients only)."""
        params = list(self.named_parameters().values())
        saved = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield
        finally:
            for p, flag in zip(params, saved):
                p.requires_grad = flag

    def state(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by checkpoint name."""
        out = {k: v.data.copy() for k, v in self.named_parameters().items()}
        out.update({k: v.copy() for k, v in self.named_buffers().items()})
        return out


def route_prefix(layer_name: str, route: int) -> str:
    return f"{layer_name}.route{route}"


def route_of(name: str) -> Optional[int]:
    """Route index encoded in a parameter/buffer name, or None for shared entries."""
    for part in name.split("."):
        if part.startswith("route") and part[5:].isdigit():
            return int(part[5:])
    return None


class DeskNet(Model):
    """conv3x3(16)-BN-ReLU-pool2, conv3x3(32)-BN-ReLU-pool2, dense(128)-ReLU-dense(classes)."""

    def __init__(self, channels_in: int = 1, num_classes: int = 10, K: int = 2,
                 image_size: int = 28, seed: int = 0, momentum: float = 0.99,
                 eps: float = 1e-5, share_affine: bool = False):
        if K < 1:
            raise ValueError("K (number of BN routes) must be at least 1")
        if image_size < 4:
            raise ValueError("image_size must be at least 4")
        self.channels_in = channels_in
        self.num_classes = num_classes
        self.num_routes = K
        self.image_size = image_size
        self.seed = seed
        self.share_affine = share_affine
        rng = np.random.default_rng(seed)
        side = image_size // 2 // 2
        self.flat_dim = 32 * side * side

        def he_uniform(shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        self.conv1 = he_uniform((16, channels_in, 3, 3), channels_in * 9)
        self.conv2 = he_uniform((32, 16, 3, 3), 16 * 9)
        self.fc1_w = he_uniform((self.flat_dim, 128), self.flat_dim)
        self.fc1_b = Tensor(np.zeros(128), requires_grad=True)
        self.fc2_w = he_uniform((128, num_classes), 128)
        self.fc2_b = Tensor(np.zeros(num_classes), requires_grad=True)
        self.bn1 = DualBatchNorm(16, K, momentum, eps, share_affine)
        self.bn2 = DualBatchNorm(32, K, momentum, eps, share_affine)

    def bn_layers(self) -> List[DualBatchNorm]:
        return [self.bn1, self.bn2]

    def forward(self, x: Tensor, route: int = 0, mode: str = TRAIN) -> Tensor:
        self.check_route(route)
        if not isinstance(x, Tensor):
            x = Tensor(x)
        h = ad.conv2d(x, self.conv1, 1, 1)
        h = ad.maxpool2d(ad.relu(self.bn1(h, route, mode)))
        h = ad.conv2d(h, self.conv2, 1, 1)
        h = ad.maxpool2d(ad.relu(self.bn2(h, route, mode)))
        h = ad.reshape(h, (h.shape[0], -1))
        h = ad.relu(ad.add(ad.matmul(h, self.fc1_w), self.fc1_b))
        return ad.add(ad.matmul(h, self.fc2_w), self.fc2_b)

    __call__ = forward

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {"conv1.weight": self.conv1, "conv2.weight": self.conv2}
        for name, bn in (("bn1", self.bn1), ("bn2", self.bn2)):
            for r, rt in enumerate(bn.routes):
                if self.share_affine and r > 0:
                    continue
                params[f"{route_prefix(name, r)}.gamma"] = rt.gamma
                params[f"{route_prefix(name, r)}.beta"] = rt.beta
        params.update({"fc1.weight": self.fc1_w, "fc1.bias": self.fc1_b,
                       "fc2.weight": self.fc2_w, "fc2.bias": self.fc2_b})
        return params

    def named_buffers(self) -> Dict[str, np.ndarray]:
        bufs = {}
        for name, bn in (("bn1", self.bn1), ("bn2", self.bn2)):
            for r, rt in enumerate(bn.routes):
                bufs[f"{route_prefix(name, r)}.running_mean"] = rt.running_mean
                bufs[f"{route_prefix(name, r)}.running_var"] = rt.running_var
        return bufs

    def config(self) -> Dict[str, int]:
        return {"channels_in": self.channels_in, "num_classes": self.num_classes,
                "K": self.num_routes, "image_size": self.image_size,
                "share_affine": int(self.share_affine)}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        """Overwrite parameters and buffers from ``state`` (names must match exactly)."""
        params = self.named_parameters()
        bufs = self.named_buffers()
        expected = set(params) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state does not match architecture (missing={missing}, unexpected={extra})")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
        for name, bn in (("bn1", self.bn1), ("bn2", self.bn2)):
            for r, rt in enumerate(bn.routes):
                p = route_prefix(name, r)
                for attr in ("running_mean", "running_var"):
                    arr = state[f"{p}.{attr}"]
                    if arr.shape != (bn.channels,):
                        raise ValueError(f"shape mismatch for {p}.{attr}")
                    setattr(rt, attr, np.array(arr, dtype=np.float64))


def build_desknet(channels_in: int = 1, num_classes: int = 10, K: int = 2, *,
                  image_size: int = 28, seed: int = 0, momentum: float = 0.99,
                  eps: float = 1e-5, share_affine: bool = False) -> DeskNet:
    return DeskNet(channels_in, num_classes, K, image_size=image_size, seed=seed,
                   momentum=momentum, eps=eps, share_affine=share_affine)


def model_forward(model: Model, x, route: int = 0, mode: str = TRAIN) -> Tensor:
    model.check_route(route)
    return model.forward(x if isinstance(x, Tensor) else Tensor(x), route, mode)


def param_count(model: Model, include_aux: bool = True, include_stats: bool = False) -> int:
    """Number of scalar parameters; ``include_aux=False`` keeps shared + route-0 only.

    ``include_stats`` also counts BN running statistics, i.e. every float a
    route contributes to a checkpoint.
    """
    entries = dict(model.named_parameters())
    if include_stats:
        entries.update(model.named_buffers())
    total = 0
    for name, p in entries.items():
        r = route_of(name)
        if include_aux or r is None or r == 0:
            total += int(np.size(p.data if isinstance(p, Tensor) else p))
    return total


class LinearSoftmax(Model):
    """Route-free linear classifier ``logits = x_flat @ W.T``; used as an analytic probe."""

    def __init__(self, weight: np.ndarray):
        self.weight = Tensor(np.asarray(weight, dtype=np.float64), requires_grad=True)

    def forward(self, x: Tensor, route: int = 0, mode: str = TRAIN) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        flat = ad.reshape(x, (x.shape[0], -1))
        return ad.matmul(flat, ad.transpose(self.weight))

    __call__ = forward

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight}
