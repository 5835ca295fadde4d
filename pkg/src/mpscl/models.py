"""Desk-scale generator (encoder + 1x1 classifier) and patch discriminator."""
from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import numerics as nx
from .losses import PredictionMap
from .numerics import Tensor

MAX_PARAMETERS = 200_000


class Module:
    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, shape, rng: np.random.Generator | None, fan_in: int | None = None) -> None:
        if rng is None or fan_in is None:
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(data, requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise nx.ShapeError(f"load:{k}", p.shape, arr.shape)
            p.data = arr.copy()

    @contextlib.contextmanager
    def frozen(self) -> Iterator[None]:
        """Parameters act as constants inside the block."""
        prev = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield
        finally:
            for k, p in self.params.items():
                p.requires_grad = prev[k]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Generator(Module):
    """Four 3x3 convs (16-32-32-d) with one 2x pool/upsample pair, then a 1x1 classifier.

    conv1 runs at full resolution, conv2-conv4 at half resolution. The features
    are the linear output of conv4, upsampled back to input resolution.
    """

    downsample = 2

    def __init__(self, num_classes: int = 5, feature_dim: int = 32, channels=(16, 32, 32), seed: int = 0,
                 in_channels: int = 1, zero_classifier: bool = False, slope: float = 0.2):
        super().__init__()
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.slope = slope
        rng = np.random.default_rng(seed)
        widths = [in_channels, *channels, feature_dim]
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            self._add(f"conv{i}.weight", (3, 3, cin, cout), rng, 9 * cin)
            self._add(f"conv{i}.bias", (cout,), None)
        self._add("classifier.weight", (1, 1, feature_dim, num_classes), None if zero_classifier else rng, feature_dim)
        self._add("classifier.bias", (num_classes,), None)
        if self.num_parameters() >= MAX_PARAMETERS:
            raise ValueError(f"generator has {self.num_parameters()} parameters, limit {MAX_PARAMETERS}")

    def forward(self, image) -> tuple[Tensor, PredictionMap]:
        x = nx.as_tensor(image)
        if x.ndim == 3:
            x = nx.reshape(x, (1,) + x.shape)
        n, h, w, c = x.shape
        if h <= 0 or w <= 0:
            raise ValueError(f"image must have positive height and width, got {h}x{w}")
        if h % self.downsample or w % self.downsample:
            raise nx.ShapeError("generator.input", f"H, W divisible by {self.downsample}", x.shape)
        p = self.params
        x = nx.leaky_relu(nx.conv2d(x, p["conv1.weight"], p["conv1.bias"], padding=1), self.slope)
        x = nx.max_pool2d(x, self.downsample)
        x = nx.leaky_relu(nx.conv2d(x, p["conv2.weight"], p["conv2.bias"], padding=1), self.slope)
        x = nx.leaky_relu(nx.conv2d(x, p["conv3.weight"], p["conv3.bias"], padding=1), self.slope)
        x = nx.conv2d(x, p["conv4.weight"], p["conv4.bias"], padding=1)
        features = nx.upsample_nearest(x, self.downsample)
        logits = nx.conv2d(features, p["classifier.weight"], p["classifier.bias"])
        return features, PredictionMap.from_logits(logits)


class Discriminator(Module):
    """Three stride-2 3x3 convs over the self-information map, sigmoid patch scores."""

    def __init__(self, num_classes: int = 5, channels=(32, 64), seed: int = 0, zero_init: bool = False,
                 slope: float = 0.2):
        super().__init__()
        self.slope = slope
        rng = None if zero_init else np.random.default_rng(seed)
        widths = [num_classes, *channels, 1]
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            self._add(f"conv{i}.weight", (3, 3, cin, cout), rng, 9 * cin)
            self._add(f"conv{i}.bias", (cout,), None)
        self.num_layers = len(widths) - 1
        if self.num_parameters() >= MAX_PARAMETERS:
            raise ValueError(f"discriminator has {self.num_parameters()} parameters, limit {MAX_PARAMETERS}")

    def logits(self, self_info) -> Tensor:
        x = nx.as_tensor(self_info)
        if x.ndim == 3:
            x = nx.reshape(x, (1,) + x.shape)
        p = self.params
        for i in range(1, self.num_layers + 1):
            x = nx.conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=2, padding=1)
            if i < self.num_layers:
                x = nx.leaky_relu(x, self.slope)
        return x

    def forward(self, self_info) -> Tensor:
        return nx.sigmoid(self.logits(self_info))
