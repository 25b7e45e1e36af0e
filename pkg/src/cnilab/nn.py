"""Small feed-forward classifiers with optional noise injection per layer."""
from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from .exceptions import ContractError, DimensionError
from .noise import (
    ACTIVATION,
    MODES,
    WEIGHT,
    ColoredNoiseParams,
    InjectionSite,
    add_activation_noise,
    forward_with_noise,
    init_noise,
)
from .rng import SeedStreams, as_streams
from .tensor import Tensor, add, broadcast_rows, conv2d, matmul, relu, reshape


class Linear:
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        std = np.sqrt(2.0 / in_features)
        self.weight = Tensor(rng.normal(0.0, std, size=(in_features, out_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    @property
    def output_size(self) -> int:
        return self.out_features

    def forward(self, x: Tensor, weight: Tensor | None = None) -> Tensor:
        w = self.weight if weight is None else weight
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"linear layer expects B x {self.in_features}, got {x.shape}")
        return add(matmul(x, w), broadcast_rows(self.bias, x.shape[0]))

    def params(self):
        return [("weight", self.weight, "weight"), ("bias", self.bias, "bias")]

    def spec(self) -> dict:
        return {"type": "linear", "in": self.in_features, "out": self.out_features}


class Conv2d:
    kind = "conv2d"

    def __init__(self, in_shape, filters: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        c, h, w = in_shape
        self.in_shape = (int(c), int(h), int(w))
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        ho = (h + 2 * padding - kernel) // stride + 1
        wo = (w + 2 * padding - kernel) // stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"kernel {kernel} does not fit input {in_shape} with padding {padding}")
        self.out_shape = (filters, ho, wo)
        std = np.sqrt(2.0 / (c * kernel * kernel))
        self.weight = Tensor(rng.normal(0.0, std, size=(filters, c, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(filters), requires_grad=True)

    @property
    def output_size(self) -> int:
        return int(np.prod(self.out_shape))

    def forward(self, x: Tensor, weight: Tensor | None = None) -> Tensor:
        w = self.weight if weight is None else weight
        y = conv2d(x, w, stride=self.stride, padding=self.padding)
        bsz, f, ho, wo = y.shape
        # bias broadcast via B*H*W rows of length F, then back to NCHW order
        bias = reshape(broadcast_rows(self.bias, bsz * ho * wo), (bsz, ho, wo, f))
        return add(y, _nhwc_to_nchw(bias))

    def params(self):
        return [("weight", self.weight, "weight"), ("bias", self.bias, "bias")]

    def spec(self) -> dict:
        return {
            "type": "conv2d",
            "in_shape": list(self.in_shape),
            "filters": self.filters,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }


def _nhwc_to_nchw(t: Tensor) -> Tensor:
    data = np.ascontiguousarray(t.data.transpose(0, 3, 1, 2))
    return Tensor._from_op(data, (t,), lambda g: (g.transpose(0, 2, 3, 1),))


class ReLU:
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        return relu(x)

    def params(self):
        return []

    def spec(self) -> dict:
        return {"type": "relu"}


class Flatten:
    kind = "flatten"

    def forward(self, x: Tensor) -> Tensor:
        return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))

    def params(self):
        return []

    def spec(self) -> dict:
        return {"type": "flatten"}


class Model:
    """Ordered layers plus optional noise sites keyed by (layer index, mode).

    ``forward`` draws fresh noise on every call from per-site streams, so the
    output is deterministic given the stream state and random otherwise.
    """

    def __init__(self, layers, input_shape, streams: SeedStreams | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.sites: dict[tuple[int, str], InjectionSite] = {}
        self.streams = as_streams(streams)

    @property
    def n_classes(self) -> int:
        return self.layers[-1].output_size

    def add_site(self, index: int, mode: str, params: ColoredNoiseParams) -> InjectionSite:
        layer = self.layers[index]
        if not hasattr(layer, "weight"):
            raise ContractError(f"layer {index} ({layer.kind}) has no weights to perturb")
        site = InjectionSite(mode, f"layer{index}", params)
        site.check(layer)
        self.sites[(index, mode)] = site
        return site

    @property
    def is_randomized(self) -> bool:
        return bool(self.sites)

    def forward(self, x, streams: SeedStreams | None = None) -> Tensor:
        streams = self.streams if streams is None else streams
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"model expects inputs of shape (B, {self.input_shape}), got {x.shape}")
        for i, layer in enumerate(self.layers):
            w_site = self.sites.get((i, WEIGHT))
            a_site = self.sites.get((i, ACTIVATION))
            if w_site is not None:
                x = forward_with_noise(w_site, layer, x, streams.stream(w_site.stream_name))
            else:
                x = layer.forward(x)
            if a_site is not None:
                x = add_activation_noise(a_site, x, streams.stream(a_site.stream_name))
        return x

    __call__ = forward

    def parameters(self) -> "OrderedDict[str, Tensor]":
        reg = OrderedDict()
        for name, tensor, _ in self.named_parameters():
            reg[name] = tensor
        return reg

    def named_parameters(self):
        """Yield ``(name, tensor, kind)``; kind is weight, bias, noise_scale or noise_factor."""
        for i, layer in enumerate(self.layers):
            for pname, tensor, kind in layer.params():
                yield f"layer{i}.{pname}", tensor, kind
            for mode in MODES:
                site = self.sites.get((i, mode))
                if site is not None:
                    yield f"layer{i}.{mode}_noise.s", site.params.s, "noise_scale"
                    yield f"layer{i}.{mode}_noise.V", site.params.V, "noise_factor"

    @contextmanager
    def frozen(self):
        """Stop recording parameter gradients (attacks only need input gradients)."""
        tensors = [t for _, t, _ in self.named_parameters()]
        flags = [t.requires_grad for t in tensors]
        for t in tensors:
            t.requires_grad = False
        try:
            yield self
        finally:
            for t, flag in zip(tensors, flags):
                t.requires_grad = flag

    def zero_grad(self) -> None:
        for _, t, _ in self.named_parameters():
            t.zero_grad()

    def spec(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.spec() for layer in self.layers],
            "sites": [
                {"layer": i, "mode": mode, "rank": site.params.M}
                for (i, mode), site in sorted(self.sites.items())
            ],
        }

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t, _ in self.named_parameters())

    def load_arrays(self, arrays) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)}")
        for name, tensor in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape}, model has {tensor.shape}")
            tensor.data = arr.copy()


def build_from_spec(spec: dict, seed: int = 0) -> Model:
    """Rebuild a model's architecture (parameters freshly initialized)."""
    rng = np.random.default_rng(seed)
    layers = []
    for ls in spec["layers"]:
        t = ls["type"]
        if t == "linear":
            layers.append(Linear(ls["in"], ls["out"], rng))
        elif t == "conv2d":
            layers.append(Conv2d(ls["in_shape"], ls["filters"], ls["kernel"], rng, ls["stride"], ls["padding"]))
        elif t == "relu":
            layers.append(ReLU())
        elif t == "flatten":
            layers.append(Flatten())
        else:
            raise ContractError(f"unknown layer type {t!r}")
    model = Model(layers, spec["input_shape"], SeedStreams(seed))
    for site in spec.get("sites", []):
        attach_site(model, site["layer"], site["mode"], site["rank"], rng)
    return model


def build_mlp(in_dim: int, hidden, n_classes: int, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    sizes = [in_dim, *hidden, n_classes]
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return Model(layers, (in_dim,), SeedStreams(seed))


def build_cnn(in_shape, n_classes: int, channels=(8, 16), seed: int = 0) -> Model:
    """Strided 3x3 conv stack followed by a linear read-out."""
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(in_shape)
    for ch in channels:
        conv = Conv2d(shape, ch, 3, rng, stride=2, padding=1)
        layers += [conv, ReLU()]
        shape = conv.out_shape
    layers += [Flatten(), Linear(int(np.prod(shape)), n_classes, rng)]
    return Model(layers, in_shape, SeedStreams(seed))


def attach_site(model: Model, index: int, mode: str, rank: int, rng: np.random.Generator) -> InjectionSite:
    params = init_noise(model.layers[index], rank, rng, mode=mode)
    return model.add_site(index, mode, params)


DEFENSES = ("none", "adv-train", "pni-w", "cni-w", "cni-a", "cni-w+a")


def defense_modes(defense: str) -> tuple[str, ...]:
    """Noise placements implied by a defense name."""
    table = {
        "none": (),
        "adv-train": (),
        "pni-w": (WEIGHT,),
        "cni-w": (WEIGHT,),
        "cni-a": (ACTIVATION,),
        "cni-w+a": (WEIGHT, ACTIVATION),
    }
    try:
        return table[defense]
    except KeyError:
        raise ContractError(f"unknown defense {defense!r}; choose from {DEFENSES}") from None


def apply_defense(model: Model, defense: str, rank: int, seed: int = 0) -> Model:
    """Attach noise sites to every weighted layer as the defense prescribes.

    ``pni-w`` always uses rank 0.
    """
    modes = defense_modes(defense)
    if defense == "pni-w":
        rank = 0
    rng = np.random.default_rng([seed, 0x4E01])
    for i, layer in enumerate(model.layers):
        if not hasattr(layer, "weight"):
            continue
        for mode in modes:
            attach_site(model, i, mode, rank, rng)
    return model
