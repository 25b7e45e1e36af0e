"""Learnable low-rank-plus-diagonal Gaussian noise and its injection sites.

The noise for a site with ``N`` perturbed scalars has covariance
``Diag(s**2) + V @ V.T`` where ``s`` has length ``N`` and ``V`` is ``N x M``.
A draw is ``|s| * e_d + V @ e_c`` with ``e_d ~ N(0, I_N)`` and
``e_c ~ N(0, I_M)``; both standard-normal vectors are constants on the tape,
so the draw is differentiable in ``s`` and ``V``.  ``M = 0`` gives independent
(diagonal) noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError, DimensionError, SizeError
from .tensor import Tensor, absolute, add, broadcast_rows, matmul, mul, reshape, transpose

WEIGHT = "weight"
ACTIVATION = "activation"
MODES = (WEIGHT, ACTIVATION)

COVARIANCE_CAP = 4096


@dataclass
class ColoredNoiseParams:
    """Trainable factors ``s`` (length N) and ``V`` (N x M)."""

    s: Tensor
    V: Tensor

    def __post_init__(self):
        if self.s.data.ndim != 1:
            raise DimensionError(f"s must be a vector, got shape {self.s.shape}")
        if self.V.data.ndim != 2 or self.V.shape[0] != self.s.shape[0]:
            raise DimensionError(f"V must be {self.s.shape[0]} x M, got {self.V.shape}")

    @property
    def N(self) -> int:
        return self.s.shape[0]

    @property
    def M(self) -> int:
        return self.V.shape[1]

    @property
    def diagonal(self) -> np.ndarray:
        """The diagonal variances ``s**2``."""
        return self.s.data ** 2

    @classmethod
    def from_arrays(cls, s, V=None, requires_grad=True):
        s = np.asarray(s, dtype=np.float64)
        if V is None:
            V = np.zeros((s.shape[0], 0))
        return cls(Tensor(s, requires_grad=requires_grad), Tensor(V, requires_grad=requires_grad))


def covariance(params: ColoredNoiseParams, cap: int = COVARIANCE_CAP) -> Tensor:
    """Dense ``Diag(s**2) + V V^T``, accumulated one rank-one term at a time."""
    n = params.N
    if n > cap:
        raise SizeError(f"covariance of dimension {n} exceeds cap {cap}")
    cov = np.diag(params.s.data ** 2)
    v = params.V.data
    for k in range(params.M):
        cov += np.outer(v[:, k], v[:, k])
    return Tensor(cov)


def sample(params: ColoredNoiseParams, rng: np.random.Generator, size: int | None = None) -> Tensor:
    """Reparameterized draw(s) of the colored noise.

    Returns a length-N tensor, or ``size x N`` when ``size`` is given (rows are
    independent draws).  ``e_d`` is drawn before ``e_c``; with ``M = 0`` no
    ``e_c`` draw happens, so the stream consumption matches a diagonal sampler.
    """
    n, m = params.N, params.M
    scale = absolute(params.s)
    if size is None:
        e_d = rng.standard_normal(n)
        eps = mul(scale, Tensor(e_d))
        if m:
            e_c = rng.standard_normal((m, 1))
            eps = add(eps, reshape(matmul(params.V, Tensor(e_c)), (n,)))
        return eps
    e_d = rng.standard_normal((size, n))
    eps = mul(broadcast_rows(scale, size), Tensor(e_d))
    if m:
        e_c = rng.standard_normal((size, m))
        eps = add(eps, matmul(Tensor(e_c), transpose(params.V)))
    return eps


@dataclass
class InjectionSite:
    """Noise attached to one layer, either on its weights or its outputs."""

    mode: str
    layer: str
    params: ColoredNoiseParams

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def stream_name(self) -> str:
        return f"noise/{self.layer}/{self.mode}"

    def check(self, layer) -> None:
        expected = layer.weight.size if self.mode == WEIGHT else layer.output_size
        if self.params.N != expected:
            raise DimensionError(
                f"{self.mode} site on {self.layer}: noise dimension {self.params.N}, layer needs {expected}"
            )


def forward_with_noise(site: InjectionSite, layer, x: Tensor, rng: np.random.Generator) -> Tensor:
    """Run ``layer`` on ``x`` with the site's noise applied.

    Weight mode draws one perturbation for the whole batch and runs the layer
    with ``w + eps``.  Activation mode adds an independent draw to each
    sample's flattened output.
    """
    site.check(layer)
    if site.mode == WEIGHT:
        eps = sample(site.params, rng)
        return layer.forward(x, weight=add(layer.weight, reshape(eps, layer.weight.shape)))
    return add_activation_noise(site, layer.forward(x), rng)


def add_activation_noise(site: InjectionSite, y: Tensor, rng: np.random.Generator) -> Tensor:
    """Add an independent draw to each row of an already computed layer output."""
    bsz = y.shape[0]
    n = int(np.prod(y.shape[1:]))
    if n != site.params.N:
        raise DimensionError(f"activation site on {site.layer}: noise dimension {site.params.N}, output has {n}")
    flat = reshape(y, (bsz, n))
    eps = sample(site.params, rng, size=bsz)
    return reshape(add(flat, eps), y.shape)


def init_noise(layer, M: int, rng: np.random.Generator, mode: str = WEIGHT) -> ColoredNoiseParams:
    """Near-diagonal starting point for a layer's noise.

    ``s`` is 0.1 * std(weights) in weight mode and 0.1 in activation mode.
    ``V`` entries are N(0, (0.01 * std(weights))**2 / max(M, 1)).
    """
    if M < 0:
        raise ContractError(f"rank must be non-negative, got {M}")
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    w_std = float(np.std(layer.weight.data))
    if mode == WEIGHT:
        n = layer.weight.size
        s = np.full(n, 0.1 * w_std)
    else:
        n = layer.output_size
        s = np.full(n, 0.1)
    v = rng.normal(0.0, 0.01 * w_std / np.sqrt(max(M, 1)), size=(n, M))
    return ColoredNoiseParams(Tensor(s, requires_grad=True), Tensor(v, requires_grad=True))
