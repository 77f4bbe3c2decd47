"""Real-NVP-style normalizing flow with optional conditioning.

Each of the L blocks chains a (conditionally) affine coupling layer, an
activation-normalization layer, and an invertible LU-parameterized linear
layer; a final coupling layer sits on the output. The same class serves both
the control-sequence posterior (conditioned on a context vector) and the
unconditional latent prior of the environment VAE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn


@dataclass(frozen=True)
class FlowConfig:
    dim: int
    depth: int
    context_dim: int = 0
    hidden: int = 128

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("flow dim must be >= 2")
        if self.depth < 1:
            raise ValueError("flow depth must be >= 1")
        if self.context_dim < 0 or self.hidden < 1:
            raise ValueError("bad flow config")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "FlowConfig":
        return FlowConfig(**d)


class FlowNumericsError(RuntimeError):
    """A layer produced a non-finite intermediate value."""


def _alternating_mask(dim: int, parity: int, dtype) -> torch.Tensor:
    idx = torch.arange(dim)
    return ((idx % 2) == parity).to(dtype)


class CouplingLayer(nn.Module):
    """Affine coupling: scale-shifts the unmasked half as a function of the
    masked half concatenated with the context. Scales go through tanh times a
    learned bound; the conditioner's last layer is zero-initialized so the
    layer starts as the identity."""

    def __init__(self, dim, context_dim, hidden, parity, dtype, scale_bound=2.0):
        super().__init__()
        self.register_buffer("mask", _alternating_mask(dim, parity, dtype))
        self.net = nn.Sequential(
            nn.Linear(dim + context_dim, hidden, dtype=dtype),
            nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=dtype),
            nn.ReLU(),
            nn.Linear(hidden, 2 * dim, dtype=dtype),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.scale_bound = nn.Parameter(torch.tensor(scale_bound, dtype=dtype))

    def _scale_shift(self, x, context):
        masked = x * self.mask
        inp = masked if context is None else torch.cat([masked, context], dim=-1)
        raw_s, t = self.net(inp).chunk(2, dim=-1)
        keep = 1.0 - self.mask
        s = torch.tanh(raw_s) * self.scale_bound * keep
        return s, t * keep

    def forward(self, x, context=None):
        s, t = self._scale_shift(x, context)
        return x * torch.exp(s) + t, s.sum(dim=-1)

    def inverse(self, y, context=None):
        s, t = self._scale_shift(y, context)
        return (y - t) * torch.exp(-s), -s.sum(dim=-1)


class ActNorm(nn.Module):
    """Per-dimension affine bijection. Starts as the identity; on the first
    inverse pass in training mode its scale/offset are set from the batch
    statistics so the normalized output is standardized, after which they are
    trained as free parameters."""

    def __init__(self, dim, dtype):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.offset = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.register_buffer("initialized", torch.tensor(False))

    def _maybe_init(self, y):
        if self.initialized or not self.training or y.shape[0] < 2:
            return
        with torch.no_grad():
            std = y.std(dim=0, unbiased=False).clamp_min(1e-6)
            self.log_scale.copy_(torch.log(std))
            self.offset.copy_(y.mean(dim=0))
            self.initialized.fill_(True)

    def forward(self, x, context=None):
        y = x * torch.exp(self.log_scale) + self.offset
        return y, self.log_scale.sum().expand(x.shape[0])

    def inverse(self, y, context=None):
        self._maybe_init(y)
        x = (y - self.offset) * torch.exp(-self.log_scale)
        return x, (-self.log_scale.sum()).expand(y.shape[0])


class LuLinear(nn.Module):
    """Invertible linear map W = L U with unit lower-triangular L and upper
    triangular U whose diagonal is exponentiated (always positive), giving an
    O(dim) log-determinant. Initialized to the identity."""

    def __init__(self, dim, dtype):
        super().__init__()
        self.dim = dim
        self.lower = nn.Parameter(torch.zeros(dim, dim, dtype=dtype))
        self.upper = nn.Parameter(torch.zeros(dim, dim, dtype=dtype))
        self.log_diag = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.register_buffer("eye", torch.eye(dim, dtype=dtype))

    def _factors(self):
        l = torch.tril(self.lower, diagonal=-1) + self.eye
        u = torch.triu(self.upper, diagonal=1) + torch.diag(torch.exp(self.log_diag))
        return l, u

    def forward(self, x, context=None):
        l, u = self._factors()
        y = x @ (l @ u).transpose(0, 1)
        return y, self.log_diag.sum().expand(x.shape[0])

    def inverse(self, y, context=None):
        l, u = self._factors()
        z = torch.linalg.solve_triangular(l, y.transpose(0, 1), upper=False, unitriangular=True)
        x = torch.linalg.solve_triangular(u, z, upper=True)
        return x.transpose(0, 1), (-self.log_diag.sum()).expand(y.shape[0])


class ConditionalFlow(nn.Module):
    """Bijection between a standard-normal base space and the target space.

    forward maps base samples Z (plus context) to targets Y; inverse maps back.
    log_prob follows the change-of-variables formula.
    """

    def __init__(self, config: FlowConfig, dtype=torch.float64):
        super().__init__()
        self.config = config
        self.dtype = dtype
        layers = []
        for i in range(config.depth):
            layers.append(CouplingLayer(config.dim, config.context_dim, config.hidden,
                                        parity=i % 2, dtype=dtype))
            layers.append(ActNorm(config.dim, dtype=dtype))
            layers.append(LuLinear(config.dim, dtype=dtype))
        layers.append(CouplingLayer(config.dim, config.context_dim, config.hidden,
                                    parity=config.depth % 2, dtype=dtype))
        self.layers = nn.ModuleList(layers)

    def _check_context(self, batch, context):
        if self.config.context_dim == 0:
            return None
        if context is None:
            raise ValueError("flow requires a context vector")
        if context.shape[-1] != self.config.context_dim:
            raise ValueError(
                f"context dim {context.shape[-1]} != configured {self.config.context_dim}"
            )
        if context.dim() == 1:
            context = context.unsqueeze(0)
        if context.shape[0] == 1 and batch > 1:
            context = context.expand(batch, -1)
        return context

    def forward(self, z, context=None):
        z = torch.atleast_2d(z)
        context = self._check_context(z.shape[0], context)
        y = z
        logdet = z.new_zeros(z.shape[0])
        for i, layer in enumerate(self.layers):
            y, ld = layer.forward(y, context)
            if not torch.isfinite(y).all():
                raise FlowNumericsError(f"non-finite output of layer {i} ({type(layer).__name__})")
            logdet = logdet + ld
        return y, logdet

    def inverse(self, y, context=None):
        y = torch.atleast_2d(y)
        context = self._check_context(y.shape[0], context)
        z = y
        logdet = y.new_zeros(y.shape[0])
        for i, layer in zip(range(len(self.layers) - 1, -1, -1), reversed(self.layers)):
            z, ld = layer.inverse(z, context)
            if not torch.isfinite(z).all():
                raise FlowNumericsError(f"non-finite output of layer {i} ({type(layer).__name__})")
            logdet = logdet + ld
        return z, logdet

    def base_log_prob(self, z):
        return -0.5 * (z**2).sum(dim=-1) - 0.5 * self.config.dim * math.log(2.0 * math.pi)

    def log_prob(self, y, context=None):
        z, logdet_inv = self.inverse(y, context)
        return self.base_log_prob(z) + logdet_inv

    def sample(self, n, context=None, generator=None):
        """n samples with their log-densities; reproducible via the generator."""
        z = torch.randn(n, self.config.dim, generator=generator, dtype=self.dtype)
        y, logdet = self.forward(z, context)
        return y, self.base_log_prob(z) - logdet
