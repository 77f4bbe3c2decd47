"""Convolutional VAE over SDF grids with a normalizing-flow latent prior.

The encoder maps an SDF (normalized to [-1, 1]) to a Gaussian over the
environment embedding h; the decoder reconstructs the SDF from h and is used
only in the training loss and for visualization. The learned flow prior over h
supplies the negative-log-density OOD score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .flow import ConditionalFlow, FlowConfig

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
SDF_CLAMP = 1.0  # meters

CHANNELS_2D = (16, 32, 64, 128)
CHANNELS_3D = (8, 16, 32, 64)


@dataclass(frozen=True)
class VaeConfig:
    grid_dim: int  # 2 or 3
    grid_size: int = 64
    h_dim: int = 64
    prior_depth: int = 4

    def __post_init__(self):
        if self.grid_dim not in (2, 3):
            raise ValueError("grid_dim must be 2 or 3")
        if self.grid_size % 16 != 0:
            raise ValueError("grid_size must be divisible by 16 (four stride-2 convs)")
        if self.h_dim < 2:
            raise ValueError("h_dim must be >= 2")

    @property
    def channels(self) -> tuple[int, ...]:
        return CHANNELS_2D if self.grid_dim == 2 else CHANNELS_3D

    @property
    def final_size(self) -> int:
        return self.grid_size // 16

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "VaeConfig":
        return VaeConfig(**d)


def normalize_sdf(values: np.ndarray) -> np.ndarray:
    """Clamp SDF values to +/-1 m; far-field magnitudes carry no signal."""
    return np.clip(values, -SDF_CLAMP, SDF_CLAMP)


class SdfEncoder(nn.Module):
    """Four stride-2 convolutions (kernel 3) then a fully connected layer
    producing the mean and log-variance of q(h|E)."""

    def __init__(self, config: VaeConfig, dtype=torch.float64):
        super().__init__()
        conv = nn.Conv2d if config.grid_dim == 2 else nn.Conv3d
        chans = (1,) + config.channels
        self.convs = nn.ModuleList(
            conv(chans[i], chans[i + 1], kernel_size=3, stride=2, padding=1, dtype=dtype)
            for i in range(4)
        )
        # 64 -> 32 -> 16 -> 8 -> 4 spatial cells per axis.
        final = config.grid_size
        for _ in range(4):
            final = (final + 1) // 2
        assert final == config.final_size, "conv stack does not reduce to grid_size // 16"
        flat = config.channels[-1] * config.final_size**config.grid_dim
        self.fc = nn.Linear(flat, 2 * config.h_dim, dtype=dtype)
        self.act = nn.ReLU()

    def forward(self, e):
        x = e
        for conv in self.convs:
            x = self.act(conv(x))
        mu, logvar = self.fc(x.flatten(1)).chunk(2, dim=-1)
        return mu, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


class SdfDecoder(nn.Module):
    """Fully connected layer then four stride-2 transposed convolutions."""

    def __init__(self, config: VaeConfig, dtype=torch.float64):
        super().__init__()
        self.config = config
        deconv = nn.ConvTranspose2d if config.grid_dim == 2 else nn.ConvTranspose3d
        chans = config.channels[::-1] + (1,)
        flat = chans[0] * config.final_size**config.grid_dim
        self.fc = nn.Linear(config.h_dim, flat, dtype=dtype)
        self.deconvs = nn.ModuleList(
            deconv(chans[i], chans[i + 1], kernel_size=3, stride=2, padding=1,
                   output_padding=1, dtype=dtype)
            for i in range(4)
        )
        self.act = nn.ReLU()

    def forward(self, h):
        cfg = self.config
        x = self.fc(h)
        shape = (-1, cfg.channels[-1]) + (cfg.final_size,) * cfg.grid_dim
        x = x.reshape(shape)
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)
            if i < 3:
                x = self.act(x)
        return x


class EnvironmentVae(nn.Module):
    """Encoder + decoder + flow prior over the environment embedding."""

    def __init__(self, config: VaeConfig, dtype=torch.float64):
        super().__init__()
        self.config = config
        self.dtype = dtype
        self.encoder = SdfEncoder(config, dtype=dtype)
        self.decoder = SdfDecoder(config, dtype=dtype)
        self.prior = ConditionalFlow(
            FlowConfig(dim=config.h_dim, depth=config.prior_depth, context_dim=0),
            dtype=dtype,
        )

    def encode(self, e, generator=None):
        """Gaussian parameters and an embedding sample.

        With a generator, h is a reparameterized sample; without one, h is the
        posterior mean (deterministic mode, used at control time).
        """
        mu, logvar = self.encoder(e)
        if generator is None:
            return mu, logvar, mu
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu, logvar, mu + torch.exp(0.5 * logvar) * eps

    def decode(self, h):
        return self.decoder(h)

    def gaussian_log_prob(self, h, mu, logvar):
        var = torch.exp(logvar)
        return (-0.5 * ((h - mu) ** 2 / var + logvar + math.log(2.0 * math.pi))).sum(dim=-1)

    def loss(self, e, mu, logvar, h, recon):
        """Per-sample single-draw VAE objective.

        Reconstruction squared error is divided by the total SDF
        dimensionality; the KL is estimated as log q(h|E) - log p(h) at the
        drawn h, with the flow prior supplying log p.
        """
        n_cells = float(np.prod(e.shape[1:]))
        recon_term = ((recon - e) ** 2).flatten(1).sum(dim=-1) / n_cells
        log_q = self.gaussian_log_prob(h, mu, logvar)
        log_p = self.prior.log_prob(h)
        return recon_term + log_q - log_p

    def ood_score(self, h):
        """Negative prior log-density per latent dimension (higher = more OOD)."""
        return -self.prior.log_prob(h) / self.config.h_dim


def sdf_to_tensor(values: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    """Normalized SDF as a (1, 1, size, ...) tensor ready for the encoder."""
    arr = normalize_sdf(np.asarray(values, dtype=np.float64))
    return torch.as_tensor(arr, dtype=dtype).unsqueeze(0).unsqueeze(0)
