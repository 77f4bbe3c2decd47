"""The conditional control-sequence posterior and its training loop.

A context MLP fuses (x0, xG, h) into the conditioning vector for the control
sequence flow. Training iterates: sample perturbed control sequences from the
flow, roll them out, weight them by an exponentiated-cost / density ratio, and
take one gradient step on the weighted negative log-likelihood plus the VAE
objective (until the VAE freezes).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, asdict

import numpy as np
import torch
from scipy.special import logsumexp
from torch import nn

from . import dynamics
from .dataset import DatasetDir
from .flow import ConditionalFlow, FlowConfig, FlowNumericsError
from .seeding import rng_from, torch_generator_from
from .vae import EnvironmentVae, VaeConfig, normalize_sdf


class ContextNet(nn.Module):
    """Single-hidden-layer MLP mapping (x0, xG, h) to the context vector C."""

    def __init__(self, state_dim, h_dim, c_dim, hidden=256, dtype=torch.float64):
        super().__init__()
        self.state_dim = state_dim
        self.net = nn.Sequential(
            nn.Linear(2 * state_dim + h_dim, hidden, dtype=dtype),
            nn.ReLU(),
            nn.Linear(hidden, c_dim, dtype=dtype),
        )

    def forward(self, x0, x_goal, h):
        return self.net(torch.cat([x0, x_goal, h], dim=-1))


class PosteriorModels(nn.Module):
    """All trainable pieces: VAE (with flow prior), context net, control flow."""

    def __init__(self, system: str, vae: EnvironmentVae, context_net: ContextNet,
                 flow: ConditionalFlow, horizon: int, b_ood: float):
        super().__init__()
        self.system = system
        self.spec = dynamics.system_spec(system)
        self.vae = vae
        self.context_net = context_net
        self.flow = flow
        self.horizon = horizon
        self.b_ood = b_ood

    @property
    def dtype(self):
        return self.flow.dtype

    def encode_sdf(self, sdf_values: np.ndarray, generator=None):
        """Environment embedding from raw SDF values (deterministic without a
        generator)."""
        e = torch.as_tensor(normalize_sdf(sdf_values), dtype=self.dtype)
        e = e.unsqueeze(0).unsqueeze(0)
        mu, logvar, h = self.vae.encode(e, generator=generator)
        return h[0]

    def context(self, x0: np.ndarray, x_goal: np.ndarray, h: torch.Tensor):
        x0_t = torch.as_tensor(np.asarray(x0), dtype=self.dtype)
        xg_t = torch.as_tensor(np.asarray(x_goal), dtype=self.dtype)
        if h.dim() == 1:
            return self.context_net(x0_t, xg_t, h)
        batch = h.shape[0]
        return self.context_net(
            x0_t.expand(batch, -1) if x0_t.dim() == 1 else x0_t,
            xg_t.expand(batch, -1) if xg_t.dim() == 1 else xg_t,
            h,
        )

    def flow_prior_log_prob(self, h: torch.Tensor) -> torch.Tensor:
        """log p(h) under the VAE's flow prior; scalar for a single embedding."""
        if h.dim() == 1:
            return self.vae.prior.log_prob(h.unsqueeze(0))[0]
        return self.vae.prior.log_prob(h)

    def ood_score(self, h: torch.Tensor) -> torch.Tensor:
        """Per-dimension negative prior log-density (higher = more OOD)."""
        return -self.flow_prior_log_prob(h) / self.vae.config.h_dim


def default_h_dim(system: str) -> int:
    return 64 if system == "planar" else 256


def default_b_ood(system: str) -> float:
    return 1.0 / 64.0 if system == "planar" else 1.0 / 1024.0


def default_samples_per_env(system: str) -> int:
    return 64 if system == "planar" else 32


def build_models(
    system: str,
    grid_size: int = 64,
    horizon: int = dynamics.HORIZON,
    h_dim: int | None = None,
    c_dim: int | None = None,
    flow_depth: int = 10,
    prior_depth: int = 4,
    hidden: int = 128,
    b_ood: float | None = None,
    dtype=torch.float32,
) -> PosteriorModels:
    spec = dynamics.system_spec(system)
    h_dim = default_h_dim(system) if h_dim is None else h_dim
    c_dim = h_dim if c_dim is None else c_dim
    b_ood = default_b_ood(system) if b_ood is None else b_ood
    vae = EnvironmentVae(
        VaeConfig(grid_dim=spec.position_dim, grid_size=grid_size, h_dim=h_dim,
                  prior_depth=prior_depth),
        dtype=dtype,
    )
    context_net = ContextNet(spec.state_dim, h_dim, c_dim, dtype=dtype)
    flow = ConditionalFlow(
        FlowConfig(dim=horizon * spec.control_dim, depth=flow_depth,
                   context_dim=c_dim, hidden=hidden),
        dtype=dtype,
    )
    return PosteriorModels(system, vae, context_net, flow, horizon, b_ood)


def sample_perturbed(
    flow: ConditionalFlow,
    contexts: torch.Tensor | None,
    sigma_eps: float,
    n: int,
    generator: torch.Generator | None = None,
    max_retries: int = 3,
):
    """Perturbed posterior samples and their re-inverted log-densities.

    Draws Z ~ N(0, I), maps U = f(Z, C) + eps with eps ~ N(0, sigma_eps^2 I),
    and evaluates log q(U|C) at the perturbed points. The samples are detached;
    gradients flow only through the density evaluation.

    contexts: (B, c_dim) or None for an unconditional flow; returns
    (U (B, n, dim) detached, log_q (B, n)).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    batch = 1 if contexts is None else contexts.shape[0]
    dim = flow.config.dim
    ctx_rep = None if contexts is None else contexts.repeat_interleave(n, dim=0)
    last_err = None
    for _ in range(max_retries):
        with torch.no_grad():
            z = torch.randn(batch * n, dim, generator=generator, dtype=flow.dtype)
            try:
                u, _ = flow.forward(z, ctx_rep)
            except FlowNumericsError as err:
                last_err = err
                continue
            if sigma_eps > 0:
                u = u + sigma_eps * torch.randn(u.shape, generator=generator, dtype=flow.dtype)
        try:
            log_q = flow.log_prob(u, ctx_rep)
        except FlowNumericsError as err:
            last_err = err
            continue
        if torch.isfinite(log_q).all():
            return u.view(batch, n, dim), log_q.view(batch, n)
        last_err = FlowNumericsError("non-finite sample log-density")
    raise FlowNumericsError(f"sampling failed after {max_retries} retries: {last_err}")


def importance_weights(log_q, costs, alpha: float, beta: float) -> np.ndarray:
    """Per-sample weights, computed in log space over the last axis.

    log w~_i = -beta * log q_i - J_i / alpha; weights are normalized by the
    sample mean so that mean(w) == 1. Rows whose weights all vanish (e.g. every
    rollout has infinite cost) fall back to uniform weights with a warning.
    """
    log_q = np.asarray(log_q, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n = log_q.shape[-1]
    log_w = -beta * log_q - costs / alpha
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    with np.errstate(divide="ignore"):
        norm = logsumexp(log_w, axis=-1, keepdims=True) - math.log(n)
    degenerate = ~np.isfinite(norm[..., 0])
    if degenerate.any():
        warnings.warn("all sample weights vanished; falling back to uniform weights")
        log_w = np.where(degenerate[..., None], 0.0, log_w)
        norm = np.where(degenerate[..., None], 0.0, norm)
    w = np.exp(log_w - norm)
    # one more pass removes logsumexp roundoff so the sample mean is exactly 1
    return w / w.mean(axis=-1, keepdims=True)


def flow_nll_loss(log_q: torch.Tensor, weights: np.ndarray) -> torch.Tensor:
    """Weighted negative log-likelihood, summed over samples (last axis).

    Weights are treated as constants: no gradient flows through them.
    """
    w = torch.as_tensor(np.asarray(weights), dtype=log_q.dtype)
    return -(w * log_q).sum(dim=-1)


@dataclass(frozen=True)
class TrainSchedule:
    """Training hyperparameters and their epoch schedules."""

    epochs: int = 1000
    lr: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 50
    alpha_start: float = 1.0
    alpha_end: float = 500.0
    beta: float = 1.0
    vae_weight: float = 5.0  # the scalar multiplying the VAE loss
    vae_epochs: int = 100  # VAE (incl. prior) frozen after this many epochs
    samples_per_env: int = 64
    batch_envs: int = 16
    seed: int = 0
    # Truncated importance sampling: per-sample weights are capped at this
    # multiple of the mean and renormalized. Unclipped weights concentrate on
    # one sample (degenerate single-point likelihood fits); see the ledger.
    weight_clip: float | None = 8.0
    grad_clip: float | None = 10.0

    def __post_init__(self):
        if self.epochs < 1 or self.samples_per_env < 1 or self.batch_envs < 1:
            raise ValueError("epochs, samples_per_env, batch_envs must be >= 1")
        if self.alpha_start <= 0 or self.alpha_end <= 0 or self.beta < 0:
            raise ValueError("alpha must be > 0 and beta >= 0")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise ValueError("bad learning-rate schedule")

    def alpha(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.alpha_start
        frac = epoch / (self.epochs - 1)
        return self.alpha_start + (self.alpha_end - self.alpha_start) * frac

    def sigma_eps(self, epoch: int) -> float:
        return max(0.0, 1.0 - (epoch + 1) / self.epochs)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def scaled_to(self, epochs: int) -> "TrainSchedule":
        """Proportionally compress the epoch-indexed schedules."""
        from dataclasses import replace

        ratio = epochs / self.epochs
        return replace(
            self,
            epochs=epochs,
            lr_decay_every=max(1, round(self.lr_decay_every * ratio)),
            vae_epochs=max(1, round(self.vae_epochs * ratio)),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainSchedule":
        return TrainSchedule(**d)


LOG_COLUMNS = ("epoch", "loss_flow", "loss_vae", "mean_best_cost", "sigma_eps", "alpha", "lr")


@dataclass
class _EnvCache:
    sdf_tensors: list | None
    sdf_grids: list
    starts: list
    goals: list


def _load_env_cache(dataset: DatasetDir, dtype, cache_limit_cells=50_000_000) -> _EnvCache:
    n_cells = dataset.meta.grid_size ** dataset.meta.grid_dim
    cache_tensors = n_cells * len(dataset) <= cache_limit_cells
    sdf_tensors = [] if cache_tensors else None
    grids, starts, goals = [], [], []
    for i in range(len(dataset)):
        rec = dataset.load(i)
        grids.append(rec.sdf())
        starts.append(rec.starts)
        goals.append(rec.goals)
        if cache_tensors:
            sdf_tensors.append(torch.as_tensor(normalize_sdf(rec.sdf_values), dtype=dtype))
    return _EnvCache(sdf_tensors, grids, starts, goals)


def _batch_sdf_tensor(cache: _EnvCache, dataset: DatasetDir, idx, dtype):
    if cache.sdf_tensors is not None:
        return torch.stack([cache.sdf_tensors[i] for i in idx]).unsqueeze(1)
    arrs = [normalize_sdf(dataset.load(i).sdf_values) for i in idx]
    return torch.as_tensor(np.stack(arrs), dtype=dtype).unsqueeze(1)


def make_optimizer(models: PosteriorModels, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(models.parameters(), lr=lr, eps=1e-8)


def train_posterior(
    dataset: DatasetDir,
    models: PosteriorModels,
    schedule: TrainSchedule,
    start_epoch: int = 0,
    end_epoch: int | None = None,
    optimizer: torch.optim.Adam | None = None,
    log_callback=None,
) -> tuple[torch.optim.Adam, list[dict]]:
    """Run epochs [start_epoch, end_epoch) of the training loop.

    Per environment and epoch: encode the SDF, compute the VAE loss (while the
    VAE is unfrozen), build the context from a randomly chosen start/goal pair,
    sample perturbed control sequences, roll them out, weight them, and take
    one optimizer step per minibatch of environments. Deterministic for a fixed
    (schedule.seed, epoch); resuming at an epoch boundary reproduces an
    uninterrupted run exactly.
    """
    spec = models.spec
    params = dynamics.default_cost_params(models.system)
    end_epoch = schedule.epochs if end_epoch is None else end_epoch
    cache = _load_env_cache(dataset, models.dtype)
    n_envs = len(dataset)
    if optimizer is None:
        optimizer = make_optimizer(models, schedule.lr)

    rows = []
    for epoch in range(start_epoch, end_epoch):
        vae_active = epoch < schedule.vae_epochs
        models.vae.requires_grad_(vae_active)
        models.train()
        lr = schedule.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        alpha = schedule.alpha(epoch)
        sigma_eps = schedule.sigma_eps(epoch)
        rng = rng_from(schedule.seed, "train-epoch", epoch)
        gen = torch_generator_from(schedule.seed, "train-epoch", epoch)

        order = rng.permutation(n_envs)
        ep_flow, ep_vae, ep_best, n_batches = 0.0, 0.0, 0.0, 0
        for lo in range(0, n_envs, schedule.batch_envs):
            idx = order[lo : lo + schedule.batch_envs]
            b = len(idx)
            pair_idx = rng.integers(0, dataset.meta.n_pairs, size=b)
            x0 = np.stack([cache.starts[i][j] for i, j in zip(idx, pair_idx)])
            xg = np.stack([cache.goals[i][j] for i, j in zip(idx, pair_idx)])

            e = _batch_sdf_tensor(cache, dataset, idx, models.dtype)
            mu, logvar, h = models.vae.encode(e, generator=gen)
            if not vae_active:
                h = h.detach()
                loss_vae = torch.zeros((), dtype=models.dtype)
            else:
                recon = models.vae.decode(h)
                loss_vae = models.vae.loss(e, mu, logvar, h, recon).mean()

            x0_t = torch.as_tensor(x0, dtype=models.dtype)
            xg_t = torch.as_tensor(xg, dtype=models.dtype)
            contexts = models.context_net(x0_t, xg_t, h)
            u, log_q = sample_perturbed(
                models.flow, contexts, sigma_eps, schedule.samples_per_env, generator=gen
            )

            r = schedule.samples_per_env
            u_np = u.detach().cpu().numpy().astype(np.float64)
            controls = u_np.reshape(b * r, models.horizon, spec.control_dim)
            x0_rep = np.repeat(x0, r, axis=0)
            states, valid = dynamics.rollout_batch(models.system, x0_rep, controls)
            costs = np.empty((b, r), dtype=np.float64)
            for k, env_i in enumerate(idx):
                sl = slice(k * r, (k + 1) * r)
                costs[k] = dynamics.trajectory_cost_batch(
                    states[sl], controls[sl], cache.sdf_grids[env_i], xg[k],
                    models.system, params, valid=valid[sl],
                )

            weights = importance_weights(log_q.detach().cpu().numpy(), costs,
                                         alpha, schedule.beta)
            if schedule.weight_clip is not None:
                weights = np.minimum(weights, schedule.weight_clip)
                weights = weights / weights.mean(axis=-1, keepdims=True)
            loss_flow = flow_nll_loss(log_q, weights).mean()
            loss = loss_flow + schedule.vae_weight * loss_vae if vae_active else loss_flow
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, envs {idx.tolist()}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if schedule.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(models.parameters(), schedule.grad_clip)
            optimizer.step()

            ep_flow += float(loss_flow.detach())
            ep_vae += float(loss_vae.detach())
            ep_best += float(np.min(costs, axis=1).mean())
            n_batches += 1

        row = {
            "epoch": epoch,
            "loss_flow": ep_flow / n_batches,
            "loss_vae": ep_vae / n_batches,
            "mean_best_cost": ep_best / n_batches,
            "sigma_eps": sigma_eps,
            "alpha": alpha,
            "lr": lr,
        }
        rows.append(row)
        if log_callback is not None:
            log_callback(row)
    return optimizer, rows
