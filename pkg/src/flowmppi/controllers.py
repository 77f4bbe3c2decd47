"""MPC step implementations and the closed-loop trial runner.

MPPI perturbs a shifted nominal control sequence with Gaussian noise and
updates it by an exponentiated-cost weighted average. FlowMPPI draws half of
its samples from the learned control-sequence posterior, scoring them with a
latent-space perturbation penalty. FlowMPPIProject additionally performs
gradient-descent projection of the environment embedding before each step.
iCEM is an elite-refit sampler using temporally colored noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import dynamics
from .envgen import Task
from .flow import FlowNumericsError
from .posterior import (PosteriorModels, flow_nll_loss, importance_weights,
                        sample_perturbed)
from .seeding import rng_from, torch_generator_from

TRIAL_LENGTH = 100


@dataclass(frozen=True)
class ControllerConfig:
    """Controller hyperparameters (per-system defaults via default_config)."""

    k: int = 512  # rollout budget per timestep
    lambda_: float = 1.0
    sigma: float = 0.9  # control-noise covariance (diagonal value)
    iterations: int = 1
    # One candidate keeps the shifted nominal unperturbed; stabilizes the
    # closed loop near the goal without spending extra budget.
    retain_nominal: bool = True
    # Score perturbations with the published inner-product penalty terms. Off
    # by default: the trajectory cost already carries the exact control prior,
    # and the extra terms inject enough selection noise to sink the
    # obstacle-free success-rate gate (see decisions ledger).
    use_perturbation_penalties: bool = False
    # iCEM
    noise_exponent: float = 2.5
    elite_frac: float = 0.1
    kept_elite_frac: float = 0.3
    momentum: float = 0.1
    # projection
    project_steps_init: int = 10
    project_lr: float = 1e-2
    project_alpha: float = 1.0
    project_beta: float = 1.0
    project_sigma_eps: float = 0.0
    # projection-loss ablation switches
    project_use_ood: bool = True
    project_use_flow: bool = True

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("sample budget K must be >= 2")
        if self.lambda_ <= 0:
            raise ValueError("temperature lambda must be positive")
        if not 0 < self.elite_frac <= 1 or not 0 < self.kept_elite_frac <= 1:
            raise ValueError("elite fractions must be in (0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


_TABLE_DEFAULTS = {
    ("mppi", "planar"): dict(lambda_=1.0, sigma=0.9, iterations=1),
    ("mppi", "quadrotor"): dict(lambda_=1.0, sigma=0.5, iterations=4),
    ("icem", "planar"): dict(sigma=0.75, noise_exponent=2.5, elite_frac=0.1,
                             kept_elite_frac=0.3, iterations=4, momentum=0.1),
    ("icem", "quadrotor"): dict(sigma=0.5, noise_exponent=3.0, elite_frac=0.1,
                                kept_elite_frac=0.5, iterations=4, momentum=0.1),
    ("flowmppi", "planar"): dict(lambda_=1.0, sigma=1.0, iterations=1),
    ("flowmppi", "quadrotor"): dict(lambda_=1.0, sigma=0.75, iterations=2),
}
_TABLE_DEFAULTS[("flowmppi_project", "planar")] = _TABLE_DEFAULTS[("flowmppi", "planar")]
_TABLE_DEFAULTS[("flowmppi_project", "quadrotor")] = _TABLE_DEFAULTS[("flowmppi", "quadrotor")]


def default_config(controller: str, system: str, k: int = 512) -> ControllerConfig:
    try:
        overrides = _TABLE_DEFAULTS[(controller, system)]
    except KeyError:
        raise ValueError(f"no defaults for {controller!r} on {system!r}") from None
    return ControllerConfig(k=k, **overrides)


def shift(u: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Advance the nominal plan one step; the freed last slot is sampled from
    N(0, sigma I)."""
    out = np.empty_like(u)
    out[:-1] = u[1:]
    out[-1] = rng.normal(0.0, np.sqrt(sigma), size=u.shape[-1]) if sigma > 0 else 0.0
    return out


def softmin_weights(scores: np.ndarray, lambda_: float) -> np.ndarray:
    """Exponentiated-cost weights with the min-score baseline; sums to 1."""
    baseline = np.min(scores[np.isfinite(scores)])
    w = np.exp(-(scores - baseline) / lambda_)
    w[~np.isfinite(scores)] = 0.0
    return w / w.sum()


@dataclass
class StepDiagnostics:
    rollouts: int = 0
    min_cost: float = np.inf
    best_origin: str = ""  # "control" or "flow" for FlowMPPI
    fallback: bool = False
    all_invalid: bool = False


def _evaluate(task: Task, x: np.ndarray, candidates: np.ndarray,
              params: dynamics.CostParams):
    states, valid = dynamics.rollout_batch(task.system, x, candidates)
    costs = dynamics.trajectory_cost_batch(
        states, candidates, task.sdf, task.x_goal, task.system, params, valid=valid
    )
    return costs


def control_perturbation_cost(candidates: np.ndarray, eps: np.ndarray,
                              lambda_: float, sigma: float) -> np.ndarray:
    """Published control-space perturbation penalty: lambda * sum_t u_t' S^-1 eps_t."""
    return lambda_ * (candidates * eps).sum(axis=(1, 2)) / sigma


def latent_perturbation_cost(eps_z: np.ndarray, z_nom: np.ndarray,
                             lambda_: float) -> np.ndarray:
    """Published latent-space perturbation penalty: lambda * eps_Z . (Z - eps_Z);
    zero when the sample equals the nominal in latent space."""
    return lambda_ * (eps_z * (z_nom[None] - eps_z)).sum(axis=-1)


def mppi_update(
    task: Task,
    x: np.ndarray,
    u_nom: np.ndarray,
    cfg: ControllerConfig,
    rng: np.random.Generator,
    n_samples: int,
    params: dynamics.CostParams,
    diag: StepDiagnostics,
) -> np.ndarray:
    """One MPPI iteration: perturb, roll out, softmin-average."""
    horizon, du = u_nom.shape
    eps = rng.standard_normal((n_samples, horizon, du)) * np.sqrt(cfg.sigma)
    if cfg.retain_nominal:
        eps[0] = 0.0
    candidates = u_nom[None] + eps
    costs = _evaluate(task, x, candidates, params)
    diag.rollouts += n_samples
    scores = costs
    if cfg.use_perturbation_penalties:
        scores = scores + control_perturbation_cost(candidates, eps, cfg.lambda_, cfg.sigma)
    if not np.isfinite(scores).any():
        diag.all_invalid = True
        return u_nom
    diag.min_cost = min(diag.min_cost, float(np.min(scores)))
    w = softmin_weights(scores, cfg.lambda_)
    return np.einsum("k,ktd->td", w, candidates)


class MppiController:
    """Gaussian-perturbation MPPI with the Table-5 update rule."""

    name = "mppi"

    def __init__(self, system: str, cfg: ControllerConfig,
                 params: dynamics.CostParams | None = None,
                 horizon: int = dynamics.HORIZON):
        self.system = system
        self.cfg = cfg
        self.params = params or dynamics.default_cost_params(system)
        self.horizon = horizon
        self.spec = dynamics.system_spec(system)

    def reset(self, task: Task, seed: int) -> None:
        self.task = task
        self.rng = rng_from(seed, "mppi")
        self.u_nom = np.zeros((self.horizon, self.spec.control_dim))

    def plan(self, x: np.ndarray, step_index: int) -> tuple[np.ndarray, StepDiagnostics]:
        diag = StepDiagnostics()
        u = shift(self.u_nom, self.rng, self.cfg.sigma)
        per_iter = max(2, self.cfg.k // self.cfg.iterations)
        for _ in range(self.cfg.iterations):
            u = mppi_update(self.task, x, u, self.cfg, self.rng, per_iter,
                            self.params, diag)
        self.u_nom = u
        return u, diag


def powerlaw_noise(exponent: float, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with power spectrum ~ 1/f^exponent along the last axis,
    normalized to unit variance. Exponent 0 reproduces white noise exactly
    (flat expected power at every frequency, endpoints included)."""
    samples = shape[-1]
    f = np.fft.rfftfreq(samples)
    s_scale = f.copy()
    if len(s_scale) > 1:
        s_scale[0] = s_scale[1]  # clamp DC at the lowest real frequency
    s_scale = s_scale ** (-exponent / 2.0)

    spec_shape = shape[:-1] + (len(f),)
    sr = rng.standard_normal(spec_shape) * s_scale
    si = rng.standard_normal(spec_shape) * s_scale
    # DC (and Nyquist for even lengths) must be real; carry their full power
    # in the real part so the expected spectrum stays proportional to s^2.
    si[..., 0] = 0.0
    sr[..., 0] *= np.sqrt(2.0)
    if samples % 2 == 0:
        si[..., -1] = 0.0
        sr[..., -1] *= np.sqrt(2.0)
    # per-sample variance of the inverse transform, for exact normalization
    power = 2.0 * s_scale**2
    interior = power[1:-1] if samples % 2 == 0 else power[1:]
    var = (power[0] + 2.0 * interior.sum()
           + (power[-1] if samples % 2 == 0 else 0.0)) / samples**2
    y = np.fft.irfft(sr + 1j * si, n=samples, axis=-1) / np.sqrt(var)
    return y


class IcemController:
    """Improved CEM: colored-noise sampling, elite refits with momentum, and
    kept elites carried across iterations and timesteps."""

    name = "icem"

    def __init__(self, system: str, cfg: ControllerConfig,
                 params: dynamics.CostParams | None = None,
                 horizon: int = dynamics.HORIZON):
        self.system = system
        self.cfg = cfg
        self.params = params or dynamics.default_cost_params(system)
        self.horizon = horizon
        self.spec = dynamics.system_spec(system)

    def reset(self, task: Task, seed: int) -> None:
        self.task = task
        self.rng = rng_from(seed, "icem")
        self.mean = np.zeros((self.horizon, self.spec.control_dim))
        self.kept: np.ndarray | None = None

    def plan(self, x: np.ndarray, step_index: int) -> tuple[np.ndarray, StepDiagnostics]:
        cfg, du = self.cfg, self.spec.control_dim
        diag = StepDiagnostics()
        mean = shift(self.mean, self.rng, cfg.sigma)
        std = np.full((self.horizon, du), np.sqrt(cfg.sigma))
        if self.kept is not None:
            self.kept = np.stack([shift(seq, self.rng, cfg.sigma) for seq in self.kept])
        per_iter = max(2, cfg.k // cfg.iterations)
        best_seq, best_cost = mean, np.inf
        for _ in range(cfg.iterations):
            n_kept = 0 if self.kept is None else min(len(self.kept), per_iter - 1)
            n_fresh = per_iter - n_kept
            noise = powerlaw_noise(cfg.noise_exponent, (n_fresh, du, self.horizon), self.rng)
            fresh = mean[None] + np.transpose(noise, (0, 2, 1)) * std[None]
            candidates = fresh if n_kept == 0 else np.concatenate([fresh, self.kept[:n_kept]])
            costs = _evaluate(self.task, x, candidates, self.params)
            diag.rollouts += len(candidates)
            order = np.argsort(costs, kind="stable")
            n_elite = max(1, int(round(cfg.elite_frac * per_iter)))
            elites = candidates[order[:n_elite]]
            elite_costs = costs[order[:n_elite]]
            if np.isfinite(elite_costs[0]) and elite_costs[0] < best_cost:
                best_cost = float(elite_costs[0])
                best_seq = elites[0]
            mean = (1 - cfg.momentum) * elites.mean(axis=0) + cfg.momentum * mean
            std = (1 - cfg.momentum) * elites.std(axis=0) + cfg.momentum * std
            std = np.maximum(std, 1e-6)
            n_keep = max(1, int(round(cfg.kept_elite_frac * n_elite)))
            self.kept = elites[:n_keep]
        diag.min_cost = best_cost
        self.mean = mean
        return best_seq, diag


class FlowMppiController:
    """MPPI whose sample budget is split between control-space perturbations
    and draws from the learned control-sequence posterior."""

    name = "flowmppi"

    def __init__(self, models: PosteriorModels, cfg: ControllerConfig,
                 params: dynamics.CostParams | None = None):
        self.models = models
        self.cfg = cfg
        self.system = models.system
        self.params = params or dynamics.default_cost_params(models.system)
        self.horizon = models.horizon
        self.spec = models.spec

    def reset(self, task: Task, seed: int) -> None:
        self.task = task
        self.rng = rng_from(seed, self.name)
        self.gen = torch_generator_from(seed, self.name)
        self.u_nom = np.zeros((self.horizon, self.spec.control_dim))
        self.models.eval()
        with torch.no_grad():
            self.h = self.models.encode_sdf(task.sdf.values).detach()

    def _context(self, x: np.ndarray) -> torch.Tensor:
        with torch.no_grad():
            return self.models.context(x, self.task.x_goal, self.h).detach()

    def plan(self, x: np.ndarray, step_index: int) -> tuple[np.ndarray, StepDiagnostics]:
        diag = StepDiagnostics()
        u = shift(self.u_nom, self.rng, self.cfg.sigma)
        context = self._context(x)
        budget = self._step_budget()
        per_iter = max(2, budget // self.cfg.iterations)
        for _ in range(self.cfg.iterations):
            u = self._update(x, u, context, per_iter, diag)
        self.u_nom = u
        return u, diag

    def _step_budget(self) -> int:
        return self.cfg.k

    def _update(self, x, u_nom, context, n_samples, diag) -> np.ndarray:
        cfg = self.cfg
        horizon, du = u_nom.shape
        dim = horizon * du
        n_ctrl = n_samples // 2
        n_flow = n_samples - n_ctrl

        u_flat = torch.as_tensor(u_nom.reshape(1, dim), dtype=self.models.dtype)
        try:
            with torch.no_grad():
                z_nom, _ = self.models.flow.inverse(u_flat, context.unsqueeze(0))
            z_nom = z_nom[0].cpu().numpy()
        except FlowNumericsError:
            diag.fallback = True
            return mppi_update(self.task, x, u_nom, cfg, self.rng, n_samples,
                               self.params, diag)

        eps = self.rng.standard_normal((n_ctrl, horizon, du)) * np.sqrt(cfg.sigma)
        if cfg.retain_nominal:
            eps[0] = 0.0
        u_ctrl = u_nom[None] + eps
        with torch.no_grad():
            eps_z = torch.randn(n_flow, dim, generator=self.gen, dtype=self.models.dtype)
            u_flow_t, _ = self.models.flow.forward(eps_z, context.expand(n_flow, -1))
        eps_z = eps_z.cpu().numpy()
        u_flow = u_flow_t.cpu().numpy().reshape(n_flow, horizon, du).astype(np.float64)

        candidates = np.concatenate([u_ctrl, u_flow])
        costs = _evaluate(self.task, x, candidates, self.params)
        diag.rollouts += len(candidates)
        scores = costs
        if cfg.use_perturbation_penalties:
            pen_ctrl = control_perturbation_cost(u_ctrl, eps, cfg.lambda_, cfg.sigma)
            pen_flow = latent_perturbation_cost(eps_z, z_nom, cfg.lambda_)
            scores = scores + np.concatenate([pen_ctrl, pen_flow])
        if not np.isfinite(scores).any():
            diag.all_invalid = True
            return u_nom
        best = int(np.argmin(scores))
        if scores[best] < diag.min_cost:
            diag.min_cost = float(scores[best])
            diag.best_origin = "control" if best < n_ctrl else "flow"
        w = softmin_weights(scores, cfg.lambda_)
        return np.einsum("k,ktd->td", w, candidates)


def project(
    h: torch.Tensor,
    task: Task,
    models: PosteriorModels,
    cfg: ControllerConfig,
    steps: int,
    x_current: np.ndarray,
    rng_gen: torch.Generator,
    n_samples: int,
    params: dynamics.CostParams,
    diag: StepDiagnostics | None = None,
) -> torch.Tensor:
    """Gradient descent on b * OOD score + weighted flow NLL, moving only the
    environment embedding. Sample rollouts are costed in the true environment.

    Returns the last finite iterate if a step produces a non-finite gradient.
    """
    if steps == 0:
        return h
    spec = models.spec
    h_hat = h.detach().clone()
    use_ood, use_flow = cfg.project_use_ood, cfg.project_use_flow
    for _ in range(steps):
        h_var = h_hat.clone().requires_grad_(True)
        loss = torch.zeros((), dtype=models.dtype)
        if use_ood:
            loss = loss + models.b_ood * (-models.flow_prior_log_prob(h_var))
        if use_flow:
            context = models.context(x_current, task.x_goal, h_var)
            u, log_q = sample_perturbed(
                models.flow, context.unsqueeze(0), cfg.project_sigma_eps,
                n_samples, generator=rng_gen,
            )
            controls = u[0].cpu().numpy().reshape(n_samples, models.horizon,
                                                  spec.control_dim).astype(np.float64)
            states, valid = dynamics.rollout_batch(models.system, x_current, controls)
            costs = dynamics.trajectory_cost_batch(
                states, controls, task.sdf, task.x_goal, models.system, params, valid=valid
            )
            if diag is not None:
                diag.rollouts += n_samples
            weights = importance_weights(log_q.detach().cpu().numpy()[0], costs,
                                         cfg.project_alpha, cfg.project_beta)
            loss = loss + flow_nll_loss(log_q[0], weights)
        (grad,) = torch.autograd.grad(loss, h_var)
        if not torch.isfinite(grad).all():
            if diag is not None:
                diag.fallback = True
            break
        h_hat = h_hat - cfg.project_lr * grad
    return h_hat.detach()


class FlowMppiProjectController(FlowMppiController):
    """FlowMPPI preceded by environment-embedding projection; the projection
    consumes half of the per-timestep sample budget."""

    name = "flowmppi_project"

    def reset(self, task: Task, seed: int) -> None:
        super().reset(task, seed)
        self.initialized = False

    def _step_budget(self) -> int:
        return self.cfg.k - self.cfg.k // 2

    def plan(self, x: np.ndarray, step_index: int) -> tuple[np.ndarray, StepDiagnostics]:
        diag = StepDiagnostics()
        proj_budget = self.cfg.k // 2
        if not self.initialized:
            steps = self.cfg.project_steps_init
            per_step = max(1, proj_budget // steps) if steps > 0 else 0
            self.initialized = True
        else:
            steps, per_step = 1, proj_budget
        if steps > 0 and (self.cfg.project_use_ood or self.cfg.project_use_flow):
            self.h = project(self.h, self.task, self.models, self.cfg, steps, x,
                             self.gen, per_step, self.params, diag)
        u, step_diag = super().plan(x, step_index)
        step_diag.rollouts += diag.rollouts
        step_diag.fallback = step_diag.fallback or diag.fallback
        return u, step_diag


class ZeroController:
    """Applies zero controls; useful as a do-nothing baseline in tests."""

    name = "zero"

    def __init__(self, system: str, horizon: int = dynamics.HORIZON):
        self.spec = dynamics.system_spec(system)
        self.horizon = horizon

    def reset(self, task: Task, seed: int) -> None:
        pass

    def plan(self, x, step_index):
        return np.zeros((self.horizon, self.spec.control_dim)), StepDiagnostics()


@dataclass
class TrialResult:
    success: bool
    failure_kind: str | None
    executed_cost: float
    steps: int
    rollouts: int
    wall_time: float
    trajectory: list = field(default_factory=list)


def run_trial(
    task: Task,
    controller,
    seed: int = 0,
    max_steps: int = TRIAL_LENGTH,
    params: dynamics.CostParams | None = None,
    record_trajectory: bool = False,
    budget_limit: int | None = None,
) -> TrialResult:
    """Closed loop: plan, apply the first control, advance, check goal and
    collision. A trial fails on collision, divergence, or timeout."""
    params = params or dynamics.default_cost_params(task.system)
    t0 = time.perf_counter()
    controller.reset(task, seed)
    x = np.asarray(task.x0, dtype=np.float64).copy()
    trajectory = [x.copy()] if record_trajectory else []
    executed_cost = 0.0
    rollouts = 0

    if dynamics.in_collision(task.sdf, x, task.system):
        return TrialResult(False, "collision", 0.0, 0, 0,
                           time.perf_counter() - t0, trajectory)
    if dynamics.goal_reached(x, task.x_goal, task.system, params):
        return TrialResult(True, None, 0.0, 0, 0,
                           time.perf_counter() - t0, trajectory)

    for step_index in range(max_steps):
        plan, diag = controller.plan(x, step_index)
        rollouts += diag.rollouts
        if budget_limit is not None and diag.rollouts > budget_limit:
            raise RuntimeError(
                f"controller used {diag.rollouts} rollouts in one step (limit {budget_limit})"
            )
        u = np.asarray(plan[0], dtype=np.float64)
        try:
            x = dynamics.step(task.system, x, u)
        except dynamics.GimbalLockError:
            return TrialResult(False, "diverged", executed_cost, step_index + 1,
                               rollouts, time.perf_counter() - t0, trajectory)
        if record_trajectory:
            trajectory.append(x.copy())
        if not np.isfinite(x).all():
            return TrialResult(False, "diverged", executed_cost, step_index + 1,
                               rollouts, time.perf_counter() - t0, trajectory)
        executed_cost += dynamics.running_cost(x, u, task.sdf, task.x_goal,
                                               task.system, params)
        if dynamics.in_collision(task.sdf, x, task.system):
            return TrialResult(False, "collision", executed_cost, step_index + 1,
                               rollouts, time.perf_counter() - t0, trajectory)
        if dynamics.goal_reached(x, task.x_goal, task.system, params):
            return TrialResult(True, None, executed_cost, step_index + 1,
                               rollouts, time.perf_counter() - t0, trajectory)
    return TrialResult(False, "timeout", executed_cost, max_steps, rollouts,
                       time.perf_counter() - t0, trajectory)


def make_controller(name: str, system: str, cfg: ControllerConfig,
                    models: PosteriorModels | None = None):
    if name == "mppi":
        return MppiController(system, cfg)
    if name == "icem":
        return IcemController(system, cfg)
    if name in ("flowmppi", "flowmppi_project"):
        if models is None:
            raise ValueError(f"{name} requires a trained checkpoint")
        cls = FlowMppiController if name == "flowmppi" else FlowMppiProjectController
        return cls(models, cfg)
    raise ValueError(f"unknown controller {name!r}")
