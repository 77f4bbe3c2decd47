import numpy as np
import torch

torch.set_num_threads(1)


def randomize_flow(flow, scale=0.3, seed=0):
    """Give a freshly built (identity) flow nontrivial, well-conditioned
    parameters; matrix perturbations shrink with fan-in."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in flow.parameters():
            s = scale / max(1, p.shape[-1]) ** 0.5 if p.dim() >= 2 else scale
            p.add_(s * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return flow


def numeric_jacobian(fn, z, eps=1e-6):
    """Central-difference Jacobian of fn: R^d -> R^d at z (1D tensor)."""
    d = z.numel()
    jac = torch.zeros(d, d, dtype=z.dtype)
    for j in range(d):
        zp, zm = z.clone(), z.clone()
        zp[j] += eps
        zm[j] -= eps
        jac[:, j] = (fn(zp) - fn(zm)) / (2 * eps)
    return jac


def grad_check(loss_fn, params, eps=1e-5, rel_tol=1e-3, max_probes=20, seed=0):
    """Central finite differences against autograd for a scalar loss.

    Probes up to max_probes randomly chosen parameter entries per tensor and
    returns the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for p, g in zip(params, grads):
        if g is None:
            continue
        flat = p.detach().reshape(-1)
        n = flat.numel()
        idx = rng.choice(n, size=min(max_probes, n), replace=False)
        for j in idx:
            with torch.no_grad():
                orig = flat[j].item()
                flat[j] = orig + eps
                up = loss_fn().item()
                flat[j] = orig - eps
                down = loss_fn().item()
                flat[j] = orig
            fd = (up - down) / (2 * eps)
            an = g.reshape(-1)[j].item()
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
            assert abs(fd - an) / denom < rel_tol, (
                f"grad mismatch: fd={fd:.6g} autograd={an:.6g}"
            )
    return worst
