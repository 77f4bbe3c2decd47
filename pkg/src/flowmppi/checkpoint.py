"""Single-file checkpoints: named parameter segments plus a JSON meta header.

Segments are stored as little-endian float32 arrays with shape headers (npz
entries); the meta entry carries the model configs, the training schedule and
its progress, and a dataset fingerprint. Optimizer moments are included so
training can resume exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .posterior import PosteriorModels, TrainSchedule, build_models, make_optimizer

CHECKPOINT_FORMAT = 1


def _to_array(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    if arr.dtype.kind == "b":
        return arr.astype(np.uint8)
    return arr.astype("<i8")


@dataclass
class CheckpointState:
    models: PosteriorModels
    schedule: TrainSchedule
    epoch_next: int
    dataset_fingerprint: str
    meta: dict
    optimizer_arrays: dict


def save_checkpoint(
    path: Path,
    models: PosteriorModels,
    schedule: TrainSchedule,
    epoch_next: int,
    dataset_fingerprint: str = "",
    optimizer: torch.optim.Adam | None = None,
) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "system": models.system,
        "horizon": models.horizon,
        "b_ood": models.b_ood,
        "dtype": str(models.dtype).removeprefix("torch."),
        "vae_config": models.vae.config.to_dict(),
        "flow_config": models.flow.config.to_dict(),
        "context_hidden": models.context_net.net[0].out_features,
        "schedule": schedule.to_dict(),
        "epoch_next": epoch_next,
        "dataset_fingerprint": dataset_fingerprint,
    }
    arrays = {"param/" + k: _to_array(v) for k, v in models.state_dict().items()}
    if optimizer is not None:
        state = optimizer.state_dict()
        for idx, entry in state["state"].items():
            for key, value in entry.items():
                arrays[f"adam/{idx}/{key}"] = _to_array(
                    value if torch.is_tensor(value) else torch.tensor(value)
                )
        meta["adam_param_groups"] = [
            {k: v for k, v in g.items() if k != "params"} | {"params": list(g["params"])}
            for g in state["param_groups"]
        ]
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez_compressed(f, **arrays)


def load_checkpoint(path: Path) -> CheckpointState:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format")
        arrays = {k: data[k] for k in data.files if k != "meta"}

    dtype = getattr(torch, meta["dtype"])
    flow_cfg = meta["flow_config"]
    vae_cfg = meta["vae_config"]
    models = build_models(
        meta["system"],
        grid_size=vae_cfg["grid_size"],
        horizon=meta["horizon"],
        h_dim=vae_cfg["h_dim"],
        c_dim=flow_cfg["context_dim"],
        flow_depth=flow_cfg["depth"],
        prior_depth=vae_cfg["prior_depth"],
        hidden=flow_cfg["hidden"],
        b_ood=meta["b_ood"],
        dtype=dtype,
    )
    state_dict = {}
    for key, arr in arrays.items():
        if not key.startswith("param/"):
            continue
        name = key.removeprefix("param/")
        ref = models.state_dict()[name]
        state_dict[name] = torch.as_tensor(arr).to(ref.dtype)
    missing = set(models.state_dict()) - set(state_dict)
    if missing:
        raise ValueError(f"{path}: missing parameter segments: {sorted(missing)[:5]}")
    models.load_state_dict(state_dict)
    models.eval()

    optimizer_arrays = {k: v for k, v in arrays.items() if k.startswith("adam/")}
    schedule = TrainSchedule.from_dict(meta["schedule"])
    return CheckpointState(
        models=models,
        schedule=schedule,
        epoch_next=int(meta["epoch_next"]),
        dataset_fingerprint=meta.get("dataset_fingerprint", ""),
        meta=meta,
        optimizer_arrays=optimizer_arrays,
    )


def restore_optimizer(state: CheckpointState) -> torch.optim.Adam:
    """Rebuild the Adam state saved alongside the parameters."""
    models = state.models
    optimizer = make_optimizer(models, state.schedule.lr)
    if not state.optimizer_arrays:
        return optimizer
    entries: dict[int, dict] = {}
    for key, arr in state.optimizer_arrays.items():
        _, idx, name = key.split("/", 2)
        ref_dtype = models.dtype if arr.dtype.kind == "f" else None
        tensor = torch.as_tensor(arr)
        if ref_dtype is not None:
            tensor = tensor.to(ref_dtype)
        if name == "step":
            tensor = tensor.to(torch.float32)
        entries.setdefault(int(idx), {})[name] = tensor
    groups = state.meta["adam_param_groups"]
    optimizer.load_state_dict({"state": entries, "param_groups": groups})
    return optimizer
