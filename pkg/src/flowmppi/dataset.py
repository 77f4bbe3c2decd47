"""On-disk dataset format: a directory of per-environment binary files plus a
meta.json manifest.

Each environment file stores, little-endian: a header (magic, version, grid
shape, extent, pair count, state dim), the occupancy grid as packed bits, the
SDF as row-major float32, and the start/goal states as float32 arrays.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grids import OccupancyGrid, SdfGrid

MAGIC = b"FMPPIENV"
FORMAT_VERSION = 1


@dataclass
class EnvRecord:
    occupancy: np.ndarray
    sdf_values: np.ndarray
    extent: float
    starts: np.ndarray  # (n_pairs, state_dim)
    goals: np.ndarray  # (n_pairs, state_dim)

    def sdf(self) -> SdfGrid:
        return SdfGrid(values=self.sdf_values.astype(np.float64),
                       extent=self.extent, occupied=self.occupancy)

    def grid(self) -> OccupancyGrid:
        return OccupancyGrid(cells=self.occupancy, extent=self.extent)


def write_env_file(path: Path, record: EnvRecord) -> None:
    occ = np.asarray(record.occupancy, dtype=bool)
    sdf = np.asarray(record.sdf_values, dtype="<f4")
    starts = np.asarray(record.starts, dtype="<f4")
    goals = np.asarray(record.goals, dtype="<f4")
    if starts.shape != goals.shape or starts.ndim != 2:
        raise ValueError("starts/goals must be (n_pairs, state_dim) and match")
    header = struct.pack(
        "<8sII", MAGIC, FORMAT_VERSION, occ.ndim
    ) + struct.pack(f"<{occ.ndim}I", *occ.shape) + struct.pack(
        "<fII", float(record.extent), starts.shape[0], starts.shape[1]
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.packbits(occ.reshape(-1)).tobytes())
        f.write(sdf.tobytes(order="C"))
        f.write(starts.tobytes(order="C"))
        f.write(goals.tobytes(order="C"))


def read_env_file(path: Path) -> EnvRecord:
    with open(path, "rb") as f:
        magic, version, ndim = struct.unpack("<8sII", f.read(16))
        if magic != MAGIC:
            raise ValueError(f"{path}: not an environment file")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        extent, n_pairs, state_dim = struct.unpack("<fII", f.read(12))
        n_cells = int(np.prod(shape))
        occ_bytes = f.read((n_cells + 7) // 8)
        occ = np.unpackbits(np.frombuffer(occ_bytes, dtype=np.uint8))[:n_cells]
        occ = occ.astype(bool).reshape(shape)
        sdf = np.frombuffer(f.read(4 * n_cells), dtype="<f4").reshape(shape)
        starts = np.frombuffer(f.read(4 * n_pairs * state_dim), dtype="<f4")
        goals = np.frombuffer(f.read(4 * n_pairs * state_dim), dtype="<f4")
    return EnvRecord(
        occupancy=occ,
        sdf_values=sdf.astype(np.float64),
        extent=float(extent),
        starts=starts.reshape(n_pairs, state_dim).astype(np.float64),
        goals=goals.reshape(n_pairs, state_dim).astype(np.float64),
    )


@dataclass
class DatasetMeta:
    system: str
    env_kind: str
    grid_dim: int
    grid_size: int
    extent: float
    n_envs: int
    n_pairs: int
    seed: int
    files: list[str] = field(default_factory=list)
    generator_params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "DatasetMeta":
        return DatasetMeta(**json.loads(text))


def env_filename(index: int) -> str:
    return f"env_{index:06d}.bin"


class DatasetDir:
    """A dataset directory: meta.json plus one binary file per environment."""

    def __init__(self, path: Path):
        self.path = Path(path)
        meta_path = self.path / "meta.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"no meta.json under {self.path}")
        self.meta = DatasetMeta.from_json(meta_path.read_text())

    def __len__(self) -> int:
        return self.meta.n_envs

    def load(self, index: int) -> EnvRecord:
        return read_env_file(self.path / self.meta.files[index])

    def fingerprint(self) -> str:
        """Hash of the manifest and file names; identifies the dataset in
        checkpoints without reading every environment."""
        digest = hashlib.sha256()
        digest.update((self.path / "meta.json").read_bytes())
        return digest.hexdigest()[:16]


def write_dataset(path: Path, meta: DatasetMeta, records: list[EnvRecord]) -> DatasetDir:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta.files = [env_filename(i) for i in range(len(records))]
    meta.n_envs = len(records)
    for name, rec in zip(meta.files, records):
        write_env_file(path / name, rec)
    (path / "meta.json").write_text(meta.to_json())
    return DatasetDir(path)
