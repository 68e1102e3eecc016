"""Artifact serialization: trajectory binaries, CSV emission, run manifests.

Every float printed to CSV uses 17 significant digits so values round-trip
exactly; rerunning a subcommand with the same config and seed reproduces the
output files byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import MissingArtifact
from .geometry import Grid

__all__ = [
    "fmt",
    "write_csv",
    "write_keyvalues",
    "write_trajectory",
    "read_trajectory",
    "write_manifest",
    "verify_manifest",
    "sha256_file",
]

TRAJ_MAGIC = b"OBSWTRJ1"
TRAJ_VERSION = 1


def fmt(x) -> str:
    """Round-trip-exact text for one value."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    return path


def write_keyvalues(path, mapping) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        for key, value in mapping.items():
            fh.write(f"{key}={fmt(value)}\n")
    return path


# ---------------------------------------------------------------------------
# Trajectory binary format
#
# header: magic (8 bytes) | version u32 | dim u32 | nx[dim] u32 | nt u32 | dt f64
# payload: nt+1 levels, each z then zt, row-major float64


def write_trajectory(path, grid: Grid, z: np.ndarray, zt: np.ndarray) -> Path:
    path = Path(path)
    z = np.ascontiguousarray(z, dtype="<f8")
    zt = np.ascontiguousarray(zt, dtype="<f8")
    levels = z.shape[0]
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(struct.pack("<II", TRAJ_VERSION, grid.dim))
        fh.write(struct.pack(f"<{grid.dim}I", *grid.nx))
        fh.write(struct.pack("<Id", levels - 1, grid.dt))
        for k in range(levels):
            fh.write(z[k].tobytes())
            fh.write(zt[k].tobytes())
    return path


def read_trajectory(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"no trajectory file at {path}")
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != TRAJ_MAGIC:
            raise MissingArtifact(f"{path} is not a trajectory artifact")
        version, dim = struct.unpack("<II", fh.read(8))
        if version != TRAJ_VERSION:
            raise MissingArtifact(f"unsupported trajectory version {version}")
        nx = struct.unpack(f"<{dim}I", fh.read(4 * dim))
        nt, dt = struct.unpack("<Id", fh.read(12))
        count = int(np.prod(nx))
        z = np.empty((nt + 1,) + nx)
        zt = np.empty_like(z)
        for k in range(nt + 1):
            z[k] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(nx)
            zt[k] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(nx)
    meta = {"dim": dim, "nx": nx, "nt": nt, "dt": dt}
    return meta, z, zt


# ---------------------------------------------------------------------------
# Run manifest


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    out_dir, resolved_config: dict, files, started: str, finished: str
) -> Path:
    """Echo the resolved config plus a content-hash inventory of artifacts."""
    from . import __version__

    out_dir = Path(out_dir)
    inventory = {Path(f).name: sha256_file(f) for f in files}
    manifest = {
        "version": __version__,
        "started": started,
        "finished": finished,
        "config": resolved_config,
        "files": inventory,
    }
    path = out_dir / "manifest.json"
    with open(path, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def verify_manifest(out_dir) -> bool:
    """Re-hash the artifact inventory; False on any mismatch or missing file."""
    out_dir = Path(out_dir)
    path = out_dir / "manifest.json"
    if not path.exists():
        raise MissingArtifact(f"no manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    for name, digest in manifest["files"].items():
        target = out_dir / name
        if not target.exists() or sha256_file(target) != digest:
            return False
    return True
