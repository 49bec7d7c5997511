"""Content-addressed result cache and run manifests.

Every expensive artifact (bin tables, sweep points) is stored under the
sha256 of its defining inputs; a checksum over the stored arrays detects
tampering.  Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tables import BinOutcomeTable


class CacheError(RuntimeError):
    """Missing or corrupted cache entry."""


def content_key(payload: dict) -> str:
    """Stable sha256 over a JSON-serializable payload."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def seed_for(master_seed: int, key: str, index: int = 0):
    """Deterministic child seed from (master seed, content key, index)."""
    tag = int(hashlib.sha256(key.encode()).hexdigest()[:8], 16)
    return np.random.SeedSequence(master_seed, spawn_key=(tag, index))


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _table_checksum(counts: np.ndarray, meta: dict) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(counts).tobytes())
    h.update(json.dumps(meta, sort_keys=True).encode())
    return h.hexdigest()


class TableCache:
    """On-disk store for Monte-Carlo bin tables, keyed by content hash."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, key: str) -> Path:
        return self.root / f"table-{key}.npz"

    def save(self, key: str, table: BinOutcomeTable) -> Path:
        meta = {
            "pump_setting": table.pump_setting,
            "pump_scale": table.pump_scale,
            "initial_signal": table.initial_signal,
            "tau_bin": table.tau_bin,
            "t_split": table.t_split,
            "n_traj": table.n_traj,
            "cutoff": table.cutoff,
            "mean_final_idler": table.mean_final_idler,
            "pair_fraction": table.pair_fraction,
            "max_shell_population": table.max_shell_population,
            "mean_signal": table.mean_signal,
            "mean_idler_emitted": table.mean_idler_emitted,
        }
        checksum = _table_checksum(table.counts, meta)
        path = self.path_for(key)
        import io

        buf = io.BytesIO()
        np.savez_compressed(
            buf,
            counts=table.counts,
            meta=json.dumps(meta),
            checksum=checksum,
        )
        atomic_write_bytes(path, buf.getvalue())
        return path

    def load(self, key: str) -> BinOutcomeTable:
        path = self.path_for(key)
        if not path.exists():
            raise CacheError(f"cache miss for key {key[:12]}... at {path}")
        with np.load(path, allow_pickle=False) as data:
            counts = data["counts"]
            meta = json.loads(str(data["meta"]))
            stored = str(data["checksum"])
        if _table_checksum(counts, meta) != stored:
            raise CacheError(f"cache entry {path} failed its checksum")
        return BinOutcomeTable(counts=counts, **meta)

    def has(self, key: str) -> bool:
        return self.path_for(key).exists()


class JsonCache:
    """Small JSON records (sweep points, policies), content-keyed."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, key: str) -> Path:
        return self.root / f"result-{key}.json"

    def save(self, key: str, record: dict) -> Path:
        body = {"key": key, "record": record}
        blob = json.dumps(body, sort_keys=True, indent=1)
        path = self.path_for(key)
        atomic_write_text(path, blob)
        return path

    def load(self, key: str) -> dict:
        path = self.path_for(key)
        if not path.exists():
            raise CacheError(f"cache miss for key {key[:12]}... at {path}")
        body = json.loads(path.read_text())
        if body.get("key") != key:
            raise CacheError(f"cache entry {path} does not match its key")
        return body["record"]

    def has(self, key: str) -> bool:
        return self.path_for(key).exists()


@dataclass
class RunManifest:
    subcommand: str
    config_key: str
    seed: int
    artifacts: dict[str, str]
    started: float
    elapsed_s: float
    code_version: str

    def write(self, path: Path) -> None:
        atomic_write_text(path, json.dumps(asdict(self), sort_keys=True, indent=1))


def make_manifest(subcommand: str, config_key: str, seed: int,
                  artifacts: dict[str, str], started: float) -> RunManifest:
    from . import __version__

    return RunManifest(
        subcommand=subcommand,
        config_key=config_key,
        seed=seed,
        artifacts=artifacts,
        started=started,
        elapsed_s=time.time() - started,
        code_version=__version__,
    )
