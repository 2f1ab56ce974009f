"""Content-addressed artifact cache.

Entries live at ``<root>/<first2 hex>/<key>/``: the output files plus an
``entry.json`` metadata file. The metadata file is written last, via
atomic rename, so it doubles as the publish point: at no observable
instant does get() return an entry whose files are incomplete. Safe under
concurrent readers and writers across processes; no locks are held while
blocks compute.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

from . import tensorio
from .errors import CacheError

ENTRY_FILE = "entry.json"


def _canonical(value, where: str):
    """Validate and normalize a param value for canonical encoding."""
    if value is None or isinstance(value, (bool, str, int)):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise CacheError(f"non-finite param value at {where}")
        return value
    if isinstance(value, (list, tuple)):
        return [_canonical(v, f"{where}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, dict):
        out = {}
        for k in value:
            if not isinstance(k, str):
                raise CacheError(f"non-string param key at {where}")
            out[k] = _canonical(value[k], f"{where}.{k}")
        return out
    raise CacheError(f"non-encodable param value of type {type(value).__name__} at {where}")


def canonical_encode(obj) -> bytes:
    """Deterministic byte encoding: sorted keys, compact separators.

    Integers render as decimal, floats as their shortest round-trip form
    (CPython repr), so identical values hash identically across platforms.
    """
    return json.dumps(
        _canonical(obj, "$"), sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def cache_key(kind: str, version: str, params: dict, input_digests: list[str]) -> str:
    """Identity of a block invocation: kind, version, params, input digests.

    Insensitive to param insertion order; sensitive to everything else.
    """
    blob = canonical_encode(
        {"kind": kind, "version": version, "params": params, "inputs": list(input_digests)}
    )
    return tensorio.hash_bytes(blob)


@dataclass
class CacheEntry:
    key: str
    kind: str
    version: str
    created_at: float
    outputs: dict[str, Path]  # artifact name -> absolute file path
    digests: dict[str, str]  # artifact name -> SHA-256

    def path(self, name: str) -> Path:
        try:
            return self.outputs[name]
        except KeyError:
            raise CacheError(f"entry {self.key[:12]} has no output {name!r}")


class Cache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise CacheError(f"cannot create cache directory {self.root}: {e}")

    def _entry_dir(self, key: str) -> Path:
        return self.root / key[:2] / key

    def get(self, key: str) -> CacheEntry | None:
        """Return a verified entry, or None. Corrupt entries are evicted."""
        entry_dir = self._entry_dir(key)
        meta_path = entry_dir / ENTRY_FILE
        try:
            meta = json.loads(meta_path.read_text())
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError):
            self._evict(entry_dir)
            return None

        outputs: dict[str, Path] = {}
        digests: dict[str, str] = {}
        for name, info in meta.get("outputs", {}).items():
            fpath = entry_dir / info["file"]
            if not fpath.is_file() or tensorio.hash_artifact(fpath) != info["digest"]:
                self._evict(entry_dir)
                return None
            outputs[name] = fpath
            digests[name] = info["digest"]
        return CacheEntry(
            key=key,
            kind=meta.get("kind", ""),
            version=meta.get("version", ""),
            created_at=float(meta.get("created_at", 0.0)),
            outputs=outputs,
            digests=digests,
        )

    def put(self, key: str, kind: str, version: str, outputs: dict[str, Path]) -> CacheEntry:
        """Publish produced files under a key; idempotent across racers.

        Files are copied in first; the metadata JSON lands last via atomic
        rename. A process crash before that rename leaves no visible entry.
        """
        if not outputs:
            raise CacheError("put with zero output files")
        existing = self.get(key)
        if existing is not None:
            # idempotent collision: keep the original, verify the newcomer agrees
            for name, src in outputs.items():
                if name not in existing.digests:
                    raise CacheError(f"entry {key[:12]} collision: new output {name!r}")
                if tensorio.hash_artifact(src) != existing.digests[name]:
                    raise CacheError(
                        f"entry {key[:12]} collision with different bytes for {name!r}"
                    )
            return existing

        entry_dir = self._entry_dir(key)
        try:
            entry_dir.mkdir(parents=True, exist_ok=True)
            meta_outputs = {}
            for name, src in sorted(outputs.items()):
                if name == ENTRY_FILE or "/" in name or name.startswith("."):
                    raise CacheError(f"illegal artifact name {name!r}")
                src = Path(src)
                if not src.is_file():
                    raise CacheError(f"output file missing: {src}")
                self._install_file(src, entry_dir / name)
                meta_outputs[name] = {"file": name, "digest": tensorio.hash_artifact(src)}
            meta = {
                "key": key,
                "kind": kind,
                "version": version,
                "created_at": time.time(),
                "outputs": meta_outputs,
            }
            self._write_atomic(entry_dir / ENTRY_FILE, json.dumps(meta, indent=1).encode())
        except CacheError:
            raise
        except OSError as e:
            raise CacheError(f"cache I/O failure for {key[:12]}: {e}")
        entry = self.get(key)
        if entry is None:
            raise CacheError(f"entry {key[:12]} failed post-publish verification")
        return entry

    def clean(self, older_than_s: float) -> int:
        """Remove entries created more than older_than_s seconds ago."""
        cutoff = time.time() - older_than_s
        removed = 0
        for meta_path in self.root.glob(f"??/*/{ENTRY_FILE}"):
            try:
                created = float(json.loads(meta_path.read_text()).get("created_at", 0.0))
            except (OSError, json.JSONDecodeError, ValueError):
                created = 0.0  # unreadable metadata: treat as stale
            if created <= cutoff:
                self._evict(meta_path.parent)
                removed += 1
        return removed

    def _install_file(self, src: Path, dst: Path) -> None:
        fd, tmp = tempfile.mkstemp(prefix=dst.name + ".", suffix=".tmp", dir=dst.parent)
        os.close(fd)
        try:
            shutil.copyfile(src, tmp)
            os.replace(tmp, dst)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @staticmethod
    def _write_atomic(path: Path, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @staticmethod
    def _evict(entry_dir: Path) -> None:
        shutil.rmtree(entry_dir, ignore_errors=True)
