"""Persistence: JSONL record stores, a content-addressed response cache, and
run manifests.

Everything is plain files under one root so runs stay diff-able and
streamable::

    root/
      traces/records.jsonl
      scores/records.jsonl
      estimates/records.jsonl
      cache/<2-char prefix>/<sha256>.json
      manifests/<run_id>.json
      .lock

One live process owns the writer lock; appends are line-atomic, and a crash
leaves at most one truncated trailing line which is quarantined on the next
open.
"""

from __future__ import annotations

import hashlib
import json
import os
import secrets
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

from filelock import FileLock, Timeout

from . import __version__
from .errors import StoreError, StoreLockedError

RECORD_KINDS = ("traces", "scores", "estimates")


def canonical_json(obj: object) -> str:
    """Deterministic JSON used for hashing and cache keys."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(obj: object) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def fingerprint_file(path: str | Path) -> str:
    """sha256 of a file's bytes, for manifest input fingerprints."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def new_run_id(kind: str) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    return f"{kind}-{stamp}-{secrets.token_hex(3)}"


@dataclass
class RunManifest:
    """Frozen description of one batch run, written before any work starts.

    A finished run is reconstructible from its manifest alone: endpoints,
    sampling parameters, seeds, and a content hash of every input file.
    """

    run_id: str
    kind: str
    endpoints: dict[str, dict] = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    budgets: list[int] | None = None
    seeds: dict[str, int] = field(default_factory=dict)
    dataset_fingerprints: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    created_at: str = field(default_factory=utc_now)
    toolkit_version: str = __version__
    status: str = "running"
    summary: dict | None = None
    finished_at: str | None = None

    def to_dict(self) -> dict:
        out = {
            "run_id": self.run_id,
            "kind": self.kind,
            "created_at": self.created_at,
            "endpoints": self.endpoints,
            "params": self.params,
            "seeds": self.seeds,
            "dataset_fingerprints": self.dataset_fingerprints,
            "toolkit_version": self.toolkit_version,
            "status": self.status,
        }
        if self.budgets is not None:
            out["budgets"] = self.budgets
        if self.extra:
            out["extra"] = self.extra
        if self.summary is not None:
            out["summary"] = self.summary
        if self.finished_at is not None:
            out["finished_at"] = self.finished_at
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "RunManifest":
        return cls(
            run_id=obj["run_id"],
            kind=obj["kind"],
            created_at=obj.get("created_at", ""),
            endpoints=obj.get("endpoints", {}),
            params=obj.get("params", {}),
            budgets=obj.get("budgets"),
            seeds=obj.get("seeds", {}),
            dataset_fingerprints=obj.get("dataset_fingerprints", {}),
            extra=obj.get("extra", {}),
            toolkit_version=obj.get("toolkit_version", ""),
            status=obj.get("status", "unknown"),
            summary=obj.get("summary"),
            finished_at=obj.get("finished_at"),
        )


class ResponseCache:
    """Content-addressed request/response cache, one JSON file per entry.

    Keys are a stable hash of (role, model_id, canonical request JSON, salt).
    Writes go through a temp file and rename so readers never see a partial
    entry.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(role: str, model_id: str, request: dict, salt: str | None = None) -> str:
        payload = {"role": role, "model": model_id, "request": request}
        if salt is not None:
            payload["salt"] = salt
        return content_hash(payload)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.is_file():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise StoreError(f"corrupt cache entry {path}: {exc}") from exc

    def put(self, key: str, role: str, model_id: str, request: dict, response: dict) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = canonical_json(
            {
                "key": key,
                "role": role,
                "model": model_id,
                "request": request,
                "response": response,
                "created_at": utc_now(),
            }
        )
        tmp = path.with_suffix(f".tmp-{os.getpid()}-{threading.get_ident()}")
        tmp.write_text(body, encoding="utf-8")
        tmp.replace(path)


class Store:
    """A single-writer store root holding trace/score/estimate JSONL files.

    Use as a context manager or call :meth:`close` to release the writer
    lock. Appends are serialized in-process per kind; a second concurrent
    opener (even in another process) gets :class:`StoreLockedError`.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        for kind in RECORD_KINDS:
            (self.root / kind).mkdir(exist_ok=True)
        (self.root / "manifests").mkdir(exist_ok=True)
        self.cache = ResponseCache(self.root / "cache")
        self._lock = FileLock(str(self.root / ".lock"))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise StoreLockedError(
                f"store {self.root} is locked by another live process"
            ) from None
        self._appenders: dict[str, threading.Lock] = {k: threading.Lock() for k in RECORD_KINDS}
        self._quarantine_partial_lines()

    # -- lifecycle -------------------------------------------------------

    def close(self) -> None:
        if self._lock.is_locked:
            self._lock.release()

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- record files ----------------------------------------------------

    def _record_file(self, kind: str) -> Path:
        if kind not in RECORD_KINDS:
            raise StoreError(f"unknown record kind {kind!r}")
        return self.root / kind / "records.jsonl"

    def _quarantine_partial_lines(self) -> None:
        # a crash mid-append leaves at most one unterminated or malformed
        # trailing line; move it aside so the file is clean JSONL again
        for kind in RECORD_KINDS:
            path = self._record_file(kind)
            if not path.is_file() or path.stat().st_size == 0:
                continue
            data = path.read_bytes()
            cut = None
            if not data.endswith(b"\n"):
                cut = data.rfind(b"\n") + 1
            else:
                last = data[: -1].rfind(b"\n") + 1
                try:
                    json.loads(data[last:-1])
                except json.JSONDecodeError:
                    cut = last
            if cut is not None:
                tail = data[cut:]
                with open(path.with_suffix(".quarantine"), "ab") as qf:
                    qf.write(tail if tail.endswith(b"\n") else tail + b"\n")
                with open(path, "r+b") as fh:
                    fh.truncate(cut)

    def append(self, kind: str, record: dict) -> None:
        """Append one record; the line is written and flushed atomically."""
        line = json.dumps(record, ensure_ascii=False) + "\n"
        path = self._record_file(kind)
        with self._appenders[kind]:
            with open(path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def iter_records(self, kind: str, **filters) -> Iterator[dict]:
        """Stream records of ``kind`` whose fields equal every given filter value."""
        path = self._record_file(kind)
        if not path.is_file():
            return
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                if all(obj.get(k) == v for k, v in filters.items()):
                    yield obj

    def query_records(self, kind: str, **filters) -> list[dict]:
        return list(self.iter_records(kind, **filters))

    def existing_keys(self, kind: str, fields: tuple[str, ...], **filters) -> set[tuple]:
        """Projection of stored records onto ``fields``, for resumability checks."""
        return {
            tuple(obj.get(f) for f in fields) for obj in self.iter_records(kind, **filters)
        }

    def count(self, kind: str, **filters) -> int:
        return sum(1 for _ in self.iter_records(kind, **filters))

    # -- manifests ---------------------------------------------------------

    def manifest_path(self, run_id: str) -> Path:
        return self.root / "manifests" / f"{run_id}.json"

    def write_manifest(self, manifest: RunManifest) -> None:
        path = self.manifest_path(manifest.run_id)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest.to_dict(), indent=2, ensure_ascii=False) + "\n")
        tmp.replace(path)

    def new_manifest(self, kind: str, **kwargs) -> RunManifest:
        """Create, uniqueness-check, and persist a fresh running manifest."""
        for _ in range(3):
            run_id = new_run_id(kind)
            if not self.manifest_path(run_id).exists():
                break
            time.sleep(0.01)
        else:
            raise StoreError("could not allocate a unique run id")
        manifest = RunManifest(run_id=run_id, kind=kind, **kwargs)
        self.write_manifest(manifest)
        return manifest

    def finalize_manifest(
        self, manifest: RunManifest, status: str, summary: dict | None = None
    ) -> None:
        manifest.status = status
        manifest.summary = summary
        manifest.finished_at = utc_now()
        self.write_manifest(manifest)

    def read_manifest(self, run_id: str) -> RunManifest:
        path = self.manifest_path(run_id)
        if not path.is_file():
            raise StoreError(f"no manifest {run_id!r} in {self.root}")
        return RunManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def list_manifests(self) -> list[RunManifest]:
        out = []
        for path in sorted((self.root / "manifests").glob("*.json")):
            out.append(RunManifest.from_dict(json.loads(path.read_text(encoding="utf-8"))))
        return out


def open_store(root: str | Path) -> Store:
    """Open (creating if needed) the store at ``root`` and take the writer lock."""
    return Store(root)
