"""Reproducible, content-addressed experiment packages.

A package is a main script, an explicit dependency tree and a small metadata
map. Its identity (the PID) is the SHA-1 of a canonical byte stream built from
those three parts, so the same experiment always lands in the same directory
and can be reproduced from the PID alone: every per-job random seed is derived
from it.

Layout under a package root::

    <root>/<pid>/script
    <root>/<pid>/deps/...
    <root>/<pid>/manifest.json
    <root>/<pid>/jobs/<k>/
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import cached_property
from pathlib import Path, PurePosixPath
from typing import Mapping

from .errors import InvalidJobCount, InvalidPath, IoFailure, UnknownPackage
from .fsutil import atomic_write_bytes, read_json, read_tree, write_json, write_tree

FileTree = Mapping[str, bytes]

_HEX40 = re.compile(r"^[0-9a-f]{40}$")
MANIFEST_NAME = "manifest.json"


class PackageIdentifier(str):
    """40-character lowercase hex SHA-1 digest."""

    def __new__(cls, value: str) -> "PackageIdentifier":
        if not isinstance(value, str) or not _HEX40.match(value):
            raise ValueError(f"not a package identifier: {value!r}")
        return super().__new__(cls, value)

    @property
    def hex(self) -> str:
        return str(self)

    @property
    def short(self) -> str:
        return self[:8]


def normalize_path(path: str) -> str:
    """Validate a dependency path and return its normal form (``a/./b`` -> ``a/b``)."""
    if not path or path.startswith("/") or "\\" in path or re.match(r"^[A-Za-z]:", path):
        raise InvalidPath(f"dependency path must be relative: {path!r}")
    parts = PurePosixPath(path).parts
    if ".." in parts:
        raise InvalidPath(f"dependency path may not contain '..': {path!r}")
    norm = "/".join(p for p in parts if p not in (".", ""))
    if not norm:
        raise InvalidPath(f"empty dependency path: {path!r}")
    return norm


def normalize_tree(deps: FileTree) -> dict[str, bytes]:
    out: dict[str, bytes] = {}
    for raw, content in deps.items():
        norm = normalize_path(raw)
        if norm in out:
            raise InvalidPath(f"duplicate dependency path after normalization: {raw!r}")
        out[norm] = bytes(content)
    return dict(sorted(out.items()))


def normalize_newlines(data: bytes) -> bytes:
    return data.replace(b"\r\n", b"\n").replace(b"\r", b"\n")


def canonicalize(script: str | bytes, deps: FileTree, metadata: Mapping[str, str]) -> bytes:
    """Deterministic byte stream for hashing.

    Script bytes with LF line endings, then ``path NUL content`` per dependency
    in lexicographic path order, then ``key=value LF`` per metadata key in
    lexicographic order. Dependency contents are taken verbatim.
    """
    if isinstance(script, str):
        script = script.encode("utf-8")
    parts = [normalize_newlines(script)]
    for path, content in normalize_tree(deps).items():
        parts.append(path.encode("utf-8") + b"\0" + content)
    for key in sorted(metadata):
        value = metadata[key]
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"metadata entry not representable: {key!r}={value!r}")
        parts.append(f"{key}={value}\n".encode("utf-8"))
    return b"".join(parts)


def sha1_hex(data: bytes) -> str:
    return hashlib.sha1(data).hexdigest()


def compute_pid(canonical: bytes) -> PackageIdentifier:
    return PackageIdentifier(sha1_hex(canonical))


def _seed_from(text: str) -> int:
    return int.from_bytes(hashlib.sha1(text.encode("ascii")).digest()[:8], "big")


def derive_seeds(pid: str, n_jobs: int) -> tuple[int, list[int]]:
    """Master seed and one seed per job, all hash-chained from the PID.

    ``per_job_seeds[i]`` depends only on ``(pid, i)``, so a prefix of a longer
    seed list equals the shorter list.
    """
    if not isinstance(n_jobs, int) or n_jobs < 1:
        raise InvalidJobCount(f"n_jobs must be a positive integer, got {n_jobs!r}")
    pid = str(pid)
    return _seed_from(pid), [_seed_from(f"{pid}:{i}") for i in range(n_jobs)]


@dataclass(frozen=True)
class ExperimentPackage:
    script: str
    deps: Mapping[str, bytes] = field(default_factory=dict)
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "deps", normalize_tree(self.deps))
        object.__setattr__(self, "metadata", dict(sorted(self.metadata.items())))

    def canonical(self) -> bytes:
        return canonicalize(self.script, self.deps, self.metadata)

    @cached_property
    def pid(self) -> PackageIdentifier:
        return compute_pid(self.canonical())

    @property
    def message(self) -> str:
        return self.metadata.get("message", "")


@dataclass
class ReproManifest:
    pid: str
    master_seed: int
    per_job_seeds: list[int]
    dependency_list: list[dict[str, str]]
    created_at: str
    message: str = ""
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def n_jobs(self) -> int:
        return len(self.per_job_seeds)

    def to_dict(self) -> dict:
        return {
            "pid": str(self.pid),
            "master_seed": self.master_seed,
            "per_job_seeds": list(self.per_job_seeds),
            "dependency_list": [dict(d) for d in self.dependency_list],
            "created_at": self.created_at,
            "message": self.message,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReproManifest":
        return cls(
            pid=data["pid"],
            master_seed=int(data["master_seed"]),
            per_job_seeds=[int(s) for s in data["per_job_seeds"]],
            dependency_list=[dict(d) for d in data["dependency_list"]],
            created_at=data["created_at"],
            message=data.get("message", ""),
            metadata=dict(data.get("metadata", {})),
        )


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def package_dir(root: Path, pid: str) -> Path:
    return Path(root) / str(pid)


def materialize(pkg: ExperimentPackage, root: Path) -> Path:
    """Write the script and dependency tree under ``<root>/<pid>/``."""
    pdir = package_dir(root, pkg.pid)
    atomic_write_bytes(pdir / "script", pkg.script.encode("utf-8"))
    write_tree(pdir / "deps", pkg.deps)
    return pdir


def build_manifest(pkg: ExperimentPackage, seeds: tuple[int, list[int]],
                   created_at: str | None = None) -> ReproManifest:
    master, per_job = seeds
    return ReproManifest(
        pid=str(pkg.pid),
        master_seed=master,
        per_job_seeds=list(per_job),
        dependency_list=[{"path": p, "sha1": sha1_hex(c)} for p, c in pkg.deps.items()],
        created_at=created_at or utc_now(),
        message=pkg.message,
        metadata=dict(pkg.metadata),
    )


def write_manifest(pkg: ExperimentPackage, seeds: tuple[int, list[int]], root: Path,
                   created_at: str | None = None) -> ReproManifest:
    manifest = build_manifest(pkg, seeds, created_at)
    write_json(package_dir(root, pkg.pid) / MANIFEST_NAME, manifest.to_dict())
    return manifest


def read_manifest(root: Path, pid: str) -> ReproManifest:
    path = package_dir(root, pid) / MANIFEST_NAME
    if not path.is_file():
        raise UnknownPackage(f"no package {pid} under {root}")
    return ReproManifest.from_dict(read_json(path))


def load_package(root: Path, pid: str) -> ExperimentPackage:
    """Rebuild a package from its directory; the PID is re-verified."""
    manifest = read_manifest(root, pid)
    pdir = package_dir(root, pid)
    try:
        script = (pdir / "script").read_bytes().decode("utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    deps = read_tree(pdir / "deps") if (pdir / "deps").is_dir() else {}
    pkg = ExperimentPackage(script, deps, manifest.metadata)
    if pkg.pid != str(pid):
        raise IoFailure(f"package {pid} is corrupt: contents hash to {pkg.pid}")
    return pkg


def collect_deps(paths: list[Path]) -> dict[str, bytes]:
    """Dependency tree from files/directories given on the command line.

    A directory ``bin/`` contributes ``bin/<rel>`` entries; a file contributes
    its basename.
    """
    tree: dict[str, bytes] = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            name = p.resolve().name
            tree.update(read_tree(p, prefix=f"{name}/"))
        elif p.is_file():
            tree[p.name] = p.read_bytes()
        else:
            raise IoFailure(f"dependency not found: {p}")
    return tree
