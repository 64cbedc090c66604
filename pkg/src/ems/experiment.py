"""End-to-end orchestration behind the CLI verbs."""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

from .backends import JobRecord, JobRegistry, emit_batch_script, parse_alloc
from .bundlegraph import BundleStore
from .config import ClusterRegistry, default_registry_path
from .errors import UnknownPackage
from .fsutil import atomic_write_text
from .harvest import progress
from .packaging import (ExperimentPackage, collect_deps, derive_seeds, materialize,
                        package_dir, read_manifest, write_manifest)
from .provision import ClusterManager, make_clock
from .scriptgrid import parse_loops, split_jobs


class Home:
    """Everything under ``$EMS_HOME`` (default ``~/.ems``)."""

    def __init__(self, root: Path | str | None = None):
        self.root = Path(root or os.environ.get("EMS_HOME") or Path.home() / ".ems")
        self.root.mkdir(parents=True, exist_ok=True)

    @property
    def packages(self) -> Path:
        return self.root / "packages"

    @property
    def state(self) -> Path:
        return self.root / "state"

    @property
    def profiles_config(self) -> Path:
        return self.root / "profiles.ini"

    @cached_property
    def registry(self) -> JobRegistry:
        return JobRegistry(self.state)

    @cached_property
    def clock(self):
        return make_clock(None, self.state)

    @cached_property
    def clusters(self) -> ClusterManager:
        return ClusterManager(self.state, self.clock, self.root / "clusters")

    @cached_property
    def cluster_registry(self) -> ClusterRegistry:
        return ClusterRegistry(default_registry_path(self.root))

    @cached_property
    def store(self) -> BundleStore:
        return BundleStore(self.root)

    def resolve_pid(self, ref: str) -> str:
        """Full PID for a PID or a unique prefix of one."""
        if (package_dir(self.packages, ref) / "manifest.json").is_file():
            return ref
        hits = [p.name for p in self.packages.glob(f"{ref}*") if (p / "manifest.json").is_file()] \
            if ref and self.packages.is_dir() else []
        if len(hits) == 1:
            return hits[0]
        raise UnknownPackage(f"no package {ref!r}" if not hits else f"package prefix {ref!r} is ambiguous")


@dataclass
class SubmitResult:
    pid: str
    cluster: str
    records: list[JobRecord]
    progress: dict[str, int]
    warnings: list[str]

    @property
    def n_jobs(self) -> int:
        return len(self.records)


def submit(home: Home, script: Path, cluster: str, deps: list[Path] = (), alloc: str | None = None,
           message: str = "", chunk: int = 1, interpreter: str | None = None, split: bool = True,
           execute: bool = True, slots: int | None = None) -> SubmitResult:
    """Package ``script``, split it into jobs (``split``) and run them on ``cluster``."""
    entry = home.cluster_registry.get(cluster)
    handle = home.clusters.get(cluster)
    home.clusters.require_running(cluster)
    alloc = alloc if alloc is not None else entry.resources
    resources = parse_alloc(alloc)

    script = Path(script)
    metadata = {"script_name": script.name, "message": message, "alloc": alloc or "",
                "mode": "parrun" if split else "run"}
    if split and chunk != 1:
        metadata["chunk"] = str(chunk)
    if interpreter:
        metadata["interpreter"] = interpreter
    pkg = ExperimentPackage(script.read_text(encoding="utf-8"), collect_deps(list(deps)), metadata)
    materialize(pkg, home.packages)

    warnings = parse_loops(pkg.script).warnings if split else []
    tasks = split_jobs(pkg, resources, home.packages, chunk, interpreter, split)
    manifest_path = package_dir(home.packages, pkg.pid) / "manifest.json"
    if not manifest_path.exists():
        write_manifest(pkg, derive_seeds(pkg.pid, len(tasks)), home.packages)

    scheduler = entry.scheduler or handle.spec.scheduler
    backend = home.clusters.backend(cluster, home.registry)
    ids = []
    for task in tasks:
        atomic_write_text(Path(task.workdir) / "submit.sh", emit_batch_script(task, scheduler))
        task.command = ["bash", "submit.sh"]
        ids.append(backend.submit(task).job_id)
    home.registry.flush()
    if execute:
        backend.run_local(slots=slots or handle.spec.n_nodes, only=set(ids))
    records = [backend.status(j) for j in ids]
    return SubmitResult(str(pkg.pid), cluster, records, progress(home.packages, pkg.pid, home.registry),
                        warnings)


def status(home: Home, pid: str) -> tuple[str, dict[str, int], list[JobRecord]]:
    pid = home.resolve_pid(pid)
    read_manifest(home.packages, pid)
    latest = home.registry.latest_for_package(pid)
    return pid, progress(home.packages, pid, home.registry), [latest[k] for k in sorted(latest)]


def drain(home: Home, cluster: str, slots: int | None = None) -> list[JobRecord]:
    backend = home.clusters.backend(cluster, home.registry)
    return backend.run_local(slots=slots or home.clusters.get(cluster).spec.n_nodes)
