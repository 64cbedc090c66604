"""Simulated ephemeral clusters.

Clusters come up in batches of ten nodes; each batch takes ``T`` minutes and
GPU nodes add five minutes for the CUDA install. A cluster is ``provisioning``
until the (simulated or wall) clock passes its ``ready_at``, then ``running``
until stopped.
"""
from __future__ import annotations

import configparser
import hashlib
import ipaddress
import io
import os
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path

from .backends.local import LocalBackend
from .backends.registry import JobRegistry
from .errors import BackendUnavailable, DuplicateCluster, InvalidResource, UnknownCluster
from .fsutil import atomic_write_text, read_json, write_json

PROVISIONING, RUNNING, STOPPED = "provisioning", "running", "stopped"
CUDA_MINUTES = 5
BATCH_SIZE = 10
SIM_EPOCH = datetime(2018, 1, 1, tzinfo=timezone.utc)


def setup_time(n_nodes: int, gpu: bool = False, T: float = 20) -> float:
    """Minutes to bring up ``n_nodes``: ``(1 + (n-1)//10) * T``, +5 with GPUs."""
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    if T <= 0:
        raise ValueError("T must be positive")
    minutes = (1 + (n_nodes - 1) // BATCH_SIZE) * T
    return minutes + CUDA_MINUTES if gpu else minutes


# -- clocks -------------------------------------------------------------------

class SimulatedClock:
    """Clock that only moves when told to; optionally persisted to a JSON file."""

    def __init__(self, path: Path | None = None, start: datetime = SIM_EPOCH):
        self.path = Path(path) if path else None
        self._now = start
        if self.path and self.path.exists():
            self._now = datetime.fromisoformat(read_json(self.path)["now"])

    def now(self) -> datetime:
        return self._now

    def _save(self) -> None:
        if self.path:
            write_json(self.path, {"now": self._now.isoformat()})

    def advance(self, seconds: float) -> datetime:
        self._now += timedelta(seconds=seconds)
        self._save()
        return self._now

    def advance_to(self, when: datetime) -> datetime:
        if when > self._now:
            self._now = when
            self._save()
        return self._now


class WallClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def advance(self, seconds: float) -> datetime:
        time.sleep(max(0.0, seconds))
        return self.now()

    def advance_to(self, when: datetime) -> datetime:
        return self.advance((when - self.now()).total_seconds())


def make_clock(mode: str | None = None, state_dir: Path | None = None):
    mode = (mode or os.environ.get("EMS_CLOCK") or "simulated").lower()
    if mode == "wall":
        return WallClock()
    if mode != "simulated":
        raise ValueError(f"EMS_CLOCK must be 'simulated' or 'wall', not {mode!r}")
    return SimulatedClock(Path(state_dir) / "clock.json" if state_dir else None)


# -- cluster model ------------------------------------------------------------

@dataclass(frozen=True)
class ClusterSpec:
    name: str
    n_nodes: int = 1
    gpu_per_node: int = 0
    scheduler: str = "slurm"
    batch_setup_minutes: float = 20.0

    def __post_init__(self):
        if not self.name or not self.name.replace("-", "_").isidentifier():
            raise InvalidResource(f"cluster name must be an identifier: {self.name!r}")
        if self.n_nodes < 1:
            raise InvalidResource("n_nodes must be >= 1")
        if self.gpu_per_node < 0:
            raise InvalidResource("gpu_per_node must be >= 0")
        if self.batch_setup_minutes <= 0:
            raise InvalidResource("batch_setup_minutes must be positive")
        if self.scheduler not in ("slurm", "sge"):
            raise InvalidResource(f"scheduler must be slurm or sge, not {self.scheduler!r}")

    @property
    def setup_minutes(self) -> float:
        return setup_time(self.n_nodes, self.gpu_per_node > 0, self.batch_setup_minutes)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser["cluster"] = {
            "name": self.name,
            "n_nodes": str(self.n_nodes),
            "gpu_per_node": str(self.gpu_per_node),
            "scheduler": self.scheduler,
            "batch_setup_minutes": f"{self.batch_setup_minutes:g}",
        }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ClusterSpec":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        sec = parser["cluster"]
        return cls(sec["name"], sec.getint("n_nodes", 1), sec.getint("gpu_per_node", 0),
                   sec.get("scheduler", "slurm"), sec.getfloat("batch_setup_minutes", 20.0))


def frontend_address(name: str) -> str:
    h = hashlib.sha1(name.encode("utf-8")).digest()
    return str(ipaddress.IPv4Address(bytes([10, h[0], h[1], 1])))


@dataclass
class ClusterHandle:
    spec: ClusterSpec
    state: str
    frontend_address: str | None
    ready_at: str
    started_at: str

    @property
    def name(self) -> str:
        return self.spec.name

    def to_dict(self) -> dict:
        return {"spec": self.spec.__dict__.copy(), "state": self.state,
                "frontend_address": self.frontend_address, "ready_at": self.ready_at,
                "started_at": self.started_at}

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterHandle":
        return cls(ClusterSpec(**d["spec"]), d["state"], d["frontend_address"], d["ready_at"],
                   d["started_at"])


@dataclass
class NodeRow:
    name: str
    role: str
    address: str

    def to_dict(self) -> dict:
        return {"name": self.name, "role": self.role, "address": self.address}


class ClusterManager:
    """Cluster registry. ``state_dir=None`` keeps handles in memory."""

    def __init__(self, state_dir: Path | None = None, clock=None, config_dir: Path | None = None):
        self.state_dir = Path(state_dir) if state_dir else None
        self.config_dir = Path(config_dir) if config_dir else None
        self.clock = clock if clock is not None else SimulatedClock()
        self._handles: dict[str, ClusterHandle] = {}
        if self.path and self.path.exists():
            self._handles = {d["spec"]["name"]: ClusterHandle.from_dict(d) for d in read_json(self.path)}

    @property
    def path(self) -> Path | None:
        return self.state_dir / "clusters.json" if self.state_dir else None

    def _save(self) -> None:
        if self.path:
            write_json(self.path, [h.to_dict() for h in self._handles.values()])

    def refresh(self) -> None:
        now = self.clock.now()
        changed = False
        for h in self._handles.values():
            if h.state == PROVISIONING and now >= datetime.fromisoformat(h.ready_at):
                h.state = RUNNING
                changed = True
        if changed:
            self._save()

    # -- config files ------------------------------------------------------
    def config_path(self, name: str) -> Path | None:
        return self.config_dir / f"{name}.ini" if self.config_dir else None

    def read_config(self, name: str) -> ClusterSpec | None:
        path = self.config_path(name)
        if path is None or not path.exists():
            return None
        return ClusterSpec.from_ini(path.read_text())

    def write_config(self, spec: ClusterSpec) -> None:
        path = self.config_path(spec.name)
        if path is not None:
            atomic_write_text(path, spec.to_ini())

    # -- lifecycle ---------------------------------------------------------
    def start_cluster(self, spec: ClusterSpec) -> ClusterHandle:
        self.refresh()
        old = self._handles.get(spec.name)
        if old is not None and old.state != STOPPED:
            raise DuplicateCluster(f"cluster {spec.name} is already {old.state}")
        now = self.clock.now()
        handle = ClusterHandle(spec, PROVISIONING, frontend_address(spec.name),
                               (now + timedelta(minutes=spec.setup_minutes)).isoformat(),
                               now.isoformat())
        self._handles[spec.name] = handle
        self.write_config(spec)
        self._save()
        self.refresh()
        return replace(handle)

    def get(self, name: str) -> ClusterHandle:
        self.refresh()
        try:
            return replace(self._handles[name])
        except KeyError:
            raise UnknownCluster(f"no cluster named {name!r}") from None

    def clusters(self) -> list[ClusterHandle]:
        self.refresh()
        return [replace(h) for h in self._handles.values()]

    def wait(self, name: str) -> ClusterHandle:
        """Advance the clock to the cluster's ready time."""
        h = self.get(name)
        if h.state == PROVISIONING:
            self.clock.advance_to(datetime.fromisoformat(h.ready_at))
        return self.get(name)

    def stop_cluster(self, name: str) -> ClusterHandle:
        self.get(name)
        h = self._handles[name]
        h.state = STOPPED
        h.frontend_address = None
        self._save()
        return replace(h)

    def list_nodes(self, name: str) -> list[NodeRow]:
        h = self.get(name)
        if h.state == STOPPED:
            return []
        front = ipaddress.IPv4Address(h.frontend_address)
        rows = [NodeRow("frontend001", "frontend", str(front))]
        rows += [NodeRow(f"compute{i:03d}", "compute", str(front + i))
                 for i in range(1, h.spec.n_nodes + 1)]
        return rows

    def require_running(self, name: str) -> None:
        h = self.get(name)
        if h.state != RUNNING:
            detail = f" until {h.ready_at}" if h.state == PROVISIONING else ""
            raise BackendUnavailable(f"cluster {name} is {h.state}{detail}")

    def backend(self, name: str, registry: JobRegistry | None = None) -> LocalBackend:
        """Local engine for the cluster's jobs, gated on the cluster running."""
        self.get(name)
        return LocalBackend(registry, name=name, gate=lambda: self.require_running(name))
