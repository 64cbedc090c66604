"""Cluster registry: an INI file with one section per cluster.

Updates touch only the keys given and are written with write-temp-rename, so
concurrent writers never leave a torn file (the last writer wins).
"""
from __future__ import annotations

import configparser
import io
import ipaddress
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import MalformedAssignment, UnknownCluster
from .fsutil import atomic_write_text

KNOWN_KEYS = ("host", "scheduler", "resources", "libraries")
_KEY = re.compile(r"^[A-Za-z_][\w.-]*$")
_HOSTNAME = re.compile(r"^(?=.{1,253}$)([A-Za-z0-9](?:[A-Za-z0-9-]{0,61}[A-Za-z0-9])?)(\.[A-Za-z0-9](?:[A-Za-z0-9-]{0,61}[A-Za-z0-9])?)*$")


def valid_host(host: str) -> bool:
    try:
        ipaddress.IPv4Address(host)
        return True
    except ValueError:
        pass
    if re.fullmatch(r"[\d.]+", host):
        return False  # looks like a broken dotted quad
    return bool(_HOSTNAME.match(host))


@dataclass
class ClusterRegistryEntry:
    name: str
    host: str = ""
    scheduler: str = "slurm"
    resources: str = ""
    libraries: str = ""
    extra: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "host": self.host, "scheduler": self.scheduler,
                "resources": self.resources, "libraries": self.libraries, "extra": dict(self.extra)}


def parse_assignments(items: Iterable[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise MalformedAssignment(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if not _KEY.match(key) or key == "name":
            raise MalformedAssignment(f"bad key in {item!r}")
        out[key] = value.strip()
    for key, value in out.items():
        if key == "host" and not valid_host(value):
            raise MalformedAssignment(f"host is neither a dotted quad nor a hostname: {value!r}")
        if key == "scheduler" and value not in ("slurm", "sge"):
            raise MalformedAssignment(f"scheduler must be slurm or sge, not {value!r}")
    return out


def default_registry_path(home: Path) -> Path:
    env = os.environ.get("EMS_REGISTRY")
    return Path(env) if env else Path(home) / "ssh_config"


class ClusterRegistry:
    def __init__(self, path: Path):
        self.path = Path(path)

    def _read(self) -> configparser.ConfigParser:
        parser = configparser.ConfigParser(interpolation=None)
        if self.path.exists():
            parser.read(self.path, encoding="utf-8")
        return parser

    @staticmethod
    def _entry(name: str, section) -> ClusterRegistryEntry:
        data = dict(section)
        known = {k: data.pop(k) for k in KNOWN_KEYS if k in data}
        return ClusterRegistryEntry(name, extra=data, **known)

    def entries(self) -> dict[str, ClusterRegistryEntry]:
        parser = self._read()
        return {name: self._entry(name, parser[name]) for name in parser.sections()}

    def get(self, name: str) -> ClusterRegistryEntry:
        parser = self._read()
        if not parser.has_section(name):
            raise UnknownCluster(f"cluster {name!r} is not configured in {self.path}; "
                                 "use config-update --create")
        return self._entry(name, parser[name])

    def update(self, name: str, assignments: Iterable[str] | dict[str, str],
               create: bool = False) -> ClusterRegistryEntry:
        """Change only the listed keys of ``name``; an empty list is a no-op."""
        changes = assignments if isinstance(assignments, dict) else parse_assignments(assignments)
        if isinstance(assignments, dict):
            parse_assignments(f"{k}={v}" for k, v in changes.items())
        parser = self._read()
        if not parser.has_section(name):
            if not create:
                raise UnknownCluster(f"cluster {name!r} is not configured; pass --create")
            parser.add_section(name)
            parser[name]["scheduler"] = "slurm"
        elif not changes:
            return self._entry(name, parser[name])
        for key, value in changes.items():
            parser[name][key] = value
        buf = io.StringIO()
        parser.write(buf)
        atomic_write_text(self.path, buf.getvalue())
        return self._entry(name, parser[name])
