"""Serverless execution profile: per-invocation limits and an ordered ``map``.

Built-in limits (deployment MB / memory GB / ephemeral disk / max runtime s)::

    lambda   50         3.0   0.5 GB                        300
    gcf      100        2.0   shared with memory            540
    azure    unlimited  1.5   5000 (recorded as MB)         600

Invocations are simulated by the local engine; admission and timeout
semantics are the same as a real provider's.
"""
from __future__ import annotations

import configparser
import shlex
import tempfile
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Any, Sequence

from ..errors import AdmissionRefused, UnknownProfile
from ..resources import ResourceRequest
from ..scriptgrid import TaskSpec
from .local import LocalBackend
from .registry import DONE, JobRegistry

MB_PER_GB = 1024


@dataclass(frozen=True)
class ServerlessProfile:
    name: str
    deployment_mb_limit: float | None  # None: unlimited
    memory_gb_limit: float
    disk_limit: float | None  # None when disk is carved out of memory
    disk_unit: str = "GB"
    disk_counts_against_memory: bool = False
    max_runtime_s: int = 300

    @property
    def disk_gb_limit(self) -> float | None:
        if self.disk_counts_against_memory:
            return self.memory_gb_limit
        if self.disk_limit is None:
            return None
        return self.disk_limit / MB_PER_GB if self.disk_unit == "MB" else self.disk_limit

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "deployment_mb_limit": self.deployment_mb_limit,
            "memory_gb_limit": self.memory_gb_limit,
            "disk_limit": self.disk_limit,
            "disk_unit": self.disk_unit,
            "disk_counts_against_memory": self.disk_counts_against_memory,
            "max_runtime_s": self.max_runtime_s,
        }


BUILTIN_PROFILES = {
    "lambda": ServerlessProfile("lambda", 50, 3.0, 0.5, "GB", False, 300),
    "gcf": ServerlessProfile("gcf", 100, 2.0, None, "GB", True, 540),
    "azure": ServerlessProfile("azure", None, 1.5, 5000, "MB", False, 600),
}

_UNLIMITED = {"unlimited", "n/a", "none", ""}


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in _UNLIMITED else float(text)


def load_profiles(config: Path | None = None) -> dict[str, ServerlessProfile]:
    """Built-in profiles, overridden per key by an INI file (one section per profile)."""
    profiles = dict(BUILTIN_PROFILES)
    if config is None or not Path(config).is_file():
        return profiles
    parser = configparser.ConfigParser()
    parser.read(config)
    for section in parser.sections():
        base = profiles.get(section, ServerlessProfile(section, None, 1.0, None))
        sec = parser[section]
        changes: dict[str, Any] = {}
        if "deployment_mb_limit" in sec:
            changes["deployment_mb_limit"] = _opt_float(sec["deployment_mb_limit"])
        if "memory_gb_limit" in sec:
            changes["memory_gb_limit"] = float(sec["memory_gb_limit"])
        if "disk_limit" in sec:
            changes["disk_limit"] = _opt_float(sec["disk_limit"])
        if "disk_unit" in sec:
            changes["disk_unit"] = sec["disk_unit"].strip().upper()
        if "disk_counts_against_memory" in sec:
            changes["disk_counts_against_memory"] = sec.getboolean("disk_counts_against_memory")
        if "max_runtime_s" in sec:
            changes["max_runtime_s"] = int(sec["max_runtime_s"])
        profiles[section] = replace(base, **changes)
    return profiles


def get_profile(name: str, config: Path | None = None) -> ServerlessProfile:
    profiles = load_profiles(config)
    try:
        return profiles[name]
    except KeyError:
        raise UnknownProfile(f"unknown serverless profile {name!r}; known: {sorted(profiles)}") from None


@dataclass(frozen=True)
class Admission:
    accepted: bool
    reasons: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.accepted


def _d(x: float) -> Decimal:
    # repr keeps the shortest decimal that round-trips, so 0.1 stays 0.1
    return Decimal(repr(x)) if isinstance(x, float) else Decimal(x)


def admit(req: ResourceRequest, profile: ServerlessProfile) -> Admission:
    """Accept iff no per-invocation limit of ``profile`` is exceeded."""
    reasons = []
    if profile.deployment_mb_limit is not None and _d(req.deployment_mb) > _d(profile.deployment_mb_limit):
        reasons.append("deployment")
    if _d(req.memory_gb) > _d(profile.memory_gb_limit):
        reasons.append("memory")
    if profile.disk_counts_against_memory:
        if _d(req.memory_gb) + _d(req.disk_gb) > _d(profile.memory_gb_limit):
            reasons.append("combined")
    elif profile.disk_limit is not None:
        if profile.disk_unit == "MB":
            over = _d(req.disk_gb) * MB_PER_GB > _d(profile.disk_limit)
        else:
            over = _d(req.disk_gb) > _d(profile.disk_limit)
        if over:
            reasons.append("disk")
    if req.max_runtime_s > profile.max_runtime_s:
        reasons.append("runtime")
    return Admission(not reasons, tuple(reasons))


@dataclass
class MapFailure:
    """Placeholder returned at the index of a failed ``map`` task."""

    index: int
    value: Any
    state: str
    exit_code: int | None
    stderr: str = ""

    def __bool__(self) -> bool:
        return False

    def to_dict(self) -> dict:
        return {"failed": True, "index": self.index, "value": self.value, "state": self.state,
                "exit_code": self.exit_code, "stderr": self.stderr}


def instantiate(template: str, value: Any, index: int) -> str:
    """Substitute ``{value}`` (shell-quoted) and ``{index}`` into a command template."""
    return template.replace("{value}", shlex.quote(str(value))).replace("{index}", str(index))


def _strip_newline(text: str) -> str:
    return text[:-1] if text.endswith("\n") else text


class ServerlessBackend:
    """``map`` over a profile; ``profile=None`` runs with no admission limits."""

    def __init__(self, profile: ServerlessProfile | None = None, registry: JobRegistry | None = None,
                 workroot: Path | None = None):
        self.profile = profile
        self.registry = registry if registry is not None else JobRegistry()
        self.workroot = Path(workroot) if workroot else None
        name = f"serverless-{profile.name}" if profile else "local-map"
        self.engine = LocalBackend(self.registry, name=name)

    def admit(self, req: ResourceRequest) -> Admission:
        if self.profile is None:
            return Admission(True)
        return admit(req, self.profile)

    def map(self, template: str, values: Sequence[Any], resources: ResourceRequest | None = None,
            slots: int = 16, pid: str = "") -> list[Any]:
        """Run one task per value; results come back in input order.

        Each task runs ``template`` through ``/bin/sh -c`` with the value
        substituted and ``EMS_INPUT_INDEX``/``EMS_INPUT_VALUE`` set. A task's
        result is its stdout (one trailing newline removed); a failed or
        timed-out task yields a :class:`MapFailure` at its index.
        """
        req = resources or ResourceRequest()
        verdict = self.admit(req)
        if not verdict:
            raise AdmissionRefused(verdict.reasons)
        values = list(values)
        if not values:
            return []
        if self.workroot:
            self.workroot.mkdir(parents=True, exist_ok=True)
        base = self.workroot or Path(tempfile.mkdtemp(prefix="ems-map-"))
        run_dir = Path(tempfile.mkdtemp(prefix="map-", dir=base)) if self.workroot else base
        ids = []
        for i, value in enumerate(values):
            task = TaskSpec(i, [{"value": value}], "", 0, req, pid,
                            command=["/bin/sh", "-c", instantiate(template, value, i)],
                            workdir=str(run_dir / str(i)),
                            env={"EMS_INPUT_INDEX": str(i), "EMS_INPUT_VALUE": str(value)})
            ids.append(self.engine.submit(task).job_id)
        self.engine.run_local(slots=slots, only=set(ids))
        results: list[Any] = []
        for i, jid in enumerate(ids):
            rec = self.engine.status(jid)
            wd = Path(rec.workdir)
            if rec.state == DONE:
                results.append(_strip_newline((wd / "stdout.txt").read_text(errors="replace")))
            else:
                err = (wd / "stderr.txt").read_text(errors="replace") if (wd / "stderr.txt").exists() else ""
                results.append(MapFailure(i, values[i], rec.state, rec.exit_code, err))
        return results


def map_values(template: str, values: Sequence[Any], profile: ServerlessProfile | None = None,
               resources: ResourceRequest | None = None, slots: int = 16, **kw) -> list[Any]:
    return ServerlessBackend(profile, **kw).map(template, values, resources, slots)
