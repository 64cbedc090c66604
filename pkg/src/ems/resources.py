"""Resource requests and ``--alloc`` string parsing."""
from __future__ import annotations

import math
import re
import shlex
from dataclasses import asdict, dataclass, field, replace

from .errors import InvalidResource

MAX_QUANTITY = 10**6

_MEM_UNITS = {"K": 1 / 1024**2, "M": 1 / 1024, "G": 1.0, "T": 1024.0}


@dataclass(frozen=True)
class ResourceRequest:
    cpus: int = 1
    gpus: int = 0
    memory_gb: float = 1.0
    deployment_mb: float = 1.0
    disk_gb: float = 0.0
    max_runtime_s: int = 300
    passthrough: tuple[str, ...] = field(default=())

    def __post_init__(self):
        positive = {"cpus": self.cpus, "memory_gb": self.memory_gb,
                    "deployment_mb": self.deployment_mb, "max_runtime_s": self.max_runtime_s}
        non_negative = {"gpus": self.gpus, "disk_gb": self.disk_gb}
        for name, value in {**positive, **non_negative}.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise InvalidResource(f"{name} must be a number, got {value!r}")
            if not math.isfinite(value) or value > MAX_QUANTITY:
                raise InvalidResource(f"{name} out of range: {value!r}")
        for name, value in positive.items():
            if value <= 0:
                raise InvalidResource(f"{name} must be positive, got {value!r}")
        for name, value in non_negative.items():
            if value < 0:
                raise InvalidResource(f"{name} must be non-negative, got {value!r}")
        for name in ("cpus", "gpus", "max_runtime_s"):
            if int(getattr(self, name)) != getattr(self, name):
                raise InvalidResource(f"{name} must be an integer")
        object.__setattr__(self, "passthrough", tuple(self.passthrough))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passthrough"] = list(self.passthrough)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ResourceRequest":
        data = dict(data)
        data["passthrough"] = tuple(data.get("passthrough", ()))
        return cls(**data)

    def with_(self, **changes) -> "ResourceRequest":
        return replace(self, **changes)


def _parse_memory(text: str) -> float:
    m = re.fullmatch(r"(\d+(?:\.\d+)?)([KMGT]?)B?", text.strip(), re.IGNORECASE)
    if not m:
        raise InvalidResource(f"cannot parse memory size {text!r}")
    number, unit = float(m.group(1)), m.group(2).upper() or "M"  # bare number: MB, as SLURM
    return number * _MEM_UNITS[unit]


def _parse_time(text: str) -> int:
    days = 0
    if "-" in text:
        d, text = text.split("-", 1)
        days = int(d)
    parts = [int(p) for p in text.split(":")]
    if len(parts) == 1:
        seconds = parts[0] * 60  # bare number: minutes
    elif len(parts) == 2:
        seconds = parts[0] * 60 + parts[1]
    elif len(parts) == 3:
        seconds = parts[0] * 3600 + parts[1] * 60 + parts[2]
    else:
        raise InvalidResource(f"cannot parse time {text!r}")
    return days * 86400 + seconds


_GRES = re.compile(r"^-{0,2}gres[:=]gpu(?::[\w.-]+)?:(\d+)$")
_KV = re.compile(r"^-{1,2}(mem|cpus-per-task|time|c|t)(?:=(.*))?$")


def parse_alloc(alloc: str | None, base: ResourceRequest | None = None) -> ResourceRequest:
    """Fold an ``--alloc`` string into a :class:`ResourceRequest`.

    Understood: ``gres:gpu:<n>`` (``--gres=gpu:<n>`` and the ``--gres:gpu:<n>``
    spelling), ``--mem``, ``--cpus-per-task``/``-c`` and ``--time``/``-t``.
    Anything else is kept verbatim in ``passthrough``.
    """
    req = base or ResourceRequest()
    if not alloc:
        return req
    changes: dict = {}
    extra = list(req.passthrough)
    tokens = shlex.split(alloc)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        gres = _GRES.match(tok)
        kv = _KV.match(tok)
        if gres:
            changes["gpus"] = int(gres.group(1))
        elif kv:
            key, value = kv.group(1), kv.group(2)
            if value is None:
                if i + 1 >= len(tokens):
                    raise InvalidResource(f"{tok} needs a value")
                i += 1
                value = tokens[i]
            if key == "mem":
                changes["memory_gb"] = _parse_memory(value)
            elif key in ("cpus-per-task", "c"):
                changes["cpus"] = int(value)
            else:
                changes["max_runtime_s"] = _parse_time(value)
        else:
            extra.append(tok)
        i += 1
    changes["passthrough"] = tuple(extra)
    return replace(req, **changes)
