"""Execution backends sharing one contract: submit, status, cancel, run."""
from ..resources import ResourceRequest, parse_alloc
from .batch import SCHEDULERS, emit_batch_script
from .local import LocalBackend
from .registry import (CANCELLED, DONE, FAILED, QUEUED, RUNNING, STATES, TERMINAL, TIMED_OUT,
                       JobRecord, JobRegistry, audit)
from .serverless import (BUILTIN_PROFILES, Admission, MapFailure, ServerlessBackend,
                         ServerlessProfile, admit, get_profile, load_profiles, map_values)

__all__ = [
    "ResourceRequest", "parse_alloc", "SCHEDULERS", "emit_batch_script", "LocalBackend",
    "JobRecord", "JobRegistry", "audit", "STATES", "TERMINAL", "QUEUED", "RUNNING", "DONE",
    "FAILED", "TIMED_OUT", "CANCELLED", "BUILTIN_PROFILES", "Admission", "MapFailure",
    "ServerlessBackend", "ServerlessProfile", "admit", "get_profile", "load_profiles", "map_values",
]
