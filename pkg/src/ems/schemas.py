"""JSON Schemas of the ``--json`` output of every CLI verb."""
from __future__ import annotations

_str = {"type": "string"}
_int = {"type": "integer"}
_nullable_int = {"type": ["integer", "null"]}
_nullable_str = {"type": ["string", "null"]}

JOB = {
    "type": "object",
    "required": ["job_id", "backend", "pid", "job_index", "state", "submit_time"],
    "properties": {
        "job_id": _str, "backend": _str, "pid": _str, "job_index": _int,
        "state": {"enum": ["queued", "running", "done", "failed", "timed_out", "cancelled"]},
        "submit_time": _str, "start_time": _nullable_str, "end_time": _nullable_str,
        "exit_code": _nullable_int,
    },
}
CLUSTER = {
    "type": "object",
    "required": ["spec", "state", "frontend_address", "ready_at"],
    "properties": {
        "spec": {"type": "object", "required": ["name", "n_nodes", "gpu_per_node", "scheduler",
                                                "batch_setup_minutes"]},
        "state": {"enum": ["provisioning", "running", "stopped"]},
        "frontend_address": _nullable_str, "ready_at": _str,
    },
}
BUNDLE = {
    "type": "object",
    "required": ["bundle_id", "kind", "name", "deps", "state", "contents_hash"],
    "properties": {
        "bundle_id": {"type": "string", "pattern": "^[0-9a-f]{40}$"},
        "kind": {"enum": ["upload", "run"]},
        "state": {"enum": ["created", "staged", "running", "ready", "failed"]},
        "deps": {"type": "array", "items": {"type": "array", "items": _str, "minItems": 2, "maxItems": 2}},
    },
}
PROGRESS = {"type": "object", "additionalProperties": _int}


def _envelope(verb: str, required: list[str], props: dict) -> dict:
    return {
        "type": "object",
        "required": ["ok", "verb"] + required,
        "properties": {"ok": {"const": True}, "verb": {"const": verb}, **props},
    }


VERB_SCHEMAS = {
    "cluster start": _envelope("cluster start", ["cluster", "setup_minutes"],
                               {"cluster": CLUSTER, "setup_minutes": {"type": "number"}}),
    "cluster stop": _envelope("cluster stop", ["cluster"], {"cluster": CLUSTER}),
    "cluster wait": _envelope("cluster wait", ["cluster"], {"cluster": CLUSTER}),
    "cluster list": _envelope("cluster list", ["clusters"], {"clusters": {"type": "array", "items": CLUSTER}}),
    "cluster list-nodes": _envelope("cluster list-nodes", ["cluster", "nodes"], {
        "cluster": _str,
        "nodes": {"type": "array", "items": {"type": "object", "required": ["name", "role", "address"]}}}),
    "config-update": _envelope("config-update", ["entry", "changed"], {
        "entry": {"type": "object", "required": ["name", "host", "scheduler"]},
        "changed": {"type": "array", "items": _str}}),
    "parrun": _envelope("parrun", ["pid", "n_jobs", "cluster", "jobs", "progress"], {
        "pid": {"type": "string", "pattern": "^[0-9a-f]{40}$"}, "n_jobs": _int, "cluster": _str,
        "jobs": {"type": "array", "items": JOB}, "progress": PROGRESS,
        "warnings": {"type": "array", "items": _str}}),
    "run": _envelope("run", ["pid", "n_jobs", "cluster", "jobs", "progress"], {
        "pid": {"type": "string", "pattern": "^[0-9a-f]{40}$"}, "n_jobs": {"const": 1},
        "jobs": {"type": "array", "items": JOB}, "progress": PROGRESS}),
    "status": _envelope("status", ["pid", "progress", "jobs"], {
        "pid": _str, "progress": PROGRESS, "jobs": {"type": "array", "items": JOB}}),
    "drain": _envelope("drain", ["cluster", "jobs"], {"jobs": {"type": "array", "items": JOB}}),
    "cancel": _envelope("cancel", ["job"], {"job": JOB}),
    "reduce": _envelope("reduce", ["report"], {"report": {
        "type": "object",
        "required": ["pid", "filename", "jobs_included", "jobs_missing", "header_deduplicated",
                     "output_path"],
        "properties": {"jobs_included": {"type": "array", "items": _int},
                       "jobs_missing": {"type": "array", "items": _int},
                       "header_deduplicated": {"type": "boolean"}}}}),
    "get": _envelope("get", ["pid", "dest", "files"], {
        "files": {"type": "object", "additionalProperties": {"type": "string", "pattern": "^[0-9a-f]{40}$"}}}),
    "upload": _envelope("upload", ["bundle"], {"bundle": BUNDLE}),
    "brun": _envelope("brun", ["bundle"], {"bundle": BUNDLE}),
    "mimic": _envelope("mimic", ["mapping", "executed", "failed"], {
        "mapping": {"type": "object", "additionalProperties": _str},
        "executed": {"type": "array", "items": _str}, "failed": {"type": "array", "items": _str}}),
    "worksheet render": _envelope("worksheet render", ["name", "markdown"], {"markdown": _str}),
    "worksheet add": _envelope("worksheet add", ["name", "items"], {"items": _int}),
    "map": _envelope("map", ["profile", "results"], {
        "profile": _str,
        "results": {"type": "array", "items": {"anyOf": [
            _str, {"type": "object", "required": ["failed", "index", "state"]}]}}}),
    "setup-time": _envelope("setup-time", ["minutes"], {"minutes": {"type": "number"}}),
}

ERROR_SCHEMA = {
    "type": "object",
    "required": ["ok", "error", "message"],
    "properties": {"ok": {"const": False}, "error": _str, "message": _str},
}
