"""``ems`` command-line entry point.

Exit status: 0 on success, 1 on a domain error, 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import experiment
from .backends import MapFailure, ServerlessBackend, get_profile, parse_alloc
from .bundlegraph import BundleItem, SchemaItem, TextItem, Worksheet
from .errors import EMSError
from .harvest import get as harvest_get
from .harvest import reduce as harvest_reduce
from .provision import ClusterSpec, setup_time

logger = logging.getLogger("ems")


class UsageError(Exception):
    pass


def _emit(args, verb: str, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps({"ok": True, "verb": verb, **payload}, sort_keys=True, indent=2))
    elif text:
        print(text)


def _job_line(r) -> str:
    code = "" if r.exit_code is None else f" exit={r.exit_code}"
    return f"  job {r.job_index:>4}  id={r.backend}/{r.job_id}  {r.state}{code}"


def _progress_text(progress: dict) -> str:
    return ", ".join(f"{k}: {v}" for k, v in progress.items()) or "no jobs"


# -- cluster ------------------------------------------------------------------

def cmd_cluster(args, home: experiment.Home) -> None:
    mgr = home.clusters
    if args.action == "start":
        spec = mgr.read_config(args.name)
        fields = {"n_nodes": args.nodes, "gpu_per_node": args.gpus, "scheduler": args.scheduler,
                  "batch_setup_minutes": args.setup_minutes}
        base = spec.__dict__ if spec else {"name": args.name}
        spec = ClusterSpec(**{**base, **{k: v for k, v in fields.items() if v is not None}})
        handle = mgr.start_cluster(spec)
        if args.wait:
            handle = mgr.wait(args.name)
        _emit(args, "cluster start", {"cluster": handle.to_dict(), "setup_minutes": spec.setup_minutes},
              f"cluster {spec.name}: {handle.state}, frontend {handle.frontend_address}, "
              f"ready at {handle.ready_at} (setup {spec.setup_minutes:g} min)")
    elif args.action == "stop":
        handle = mgr.stop_cluster(args.name)
        _emit(args, "cluster stop", {"cluster": handle.to_dict()}, f"cluster {args.name}: stopped")
    elif args.action == "wait":
        handle = mgr.wait(args.name)
        _emit(args, "cluster wait", {"cluster": handle.to_dict()}, f"cluster {args.name}: {handle.state}")
    elif args.action == "list":
        handles = mgr.clusters()
        _emit(args, "cluster list", {"clusters": [h.to_dict() for h in handles]},
              "\n".join(f"{h.name}\t{h.state}\t{h.frontend_address or '-'}" for h in handles))
    elif args.action == "list-nodes":
        rows = mgr.list_nodes(args.name)
        _emit(args, "cluster list-nodes", {"cluster": args.name, "nodes": [r.to_dict() for r in rows]},
              "\n".join(f"{r.name}\t{r.role}\t{r.address}" for r in rows))


def cmd_config_update(args, home) -> None:
    entry = home.cluster_registry.update(args.name, args.assignments, create=args.create)
    changed = [a.split("=", 1)[0].strip() for a in args.assignments]
    _emit(args, "config-update", {"entry": entry.to_dict(), "changed": changed},
          f"{entry.name}: host={entry.host or '-'} scheduler={entry.scheduler}")


# -- packages -----------------------------------------------------------------

def _submit(args, home, split: bool) -> None:
    verb = "parrun" if split else "run"
    res = experiment.submit(home, Path(args.script), args.cluster, [Path(d) for d in args.dep],
                            args.alloc, args.message, getattr(args, "chunk", 1), args.interpreter,
                            split=split, execute=not args.queue_only, slots=args.slots)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    payload = {"pid": res.pid, "n_jobs": res.n_jobs, "cluster": res.cluster,
               "jobs": [r.to_dict() for r in res.records], "progress": res.progress,
               "warnings": res.warnings}
    text = f"PID {res.pid}\n{res.n_jobs} job(s) on {res.cluster}: {_progress_text(res.progress)}"
    _emit(args, verb, payload, text)


def cmd_parrun(args, home) -> None:
    _submit(args, home, split=True)


def cmd_run(args, home) -> None:
    _submit(args, home, split=False)


def cmd_status(args, home) -> None:
    pid, prog, records = experiment.status(home, args.pid)
    text = f"PID {pid}: {_progress_text(prog)}\n" + "\n".join(_job_line(r) for r in records)
    _emit(args, "status", {"pid": pid, "progress": prog, "jobs": [r.to_dict() for r in records]},
          text.rstrip())


def cmd_drain(args, home) -> None:
    records = experiment.drain(home, args.cluster, args.slots)
    _emit(args, "drain", {"cluster": args.cluster, "jobs": [r.to_dict() for r in records]},
          "\n".join(_job_line(r) for r in records) or "nothing queued")


def cmd_cancel(args, home) -> None:
    rec = home.clusters.backend(args.cluster, home.registry).cancel(args.job_id)
    home.registry.flush()
    _emit(args, "cancel", {"job": rec.to_dict()}, _job_line(rec))


def cmd_reduce(args, home) -> None:
    pid = home.resolve_pid(args.pid)
    report = harvest_reduce(home.packages, pid, args.file, home.registry)
    text = (f"reduced {len(report.jobs_included)} job(s) into {report.output_path}"
            + (" (header kept once)" if report.header_deduplicated else ""))
    if report.jobs_missing:
        text += f"\nmissing in jobs: {report.jobs_missing}"
    if report.jobs_excluded:
        text += f"\nstill running, excluded: {report.jobs_excluded}"
    _emit(args, "reduce", {"report": report.to_dict()}, text)


def cmd_get(args, home) -> None:
    pid = home.resolve_pid(args.pid)
    res = harvest_get(home.packages, pid, Path(args.dest))
    _emit(args, "get", res.to_dict(), f"{len(res.files)} file(s) copied to {res.dest}")


# -- bundles ------------------------------------------------------------------

def _bundle_text(b) -> str:
    return f"{b.bundle_id}  {b.kind}  {b.name}  {b.state}"


def cmd_upload(args, home) -> None:
    b = home.store.upload(Path(args.path), args.name)
    _emit(args, "upload", {"bundle": b.to_dict()}, _bundle_text(b))


def cmd_brun(args, home) -> None:
    if len(args.items) < 1:
        raise UsageError("brun needs a command")
    *specs, command = args.items
    deps = []
    for spec in specs:
        if ":" not in spec:
            raise UsageError(f"dependency must be alias:ref, got {spec!r}")
        alias, ref = spec.split(":", 1)
        deps.append((alias, ref))
    b = home.store.run(deps, command, args.name, args.timeout)
    _emit(args, "brun", {"bundle": b.to_dict()}, _bundle_text(b))
    if b.state != "ready":
        raise EMSError(f"run bundle {b.bundle_id} failed with exit code {b.exit_code}")


def cmd_mimic(args, home) -> None:
    res = home.store.mimic(args.old, args.new, args.timeout)
    text = "\n".join(f"{o[:8]} -> {n[:8]}" for o, n in res.mapping.items())
    if res.failed:
        text += f"\nfailed: {', '.join(f[:8] for f in res.failed)}"
    _emit(args, "mimic", res.to_dict(), text)


def cmd_worksheet(args, home) -> None:
    store = home.store
    if args.action == "render":
        md = store.render_worksheet(store.load_worksheet(args.name))
        if args.json:
            _emit(args, "worksheet render", {"name": args.name, "markdown": md}, "")
        else:
            sys.stdout.write(md)
        return
    try:
        ws = store.load_worksheet(args.name)
    except EMSError:
        ws = Worksheet(args.name)
    if args.text is not None:
        ws.items.append(TextItem(args.text))
    if args.bundle is not None:
        ws.items.append(BundleItem(store.resolve(args.bundle)))
    if args.schema is not None:
        ws.items.append(SchemaItem(tuple(args.schema.split())))
    path = store.save_worksheet(ws)
    _emit(args, "worksheet add", {"name": args.name, "items": len(ws.items)}, f"{path}")


def cmd_map(args, home) -> None:
    values = Path(args.values_file).read_text(encoding="utf-8").splitlines()
    values = [v for v in values if v.strip()]
    profile = None if args.profile == "local" else get_profile(args.profile, home.profiles_config)
    req = parse_alloc(args.alloc)
    changes = {k: v for k, v in {"memory_gb": args.memory_gb, "disk_gb": args.disk_gb,
                                 "deployment_mb": args.deployment_mb,
                                 "max_runtime_s": args.max_runtime}.items() if v is not None}
    req = req.with_(**changes)
    results = ServerlessBackend(profile, home.registry, home.root / "work").map(
        args.template, values, req, args.slots)
    home.registry.flush()
    out = [r.to_dict() if isinstance(r, MapFailure) else r for r in results]
    text = "\n".join(f"!{r.state}" if isinstance(r, MapFailure) else r for r in results)
    _emit(args, "map", {"profile": args.profile, "results": out}, text)


def cmd_setup_time(args, home) -> None:
    minutes = setup_time(args.nodes, args.gpu, args.T)
    _emit(args, "setup-time", {"minutes": minutes}, f"{minutes:g} min")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="machine-readable output")

    p = argparse.ArgumentParser(prog="ems", description="Experiment management for massive "
                                "computational experiments.", parents=[common])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")

    c = sub.add_parser("cluster", help="simulated cluster lifecycle", parents=[common])
    csub = c.add_subparsers(dest="action", required=True)
    cs = csub.add_parser("start", parents=[common])
    cs.add_argument("name")
    cs.add_argument("--nodes", type=int)
    cs.add_argument("--gpus", type=int, help="GPUs per node")
    cs.add_argument("--scheduler", choices=["slurm", "sge"])
    cs.add_argument("--setup-minutes", "-T", type=float, dest="setup_minutes")
    cs.add_argument("--wait", action="store_true", help="advance the clock until the cluster is up")
    for action in ("stop", "wait", "list-nodes"):
        csub.add_parser(action, parents=[common]).add_argument("name")
    csub.add_parser("list", parents=[common])
    c.set_defaults(func=cmd_cluster)

    cu = sub.add_parser("config-update", help="update a cluster registry entry", parents=[common])
    cu.add_argument("name")
    cu.add_argument("assignments", nargs="*", metavar="key=value")
    cu.add_argument("--create", action="store_true")
    cu.set_defaults(func=cmd_config_update)

    for verb, func, help_ in (("parrun", cmd_parrun, "split a grid script into jobs and run them"),
                              ("run", cmd_run, "run a script as a single job")):
        sp = sub.add_parser(verb, help=help_, parents=[common])
        sp.add_argument("script")
        sp.add_argument("cluster")
        sp.add_argument("--dep", "-dep", action="append", default=[], help="dependency file or directory")
        sp.add_argument("--alloc", "-alloc", help="scheduler resource string, e.g. '--gres:gpu:1'")
        sp.add_argument("-m", "--message", default="")
        sp.add_argument("--interpreter")
        sp.add_argument("--slots", type=int)
        sp.add_argument("--queue-only", action="store_true", help="submit without running")
        if verb == "parrun":
            sp.add_argument("--chunk", type=int, default=1, help="grid points per job")
        sp.set_defaults(func=func)

    st = sub.add_parser("status", help="progress of a package", parents=[common])
    st.add_argument("pid")
    st.set_defaults(func=cmd_status)

    dr = sub.add_parser("drain", help="run queued jobs of a cluster", parents=[common])
    dr.add_argument("cluster")
    dr.add_argument("--slots", type=int)
    dr.set_defaults(func=cmd_drain)

    ca = sub.add_parser("cancel", help="cancel a queued or running job", parents=[common])
    ca.add_argument("cluster")
    ca.add_argument("job_id")
    ca.set_defaults(func=cmd_cancel)

    rd = sub.add_parser("reduce", help="concatenate a result file across jobs", parents=[common])
    rd.add_argument("file")
    rd.add_argument("pid")
    rd.set_defaults(func=cmd_reduce)

    g = sub.add_parser("get", help="copy a package's results locally", parents=[common])
    g.add_argument("pid")
    g.add_argument("--dest", default=".")
    g.set_defaults(func=cmd_get)

    up = sub.add_parser("upload", help="upload a file or directory bundle", parents=[common])
    up.add_argument("path")
    up.add_argument("--name")
    up.set_defaults(func=cmd_upload)

    br = sub.add_parser("brun", help="create a run bundle", parents=[common])
    br.add_argument("items", nargs="+", metavar="alias:ref ... command")
    br.add_argument("--name")
    br.add_argument("--timeout", type=float)
    br.set_defaults(func=cmd_brun)

    mi = sub.add_parser("mimic", help="re-run everything downstream of OLD with NEW", parents=[common])
    mi.add_argument("old")
    mi.add_argument("new")
    mi.add_argument("--timeout", type=float)
    mi.set_defaults(func=cmd_mimic)

    ws = sub.add_parser("worksheet", help="worksheets", parents=[common])
    wsub = ws.add_subparsers(dest="action", required=True)
    wsub.add_parser("render", parents=[common]).add_argument("name")
    wa = wsub.add_parser("add", parents=[common])
    wa.add_argument("name")
    group = wa.add_mutually_exclusive_group(required=True)
    group.add_argument("--text")
    group.add_argument("--bundle")
    group.add_argument("--schema")
    ws.set_defaults(func=cmd_worksheet)

    mp = sub.add_parser("map", help="map a command template over values", parents=[common])
    mp.add_argument("profile", help="lambda, gcf, azure, a configured profile, or local")
    mp.add_argument("template", help="shell command; {value} and {index} are substituted")
    mp.add_argument("values_file")
    mp.add_argument("--slots", type=int, default=16)
    mp.add_argument("--alloc")
    mp.add_argument("--memory-gb", type=float)
    mp.add_argument("--disk-gb", type=float)
    mp.add_argument("--deployment-mb", type=float)
    mp.add_argument("--max-runtime", type=int)
    mp.set_defaults(func=cmd_map)

    su = sub.add_parser("setup-time", help="modelled cluster setup time in minutes", parents=[common])
    su.add_argument("nodes", type=int)
    su.add_argument("--gpu", action="store_true")
    su.add_argument("-T", type=float, default=20.0)
    su.set_defaults(func=cmd_setup_time)
    return p


def _fix_argv(argv: Sequence[str]) -> list[str]:
    """Glue option values that start with '-' (``--alloc '--gres:gpu:1'``) to their flag."""
    out: list[str] = []
    it = iter(argv)
    for tok in it:
        if tok in ("--alloc", "-alloc"):
            value = next(it, None)
            out.append(f"--alloc={value}" if value is not None else tok)
        else:
            out.append(tok)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    argv = _fix_argv(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "json"):
        args.json = False
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        home = experiment.Home()
        args.func(args, home)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ems: error: {exc}", file=sys.stderr)
        return 2
    except (EMSError, ValueError, OSError) as exc:
        kind = exc.kind if isinstance(exc, EMSError) else type(exc).__name__
        if args.json:
            print(json.dumps({"ok": False, "error": kind, "message": str(exc)}, sort_keys=True))
        print(f"error: {kind}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
