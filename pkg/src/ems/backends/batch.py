"""SLURM and SGE batch-script emission."""
from __future__ import annotations

import math
import shlex

from ..scriptgrid import TaskSpec

SCHEDULERS = ("slurm", "sge")


def _hms(seconds: int, days_prefix: bool) -> str:
    days, rem = divmod(int(seconds), 86400)
    h, rem = divmod(rem, 3600)
    m, s = divmod(rem, 60)
    if days and days_prefix:
        return f"{days}-{h:02d}:{m:02d}:{s:02d}"
    return f"{days * 24 + h:02d}:{m:02d}:{s:02d}"


def _mem(gb: float) -> str:
    if float(gb).is_integer():
        return f"{int(gb)}G"
    return f"{math.ceil(gb * 1024)}M"


def job_name(task: TaskSpec) -> str:
    return f"{task.pid[:8]}_{task.job_index}"


def _body(task: TaskSpec) -> list[str]:
    lines = [
        'cd "$(dirname "$0")"',
        f"export EMS_PID={task.pid}",
        f"export EMS_JOB_INDEX={task.job_index}",
        f"export EMS_SEED={task.seed}",
    ]
    for key, value in sorted(task.env.items()):
        lines.append(f"export {key}={shlex.quote(str(value))}")
    lines.append(shlex.join(task.command))
    return lines


def emit_slurm(task: TaskSpec) -> str:
    r = task.resources
    lines = ["#!/bin/bash", f"#SBATCH --job-name={job_name(task)}", "#SBATCH --ntasks=1"]
    if r.cpus > 1:
        lines.append(f"#SBATCH --cpus-per-task={r.cpus}")
    lines.append(f"#SBATCH --mem={_mem(r.memory_gb)}")
    lines.append(f"#SBATCH --time={_hms(r.max_runtime_s, days_prefix=True)}")
    if r.gpus > 0:
        lines.append(f"#SBATCH --gres=gpu:{r.gpus}")
    lines.append("#SBATCH --output=slurm-%j.out")
    lines += [f"#SBATCH {tok}" for tok in r.passthrough]
    lines.append("")
    lines += _body(task)
    return "\n".join(lines) + "\n"


def emit_sge(task: TaskSpec) -> str:
    r = task.resources
    lines = ["#!/bin/bash", f"#$ -N {job_name(task)}", "#$ -S /bin/bash", "#$ -cwd"]
    if r.cpus > 1:
        lines.append(f"#$ -pe smp {r.cpus}")
    lines.append(f"#$ -l h_vmem={_mem(r.memory_gb)}")
    lines.append(f"#$ -l h_rt={_hms(r.max_runtime_s, days_prefix=False)}")
    if r.gpus > 0:
        lines.append(f"#$ -l gpu={r.gpus}")
    lines.append("#$ -o sge-$JOB_ID.out")
    lines += [f"#$ {tok}" for tok in r.passthrough]
    lines.append("")
    lines += _body(task)
    return "\n".join(lines) + "\n"


def emit_batch_script(task: TaskSpec, scheduler: str) -> str:
    if scheduler == "slurm":
        return emit_slurm(task)
    if scheduler == "sge":
        return emit_sge(task)
    raise ValueError(f"unknown scheduler {scheduler!r}; expected one of {SCHEDULERS}")
