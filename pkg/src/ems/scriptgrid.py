"""Automatic parallelization of serially written grid scripts.

A grid script loops over a handful of literal ranges, e.g.::

    for architecture in range(10):
        for dataset in range(5):
            train(architecture, dataset)

The outermost *perfect* loop nest is located, its cartesian grid is expanded in
row-major order, and for every grid point the loop headers are replaced by
constant bindings so that each job runs exactly one iteration.

Two header dialects are recognized:

* colon form, ``for <ident> in <range>:`` with an indentation-delimited body;
  ``range(...)`` is half-open.
* equals form, ``for <ident> = <range>`` ... ``end`` with a keyword-delimited
  body; ``a:b`` and ``a:c:b`` include ``b``.

Range expressions must be literal: ``range(a[,b[,c]])``, ``a:b``, ``a:c:b`` or a
bracketed list of literals. Anything computed raises :class:`UnsupportedRange`.
"""
from __future__ import annotations

import ast
import itertools
import json
import logging
import math
import re
import shlex
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path, PurePosixPath
from typing import Any, Iterator, Sequence

from .errors import EmptyGrid, MalformedLoop, NoInterpreter, NoParallelLoop, UnsupportedRange
from .fsutil import atomic_write_text, write_json
from .packaging import ExperimentPackage, derive_seeds, package_dir
from .resources import ResourceRequest

logger = logging.getLogger(__name__)

COLON = "colon"
EQUALS = "equals"

_IDENT = r"[A-Za-z_]\w*"
_LOOPISH = re.compile(r"^(\s*)(?:par)?for\b")
_COLON_HEADER = re.compile(rf"^(\s*)for\s+({_IDENT})\s+in\s+(.+?)\s*:\s*(#.*)?$")
_EQUALS_HEADER = re.compile(rf"^(\s*)(?:par)?for\s+\(?\s*({_IDENT})\s*=\s*(.+?)\s*\)?\s*[,;]?\s*([%#].*)?$")
_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_LIST_TOKEN = re.compile(
    rf"""(?P<str>'(?:[^'\\]|\\.|'')*'|"(?:[^"\\]|\\.)*")
      | (?P<num>{_NUMBER})(?![\w.])
      | (?P<word>True|False|None|true|false)\b""",
    re.VERBOSE,
)

_OPENERS = {"for", "parfor", "while", "if", "switch", "try", "spmd", "unwind_protect", "do"}
_LOOP_OPENERS = {"for", "parfor", "while", "do"}
_CLOSERS = {"end", "endfor", "endparfor", "endwhile", "endif", "endswitch", "end_try_catch",
            "endspmd", "end_unwind_protect", "until"}


# ----------------------------------------------------------------------------
# ranges


def _num(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise UnsupportedRange(f"range bound is not a literal number: {text!r}") from None


def _num_value(x: Fraction) -> int | float:
    return int(x) if x.denominator == 1 else float(x)


def _num_literal(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else repr(float(x))


@dataclass(frozen=True)
class RangeExpr:
    """A literal loop range.

    ``kind`` is ``"integer-range"`` (start/stop/step, half-open unless
    ``inclusive``) or ``"explicit-list"`` (``items`` holds the literal tokens).
    """

    kind: str
    source: str
    start: Fraction = Fraction(0)
    stop: Fraction = Fraction(0)
    step: Fraction = Fraction(1)
    inclusive: bool = False
    items: tuple[str, ...] = ()

    @property
    def length(self) -> int:
        if self.kind == "explicit-list":
            return len(self.items)
        span = (self.stop - self.start) / self.step
        if self.inclusive:
            return max(0, math.floor(span) + 1)
        return max(0, math.ceil(span))

    def __len__(self) -> int:
        return self.length

    def literal(self, i: int) -> str:
        """Source text of the ``i``-th value."""
        if not 0 <= i < self.length:
            raise IndexError(i)
        if self.kind == "explicit-list":
            return self.items[i]
        return _num_literal(self.start + i * self.step)

    def value(self, i: int) -> Any:
        if not 0 <= i < self.length:
            raise IndexError(i)
        if self.kind == "explicit-list":
            return _literal_value(self.items[i])
        return _num_value(self.start + i * self.step)

    def values(self) -> Iterator[Any]:
        return (self.value(i) for i in range(self.length))

    def literal_for(self, value: Any) -> str:
        for i in range(self.length):
            v = self.value(i)
            if v == value and type(v) is type(value):
                return self.literal(i)
        raise ValueError(f"{value!r} is not a value of range {self.source!r}")


def _literal_value(token: str) -> Any:
    if token in ("true", "false"):
        return token == "true"
    if token.startswith("'") and "''" in token[1:-1]:
        return token[1:-1].replace("''", "'")
    return ast.literal_eval(token)


def _split_list(inner: str, source: str) -> tuple[str, ...]:
    """Literal tokens of a list body; commas and/or whitespace separate items."""
    items: list[str] = []
    pos, n = 0, len(inner)

    def skip_ws(i: int) -> int:
        while i < n and inner[i] in " \t":
            i += 1
        return i

    pos = skip_ws(pos)
    while pos < n:
        m = _LIST_TOKEN.match(inner, pos)
        if not m:
            raise UnsupportedRange(f"list element is not a literal in {source!r}")
        items.append(m.group("str") or m.group("num") or m.group("word"))
        pos = skip_ws(m.end())
        if pos < n and inner[pos] == ",":
            pos = skip_ws(pos + 1)
            if pos < n and inner[pos] == ",":
                raise UnsupportedRange(f"empty list element in {source!r}")
        elif pos < n and pos == m.end():
            raise UnsupportedRange(f"list elements must be separated in {source!r}")
    return tuple(items)


def parse_range(text: str) -> RangeExpr:
    """Parse a literal range expression; raises :class:`UnsupportedRange`."""
    src = text.strip()
    m = re.fullmatch(r"range\s*\((.*)\)", src)
    if m:
        args = [a.strip() for a in m.group(1).split(",")]
        if not 1 <= len(args) <= 3 or not all(re.fullmatch(r"[-+]?\d+", a) for a in args):
            raise UnsupportedRange(f"range bounds must be literal integers: {src!r}")
        nums = [Fraction(int(a)) for a in args]
        if len(nums) == 1:
            nums = [Fraction(0), nums[0]]
        start, stop = nums[0], nums[1]
        step = nums[2] if len(nums) == 3 else Fraction(1)
        if step == 0:
            raise UnsupportedRange(f"range step must be non-zero: {src!r}")
        return RangeExpr("integer-range", src, start, stop, step)
    if src and src[0] in "[(" and src[-1:] in "])" and "[(".index(src[0]) == "])".index(src[-1]):
        return RangeExpr("explicit-list", src, items=_split_list(src[1:-1], src))
    parts = src.split(":")
    if len(parts) in (2, 3) and all(re.fullmatch(_NUMBER, p.strip()) for p in parts):
        nums = [_num(p.strip()) for p in parts]
        if len(nums) == 2:
            start, step, stop = nums[0], Fraction(1), nums[1]
        else:
            start, step, stop = nums
        if step == 0:
            raise UnsupportedRange(f"range step must be non-zero: {src!r}")
        return RangeExpr("integer-range", src, start, stop, step, inclusive=True)
    raise UnsupportedRange(f"loop range is not a literal: {src!r}")


# ----------------------------------------------------------------------------
# loop nests


@dataclass
class LoopHeader:
    variable: str
    range: RangeExpr
    source_span: tuple[int, int]
    line: str
    indent: str
    closer: str | None = None
    lead: list[str] = field(default_factory=list)
    tail: list[str] = field(default_factory=list)


@dataclass
class LoopNest:
    form: str
    headers: list[LoopHeader]
    preamble: list[str]
    body: list[str]
    epilogue: list[str]
    warnings: list[str] = field(default_factory=list)

    @property
    def variables(self) -> list[str]:
        return [h.variable for h in self.headers]

    @property
    def grid_size(self) -> int:
        return math.prod(h.range.length for h in self.headers)

    @property
    def indent(self) -> str:
        return self.headers[0].indent

    @property
    def comment(self) -> str:
        return "#" if self.form == COLON else "%"


def split_lines(text: str) -> list[str]:
    return re.findall(r"[^\n]*\n|[^\n]+$", text)


def _indent_of(line: str) -> str:
    return line[: len(line) - len(line.lstrip(" \t"))]


def _is_blank_or_comment(line: str, form: str | None = None) -> bool:
    s = line.strip()
    if not s:
        return True
    if form == EQUALS:
        return s.startswith("%") or s.startswith("#")
    return s.startswith("#")


def _strip_matlab(line: str) -> str:
    """Drop strings, comments and bracketed text so keywords can be counted."""
    out = re.sub(r"\"[^\"]*\"", " ", line)
    out = re.sub(r"(^|[\s(\[{,;=])'[^']*'", r"\1 ", out)
    out = re.split(r"[%#]", out, 1)[0]
    prev = None
    while prev != out:
        prev = out
        out = re.sub(r"\([^()]*\)|\[[^\[\]]*\]|\{[^{}]*\}", " ", out)
    return out


def _matlab_words(line: str) -> list[str]:
    return re.findall(r"[A-Za-z_]\w*", _strip_matlab(line))


def _equals_block_end(lines: Sequence[str], header: int) -> int:
    """Index of the line closing the block opened at ``header``."""
    depth = 0
    for idx in range(header, len(lines)):
        for word in _matlab_words(lines[idx]):
            if word in _OPENERS:
                depth += 1
            elif word in _CLOSERS:
                depth -= 1
                if depth == 0:
                    if idx == header:
                        raise MalformedLoop(f"line {header + 1}: single-line loop cannot be split")
                    if re.sub(r"[\s,;]", "", _strip_matlab(lines[idx])) not in _CLOSERS:
                        raise MalformedLoop(f"line {idx + 1}: loop end must stand on its own line")
                    return idx
    raise MalformedLoop(f"line {header + 1}: loop has no matching 'end'")


def _colon_block_end(lines: Sequence[str], header: int, indent: str) -> int:
    """Index of the last code line of the indented block after ``header``."""
    last = None
    for idx in range(header + 1, len(lines)):
        line = lines[idx]
        if _is_blank_or_comment(line):
            continue
        if len(_indent_of(line)) <= len(indent):
            break
        last = idx
    if last is None:
        raise MalformedLoop(f"line {header + 1}: loop body is empty")
    return last


def _match_header(line: str, form: str | None = None) -> tuple[str, str, str, str] | None:
    """(form, indent, variable, range text) if ``line`` is a recognized header."""
    if form in (None, COLON):
        m = _COLON_HEADER.match(line.rstrip("\r\n"))
        if m:
            return COLON, m.group(1), m.group(2), m.group(3)
    if form in (None, EQUALS):
        m = _EQUALS_HEADER.match(line.rstrip("\r\n"))
        if m and not re.search(r"\bin\b", m.group(3).split("=")[0]) and "==" not in line:
            return EQUALS, m.group(1), m.group(2), m.group(3)
    return None


def _check_no_escape(body: Sequence[str], form: str, first_line: int) -> None:
    """Reject ``break``/``continue`` that would bind to a loop being removed."""
    if form == COLON:
        stack: list[int] = []
        for off, line in enumerate(body):
            if _is_blank_or_comment(line):
                continue
            width = len(_indent_of(line))
            while stack and width <= stack[-1]:
                stack.pop()
            code = line.split("#", 1)[0]
            if re.match(r"^\s*(?:async\s+)?(for|while)\b.*:\s*$", code):
                stack.append(width)
            elif re.search(r"(^\s*|:\s*)(break|continue)\s*$", code) and not stack:
                raise MalformedLoop(
                    f"line {first_line + off + 1}: break/continue in a parallelized loop body")
    else:
        kinds: list[str] = []
        for off, line in enumerate(body):
            for word in _matlab_words(line):
                if word in _OPENERS:
                    kinds.append(word)
                elif word in _CLOSERS and kinds:
                    kinds.pop()
                elif word in ("break", "continue") and not any(k in _LOOP_OPENERS for k in kinds):
                    raise MalformedLoop(
                        f"line {first_line + off + 1}: break/continue in a parallelized loop body")


def parse_loops(script: str) -> LoopNest:
    """Locate the outermost perfect nest of literal loops in ``script``."""
    lines = split_lines(script)
    if not script.strip():
        raise NoParallelLoop("script is empty")

    start = None
    for idx, line in enumerate(lines):
        if _LOOPISH.match(line) and not _is_blank_or_comment(line):
            start = idx
            break
    if start is None:
        raise NoParallelLoop("no for-loop found in script")
    hit = _match_header(lines[start])
    if hit is None:
        stripped = lines[start].strip()
        if re.match(rf"for\s+{_IDENT}\s+in\s+.+:\s*\S", stripped):
            raise MalformedLoop(f"line {start + 1}: loop body must start on its own line")
        raise UnsupportedRange(f"line {start + 1}: unsupported loop header {stripped!r}")
    form = hit[0]

    headers: list[LoopHeader] = []
    idx = start
    lo, hi = start + 1, None  # code region of the current header's body, [lo, hi]
    lead: list[str] = []
    while True:
        _, indent, var, range_text = hit
        rng = parse_range(range_text)
        if var in (h.variable for h in headers):
            raise MalformedLoop(f"line {idx + 1}: loop variable {var!r} reused in nest")
        if form == COLON:
            end = _colon_block_end(lines, idx, indent)
            closer_idx = None
            body_last = end
        else:
            closer_idx = _equals_block_end(lines, idx)
            body_last = closer_idx - 1
            if all(_is_blank_or_comment(l, EQUALS) for l in lines[idx + 1:closer_idx]):
                raise MalformedLoop(f"line {idx + 1}: loop body is empty")
        headers.append(LoopHeader(var, rng, (idx + 1, body_last + 1), lines[idx], indent,
                                  lines[closer_idx] if closer_idx is not None else None, lead))
        lo, hi = idx + 1, body_last

        # Is the body exactly one literal inner loop (plus blanks/comments)?
        code = [i for i in range(lo, hi + 1) if not _is_blank_or_comment(lines[i], form)]
        inner = _match_header(lines[code[0]], form) if code else None
        if inner is None:
            break
        try:
            parse_range(inner[3])
        except UnsupportedRange:
            break
        j = code[0]
        if form == COLON:
            inner_end = _colon_block_end(lines, j, inner[1])
            if inner_end != code[-1]:
                break
            tail: list[str] = []
        else:
            try:
                inner_close = _equals_block_end(lines, j)
            except MalformedLoop:
                break
            if inner_close != code[-1]:
                break
            tail = lines[inner_close + 1:hi + 1]
        headers[-1].tail = tail
        lead = lines[lo:j]
        idx, hit = j, inner

    inner_h = headers[-1]
    body_start = inner_h.source_span[0]  # 0-based index of first body line
    if form == COLON:
        body_end = inner_h.source_span[1]
        nest_end = body_end
    else:
        body_end = inner_h.source_span[1]
        nest_end = _equals_block_end(lines, start)
    body = lines[body_start:body_end]
    nest_end_excl = nest_end + 1 if form == EQUALS else body_end

    nest = LoopNest(form, headers, lines[:start], body, lines[nest_end_excl:])
    if form == COLON and nest_end_excl < len(lines) and re.match(
            r"^\s*else\s*:", lines[nest_end_excl]) and _indent_of(lines[nest_end_excl]) == headers[0].indent:
        raise MalformedLoop(f"line {nest_end_excl + 1}: for/else is not supported")
    _check_no_escape(body, form, body_start)

    for off, line in enumerate(nest.epilogue):
        if _LOOPISH.match(line) and _indent_of(line) == nest.indent:
            msg = (f"line {nest_end_excl + off + 1}: another top-level loop follows the "
                   "parallelized nest; it runs serially in every job")
            nest.warnings.append(msg)
            logger.warning(msg)
    return nest


def render(nest: LoopNest) -> str:
    """Reassemble the original script text from a nest."""
    parts = list(nest.preamble)
    for h in nest.headers:
        parts += h.lead
        parts.append(h.line)
    parts += nest.body
    for h in reversed(nest.headers):
        parts += h.tail
        if h.closer is not None:
            parts.append(h.closer)
    parts += nest.epilogue
    return "".join(parts)


def expand_grid(nest: LoopNest) -> list[dict[str, Any]]:
    """Row-major list of assignments (outermost variable varies slowest)."""
    empty = [h.variable for h in nest.headers if h.range.length == 0]
    if empty:
        raise EmptyGrid(f"loop range for {', '.join(empty)} is empty")
    names = nest.variables
    return [dict(zip(names, combo))
            for combo in itertools.product(*(list(h.range.values()) for h in nest.headers))]


# ----------------------------------------------------------------------------
# rewriting


def _terminated(line: str) -> str:
    return line if line.endswith("\n") else line + "\n"


def _dedent(body: Sequence[str], indent: str, form: str) -> list[str]:
    code = [l for l in body if l.strip()]
    width = min((len(_indent_of(l)) for l in code), default=0)
    out = []
    for line in body:
        if not line.strip():
            out.append(line)
        else:
            out.append(indent + line[width:])
    return out


def seed_lines(nest_or_form: LoopNest | str, seed: int, job_index: int | None = None,
               indent: str = "") -> list[str]:
    form = nest_or_form.form if isinstance(nest_or_form, LoopNest) else nest_or_form
    mark = "#" if form == COLON else "%"
    end = "" if form == COLON else ";"
    what = f"job {job_index}" if job_index is not None else "this run"
    return [f"{indent}{mark} ems: random seed for {what}, derived from the package id\n",
            f"{indent}EMS_SEED = {seed}{end}\n"]


def _seed_insert_at(preamble: Sequence[str], form: str) -> int:
    if form != COLON:
        return 0
    at = 0
    if preamble and preamble[0].startswith("#!"):
        at = 1
    if len(preamble) > at and re.match(r"^[ \t\f]*#.*coding[:=]", preamble[at]):
        at += 1
    for i, line in enumerate(preamble):
        if re.match(r"^from\s+__future__\s+import\b", line):
            at = i + 1
    return at


def inject_seed(script: str, seed: int, form: str = COLON) -> str:
    """Prepend the seed binding to a script that is not split."""
    lines = split_lines(script)
    at = _seed_insert_at(lines, form)
    if at and not lines[at - 1].endswith("\n"):
        lines[at - 1] += "\n"
    return "".join(lines[:at] + seed_lines(form, seed) + lines[at:])


def binding_lines(nest: LoopNest, assignment: dict[str, Any]) -> list[str]:
    missing = [v for v in nest.variables if v not in assignment]
    if missing:
        raise ValueError(f"assignment lacks values for {missing}")
    end = "" if nest.form == COLON else ";"
    return [f"{nest.indent}{h.variable} = {h.range.literal_for(assignment[h.variable])}{end}\n"
            for h in nest.headers]


def rewrite_script(script: str | LoopNest, nest: LoopNest | None = None,
                   assignment: dict[str, Any] | Sequence[dict[str, Any]] = (),
                   seed: int = 0, job_index: int | None = None) -> str:
    """Per-job script: loops replaced by constant bindings, body dedented.

    ``assignment`` may be a list of assignments (chunked job); the bindings and
    body are then repeated once per grid point between a single preamble and
    epilogue.
    """
    if nest is None:
        nest = script if isinstance(script, LoopNest) else parse_loops(script)
    points = [assignment] if isinstance(assignment, dict) else list(assignment)
    if not points:
        raise ValueError("no assignment given")

    preamble = list(nest.preamble)
    at = _seed_insert_at(preamble, nest.form)
    if at and not preamble[at - 1].endswith("\n"):
        preamble[at - 1] += "\n"
    out = preamble[:at] + seed_lines(nest, seed, job_index) + preamble[at:]
    body = _dedent(nest.body, nest.indent, nest.form)
    for n, point in enumerate(points):
        out += binding_lines(nest, point)
        chunk = list(body)
        if chunk and (n < len(points) - 1 or nest.epilogue):
            chunk[-1] = _terminated(chunk[-1])
        out += chunk
    return "".join(out) + "".join(nest.epilogue)


# ----------------------------------------------------------------------------
# job splitting

INTERPRETERS = {
    ".py": [sys.executable],
    ".m": ["octave", "--no-gui", "--quiet"],
    ".sh": ["bash"],
    ".r": ["Rscript"],
    ".R": ["Rscript"],
}


def resolve_interpreter(script_name: str, explicit: str | None = None) -> list[str]:
    if explicit:
        return shlex.split(explicit)
    suffix = PurePosixPath(script_name).suffix
    if suffix in INTERPRETERS:
        return list(INTERPRETERS[suffix])
    raise NoInterpreter(f"no interpreter known for {script_name!r}; pass --interpreter")


@dataclass
class TaskSpec:
    job_index: int
    assignments: list[dict[str, Any]]
    script_text: str
    seed: int
    resources: ResourceRequest = field(default_factory=ResourceRequest)
    pid: str = ""
    grid_indices: list[int] = field(default_factory=list)
    command: list[str] = field(default_factory=list)
    workdir: str | None = None
    env: dict[str, str] = field(default_factory=dict)

    @property
    def assignment(self) -> dict[str, Any]:
        if len(self.assignments) != 1:
            raise ValueError(f"job {self.job_index} covers {len(self.assignments)} grid points")
        return self.assignments[0]


def job_dir(root: Path, pid: str, k: int) -> Path:
    return package_dir(root, pid) / "jobs" / str(k)


def _link_deps(jdir: Path, pkg: ExperimentPackage) -> None:
    deps_root = jdir.parent.parent / "deps"
    for top in sorted({p.split("/", 1)[0] for p in pkg.deps}):
        link = jdir / top
        if link.is_symlink() or link.exists():
            continue
        target = Path("..") / ".." / "deps" / top
        if (deps_root / top).exists():
            link.symlink_to(target)


def split_jobs(pkg: ExperimentPackage, resources: ResourceRequest | None = None,
               root: Path | None = None, chunk: int = 1,
               interpreter: str | None = None, split: bool = True) -> list[TaskSpec]:
    """One :class:`TaskSpec` per grid point (or per ``chunk`` consecutive points).

    With ``root`` given, every job's ``run_script`` and ``assignment.json`` are
    written under ``<root>/<pid>/jobs/<k>/``. ``split=False`` produces a single
    job running the whole script serially.
    """
    resources = resources or ResourceRequest()
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    script_name = pkg.metadata.get("script_name", "script.py")
    command = resolve_interpreter(script_name, interpreter or pkg.metadata.get("interpreter")) + ["run_script"]
    form = EQUALS if PurePosixPath(script_name).suffix == ".m" else COLON

    if split:
        nest = parse_loops(pkg.script)
        points = expand_grid(nest)
        groups = [list(range(i, min(i + chunk, len(points)))) for i in range(0, len(points), chunk)]
    else:
        nest, points, groups = None, [{}], [[0]]
    _, seeds = derive_seeds(pkg.pid, len(groups))

    tasks = []
    for k, idxs in enumerate(groups):
        if nest is not None:
            text = rewrite_script(pkg.script, nest, [points[i] for i in idxs], seeds[k], k)
        else:
            text = inject_seed(pkg.script, seeds[k], form)
        task = TaskSpec(k, [points[i] for i in idxs], text, seeds[k], resources,
                        str(pkg.pid), idxs, list(command))
        if root is not None:
            jdir = job_dir(root, pkg.pid, k)
            jdir.mkdir(parents=True, exist_ok=True)
            atomic_write_text(jdir / "run_script", text)
            write_json(jdir / "assignment.json", {
                "job_index": k,
                "seed": seeds[k],
                "grid_indices": idxs,
                "assignments": task.assignments,
            })
            _link_deps(jdir, pkg)
            task.workdir = str(jdir)
        tasks.append(task)
    return tasks


def read_assignment(root: Path, pid: str, k: int) -> dict:
    with open(job_dir(root, pid, k) / "assignment.json", encoding="utf-8") as fh:
        return json.load(fh)
