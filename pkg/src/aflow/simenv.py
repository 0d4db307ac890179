"""Deterministic simulated targets: miniature interpreted programs with
planted memory-safety faults.

A target is a handful of numbered source files in a tiny imperative language
(straight-line statements, conditional branches, bounded loops over a byte
array input, no recursion), an entry function, a one-pass format gate, and a
list of planted bugs.  Executing a target on an input produces the same
feedback a real instrumented build would: a verdict, stdio, line coverage,
branch coverage, and sanitizer-style reports with call stacks.

Instruction set (one per source line; ``#`` lines and blanks are filler):

    func NAME            function header
    label NAME           branch target
    set NAME = EXPR      assignment
    br EXPR -> LABEL     conditional branch (records taken/not-taken)
    jmp LABEL            unconditional jump
    call [FILE:]FUNC     call, no arguments (shared variable namespace)
    emit stdout|stderr "TEXT"
    fail "TEXT"          write stderr, halt with a fail verdict
    ret                  return (from the entry: halt)

Expressions cover integers (decimal or 0x hex), variables, ``input[i]``
(byte access, 0 out of bounds), ``len(input)``, arithmetic, comparisons and
``and``/``or``/``not``.  A planted bug fires when its site line executes and
its trigger predicate over the input bytes holds; the first report halts the
run, like a sanitizer would.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from typing import Callable

from .errors import ParseError
from .feedback import (
    BranchMap,
    CoverageMap,
    FeedbackBundle,
    SanitizerReport,
    StackFrame,
    signature,
)
from .runtime import RunRecord, TargetEnv

SIM_CHANNELS = frozenset({"outcome", "stdout", "stderr", "cov", "branch", "san", "trace"})
SIM_TOOLS = frozenset({"read", "exec"})

_MAX_STEPS = 100_000


# -- expression evaluator -----------------------------------------------------

_EXPR_TOKEN = re.compile(
    r"\s*(0x[0-9a-fA-F]+|\d+|[A-Za-z_][A-Za-z0-9_]*|==|!=|<=|>=|//|[-+*%<>()\[\]])"
)


def _tokenize_expr(text: str) -> list[str]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _EXPR_TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip():
                raise ParseError(f"bad expression near {text[pos:].strip()!r}")
            break
        tokens.append(m.group(1))
        pos = m.end()
    return tokens


class _ExprParser:
    """Recursive descent; compiles to a closure over (input, variables)."""

    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, expected: str | None = None) -> str:
        tok = self.peek()
        if tok is None or (expected is not None and tok != expected):
            raise ParseError(f"bad expression: expected {expected or 'more input'}")
        self.pos += 1
        return tok

    def parse(self) -> Callable:
        node = self.or_expr()
        if self.peek() is not None:
            raise ParseError(f"bad expression: trailing {self.peek()!r}")
        return node

    def or_expr(self) -> Callable:
        node = self.and_expr()
        while self.peek() == "or":
            self.take()
            rhs = self.and_expr()
            node = (lambda a, b: lambda i, v: 1 if a(i, v) or b(i, v) else 0)(node, rhs)
        return node

    def and_expr(self) -> Callable:
        node = self.not_expr()
        while self.peek() == "and":
            self.take()
            rhs = self.not_expr()
            node = (lambda a, b: lambda i, v: 1 if a(i, v) and b(i, v) else 0)(node, rhs)
        return node

    def not_expr(self) -> Callable:
        if self.peek() == "not":
            self.take()
            inner = self.not_expr()
            return lambda i, v: 0 if inner(i, v) else 1
        return self.comparison()

    def comparison(self) -> Callable:
        node = self.additive()
        ops = {
            "==": lambda x, y: x == y,
            "!=": lambda x, y: x != y,
            "<": lambda x, y: x < y,
            "<=": lambda x, y: x <= y,
            ">": lambda x, y: x > y,
            ">=": lambda x, y: x >= y,
        }
        while self.peek() in ops:
            op = ops[self.take()]
            rhs = self.additive()
            node = (lambda a, b, f: lambda i, v: 1 if f(a(i, v), b(i, v)) else 0)(
                node, rhs, op
            )
        return node

    def additive(self) -> Callable:
        node = self.multiplicative()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.multiplicative()
            if op == "+":
                node = (lambda a, b: lambda i, v: a(i, v) + b(i, v))(node, rhs)
            else:
                node = (lambda a, b: lambda i, v: a(i, v) - b(i, v))(node, rhs)
        return node

    def multiplicative(self) -> Callable:
        node = self.unary()
        while self.peek() in ("*", "//", "%"):
            op = self.take()
            rhs = self.unary()
            if op == "*":
                node = (lambda a, b: lambda i, v: a(i, v) * b(i, v))(node, rhs)
            elif op == "//":
                node = (lambda a, b: lambda i, v: a(i, v) // max(b(i, v), 1))(node, rhs)
            else:
                node = (lambda a, b: lambda i, v: a(i, v) % max(b(i, v), 1))(node, rhs)
        return node

    def unary(self) -> Callable:
        if self.peek() == "-":
            self.take()
            inner = self.unary()
            return lambda i, v: -inner(i, v)
        return self.atom()

    def atom(self) -> Callable:
        tok = self.take()
        if tok == "(":
            node = self.or_expr()
            self.take(")")
            return node
        if tok == "input":
            self.take("[")
            idx = self.or_expr()
            self.take("]")
            return lambda i, v: i[idx(i, v)] if 0 <= idx(i, v) < len(i) else 0
        if tok == "len":
            self.take("(")
            self.take("input")
            self.take(")")
            return lambda i, v: len(i)
        if tok.startswith("0x"):
            value = int(tok, 16)
            return lambda i, v: value
        if tok.isdigit():
            value = int(tok)
            return lambda i, v: value
        if tok.isidentifier():
            name = tok
            return lambda i, v: v.get(name, 0)
        raise ParseError(f"bad expression token {tok!r}")


def compile_expr(text: str) -> Callable:
    """Compile an expression to fn(input_bytes, variables) -> int."""
    return _ExprParser(_tokenize_expr(text)).parse()


# -- target model -------------------------------------------------------------

@dataclass(frozen=True)
class PlantedBug:
    kind: str
    file: str
    line: int
    trigger: str  # predicate over input bytes
    witness: bytes  # one input known to produce the signature


@dataclass(frozen=True)
class GateSpec:
    expr: str
    lines: frozenset[tuple[str, int]]
    message: str


@dataclass
class SimTarget:
    """One simulated target program."""

    name: str
    entry: tuple[str, str]  # (file, function)
    gate: GateSpec
    files: dict[str, list[str]]  # file id -> source lines (1-based list)
    bugs: list[PlantedBug] = field(default_factory=list)
    probe_base: bytes = b""
    probe_positions: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self._compiled = _compile_target(self)

    def source_files(self) -> frozenset[str]:
        return frozenset(self.files)


@dataclass(frozen=True)
class _Instr:
    kind: str
    args: tuple


@dataclass
class _Compiled:
    instrs: dict[str, list[_Instr | None]]  # per file, index = line - 1
    funcs: dict[tuple[str, str], int]  # (file, func) -> header line
    labels: dict[tuple[str, str], int]  # (file, label) -> line
    func_spans: dict[tuple[str, str], tuple[int, int]]
    exprs: dict[str, Callable]


_SET_RE = re.compile(r"^set\s+([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.+)$")
_BR_RE = re.compile(r"^br\s+(.+?)\s*->\s*([A-Za-z_][A-Za-z0-9_]*)$")
_EMIT_RE = re.compile(r'^emit\s+(stdout|stderr)\s+"(.*)"$')
_FAIL_RE = re.compile(r'^fail\s+"(.*)"$')
_CALL_RE = re.compile(r"^call\s+(?:([A-Za-z0-9_.]+):)?([A-Za-z_][A-Za-z0-9_]*)$")


def _parse_instr(text: str) -> _Instr | None:
    text = text.strip()
    if not text or text.startswith("#"):
        return None
    if text == "ret":
        return _Instr("ret", ())
    if text.startswith("func "):
        return _Instr("func", (text[5:].strip(),))
    if text.startswith("label "):
        return _Instr("label", (text[6:].strip(),))
    if text.startswith("jmp "):
        return _Instr("jmp", (text[4:].strip(),))
    if m := _SET_RE.match(text):
        return _Instr("set", (m.group(1), m.group(2)))
    if m := _BR_RE.match(text):
        return _Instr("br", (m.group(1), m.group(2)))
    if m := _EMIT_RE.match(text):
        return _Instr("emit", (m.group(1), m.group(2)))
    if m := _FAIL_RE.match(text):
        return _Instr("fail", (m.group(1),))
    if m := _CALL_RE.match(text):
        return _Instr("call", (m.group(1), m.group(2)))
    raise ParseError(f"bad instruction: {text!r}")


def _compile_target(target: SimTarget) -> _Compiled:
    compiled = _Compiled(instrs={}, funcs={}, labels={}, func_spans={}, exprs={})
    for file, lines in target.files.items():
        instrs: list[_Instr | None] = []
        open_func: str | None = None
        open_start = 0
        for number, text in enumerate(lines, start=1):
            instr = _parse_instr(text)
            instrs.append(instr)
            if instr is None:
                continue
            if instr.kind == "func":
                if open_func is not None:
                    compiled.func_spans[(file, open_func)] = (open_start, number - 1)
                open_func = instr.args[0]
                open_start = number
                if (file, open_func) in compiled.funcs:
                    raise ParseError(f"{file}: duplicate func {open_func}")
                compiled.funcs[(file, open_func)] = number
            elif instr.kind == "label":
                if (file, instr.args[0]) in compiled.labels:
                    raise ParseError(f"{file}: duplicate label {instr.args[0]}")
                compiled.labels[(file, instr.args[0])] = number
            elif instr.kind in ("set", "br"):
                expr = instr.args[-1] if instr.kind == "set" else instr.args[0]
                if expr not in compiled.exprs:
                    compiled.exprs[expr] = compile_expr(expr)
        if open_func is not None:
            compiled.func_spans[(file, open_func)] = (open_start, len(lines))
        compiled.instrs[file] = instrs
    if target.entry not in compiled.funcs:
        raise ParseError(f"entry function {target.entry} not found")
    for bug in target.bugs:
        lines = target.files.get(bug.file, [])
        if not (1 <= bug.line <= len(lines)):
            raise ParseError(f"bug site {bug.file}:{bug.line} is outside the file")
        compiled.exprs.setdefault(bug.trigger, compile_expr(bug.trigger))
    compiled.exprs.setdefault(target.gate.expr, compile_expr(target.gate.expr))
    return compiled


def _make_report(bug: PlantedBug, stack: list[tuple[str, str, int]]) -> SanitizerReport:
    frames = tuple(StackFrame(func, file, line) for file, func, line in stack)
    lines = [f"ERROR: {bug.kind}"]
    lines += [f"    #{i} {f.function} {f.file}:{f.line}" for i, f in enumerate(frames)]
    lines.append("END")
    return SanitizerReport(kind=bug.kind, frames=frames, raw="\n".join(lines))


def execute_target(
    target: SimTarget, data: bytes, max_steps: int = _MAX_STEPS
) -> FeedbackBundle:
    """Run a target on one input; pure function of (target, input).

    Gate failure covers only the gate lines and carries the gate message on
    stderr.  Otherwise the interpreter fills line and branch coverage, and a
    planted bug whose site executes while its trigger holds emits a
    sanitizer-style report and halts the run.
    """
    comp: _Compiled = target._compiled
    cov: set[tuple[str, int]] = set(target.gate.lines)
    branches: list[tuple[str, int, bool]] = []
    san: list[SanitizerReport] = []
    stdout: list[str] = []
    stderr: list[str] = []
    variables: dict[str, int] = {}
    bug_sites = {(b.file, b.line): b for b in target.bugs}

    def bundle(outcome: str) -> FeedbackBundle:
        return FeedbackBundle(
            outcome=outcome,
            stdout="\n".join(stdout),
            stderr="\n".join(stderr),
            cov=CoverageMap.from_pairs(cov),
            branch=BranchMap.from_records(branches),
            san=tuple(san),
        )

    if not comp.exprs[target.gate.expr](data, variables):
        stderr.append(target.gate.message)
        return bundle("fail")

    entry_file, entry_func = target.entry
    # call stack: (file, func, current line)
    stack: list[tuple[str, str, int]] = [
        (entry_file, entry_func, comp.funcs[(entry_file, entry_func)])
    ]
    steps = 0
    while stack:
        steps += 1
        if steps > max_steps:
            stderr.append("step budget exceeded")
            return bundle("fail")
        file, func, line = stack[-1]
        instrs = comp.instrs[file]
        if line > len(instrs):
            stack.pop()  # fell off the end of the file: implicit return
            continue
        instr = instrs[line - 1]
        if instr is None:
            stack[-1] = (file, func, line + 1)
            continue
        cov.add((file, line))
        bug = bug_sites.get((file, line))
        if bug is not None and comp.exprs[bug.trigger](data, variables):
            san.append(_make_report(bug, list(reversed(stack))))
            return bundle("fail")  # first report halts, like a sanitizer would
        kind = instr.kind
        if kind in ("func", "label"):
            stack[-1] = (file, func, line + 1)
        elif kind == "set":
            variables[instr.args[0]] = comp.exprs[instr.args[1]](data, variables)
            stack[-1] = (file, func, line + 1)
        elif kind == "br":
            taken = bool(comp.exprs[instr.args[0]](data, variables))
            branches.append((file, line, taken))
            if taken:
                label = (file, instr.args[1])
                if label not in comp.labels:
                    raise ParseError(f"{file}: unknown label {instr.args[1]}")
                stack[-1] = (file, func, comp.labels[label])
            else:
                stack[-1] = (file, func, line + 1)
        elif kind == "jmp":
            label = (file, instr.args[0])
            if label not in comp.labels:
                raise ParseError(f"{file}: unknown label {instr.args[0]}")
            stack[-1] = (file, func, comp.labels[label])
        elif kind == "call":
            callee_file = instr.args[0] or file
            callee = (callee_file, instr.args[1])
            if callee not in comp.funcs:
                raise ParseError(f"unknown function {callee_file}:{instr.args[1]}")
            stack[-1] = (file, func, line + 1)
            stack.append((callee_file, instr.args[1], comp.funcs[callee]))
        elif kind == "emit":
            (stdout if instr.args[0] == "stdout" else stderr).append(instr.args[1])
            stack[-1] = (file, func, line + 1)
        elif kind == "fail":
            stderr.append(instr.args[0])
            return bundle("fail")
        elif kind == "ret":
            stack.pop()
    return bundle("fail" if san else "pass")


# -- tasks ---------------------------------------------------------------------

@dataclass
class SimTask:
    """A campaign task: a target, an instruction for the agents, and a hidden
    pass/fail check that the agents never see."""

    id: str
    target: SimTarget
    instruction: str
    hidden_check: Callable[[RunRecord], bool]
    check_spec: str = ""


def grade(task: SimTask, record: RunRecord) -> str:
    """Apply the hidden check; agents only ever see the instruction."""
    return "pass" if task.hidden_check(record) else "fail"


_HEX_RE = re.compile(r"^[0-9a-fA-F]+$")


def hex_candidates(text: str) -> list[bytes]:
    """Even-length hex tokens in `text`, last first (the convention for the
    designated answer slot is that the submitted input is the final token)."""
    out = []
    for token in reversed(text.split()):
        if len(token) >= 2 and len(token) % 2 == 0 and _HEX_RE.match(token):
            out.append(bytes.fromhex(token))
    return out


def _compile_check(spec: str, target: SimTarget) -> Callable[[RunRecord], bool]:
    parts = spec.split()
    if parts[:1] == ["triggers"] and len(parts) == 6 and parts[2] == "at" and parts[4] == "in":
        kind, func, file = parts[1], parts[3], parts[5]

        def check_triggers(record: RunRecord) -> bool:
            for data in hex_candidates(record.final_output):
                result = execute_target(target, data)
                for report in result.san:
                    sig = signature(report, target.source_files())
                    if (sig.kind, sig.function, sig.file) == (kind, func, file):
                        return True
            return False

        return check_triggers
    if parts[:1] == ["output-byte"] and len(parts) == 4 and parts[2] == "==":
        index, value = int(parts[1]), int(parts[3], 0)

        def check_byte(record: RunRecord) -> bool:
            return any(
                index < len(data) and data[index] == value
                for data in hex_candidates(record.final_output)
            )

        return check_byte
    if parts[:1] == ["output-contains"]:
        needle = spec[len("output-contains") :].strip()

        def check_contains(record: RunRecord) -> bool:
            return needle in record.final_output

        return check_contains
    raise ParseError(f"unknown check spec: {spec!r}")


# -- environment ---------------------------------------------------------------

class SimEnv(TargetEnv):
    """Target environment around one task: agents submit candidate inputs,
    feedback accumulates across submissions (coverage merges monotonically,
    reports accumulate, verdict and stdio reflect the latest run).  Folding
    is locked so concurrently running agents may submit."""

    def __init__(self, task: SimTask, channels: frozenset[str] = SIM_CHANNELS):
        super().__init__(task_text=task.instruction, channels=channels)
        self.task = task
        self.target = task.target
        self.submissions: list[bytes] = []
        self._state = FeedbackBundle(cov=CoverageMap(), branch=BranchMap())
        self._fold = threading.Lock()

    def reset(self) -> None:
        super().reset()
        self.submissions = []
        self._state = FeedbackBundle(cov=CoverageMap(), branch=BranchMap())

    def submit(self, data: bytes) -> FeedbackBundle:
        """Execute the target on one candidate input and fold the feedback in."""
        result = execute_target(self.target, data)
        assert result.cov is not None and result.branch is not None
        with self._fold:
            self.submissions.append(data)
            assert self._state.cov is not None and self._state.branch is not None
            self._state = FeedbackBundle(
                outcome=result.outcome,
                stdout=result.stdout,
                stderr=result.stderr,
                cov=self._state.cov.merge(result.cov),
                branch=self._state.branch.merge(result.branch),
                san=self._state.san + result.san,
            )
        return result

    def read_source(self, file: str) -> str:
        return "\n".join(self.target.files.get(file, []))

    def current_bundle(self) -> FeedbackBundle:
        s = self._state
        return FeedbackBundle(
            outcome=s.outcome,
            stdout=s.stdout,
            stderr=s.stderr,
            cov=s.cov,
            branch=s.branch,
            san=s.san,
            traces=dict(self._traces),
            extra=self.extra_defaults(),
        )


def sim_campaign(tasks: list[SimTask], smoke_task_id: str | None = None):
    """Wrap simulated tasks as a campaign environment for the optimizer."""
    from .optimizer import CampaignEnv

    return CampaignEnv(
        tasks=list(tasks),
        make_env=SimEnv,
        channels=SIM_CHANNELS,
        tool_registry=SIM_TOOLS,
        grader=grade,
        smoke_task_id=smoke_task_id,
    )


# -- fixture text formats -------------------------------------------------------

def load_targets(text: str) -> dict[str, SimTarget]:
    """Parse a .targets file: one or more ``target NAME`` blocks.

    Directives: ``entry FILE:FUNC``, ``gate EXPR``, ``gate-function
    FILE:FUNC``, ``gate-message TEXT``, ``bug KIND at FILE:LINE when EXPR
    witness HEX``, ``probe-base HEX``, ``probe-bytes I J ...``; source
    listings follow ``file NAME`` with one ``|``-prefixed line per source
    line.
    """
    targets: dict[str, SimTarget] = {}
    block: dict | None = None
    current_file: str | None = None

    def finish() -> None:
        nonlocal block
        if block is None:
            return
        gate_fn = block.get("gate_function")
        gate_lines: set[tuple[str, int]] = set()
        if gate_fn:
            file, func = gate_fn
            span = _function_span(block["files"].get(file, []), func)
            if span is None:
                raise ParseError(f"gate-function {func} not found in {file}")
            gate_lines = {(file, ln) for ln in range(span[0], span[1] + 1)}
        target = SimTarget(
            name=block["name"],
            entry=block["entry"],
            gate=GateSpec(
                expr=block.get("gate", "1"),
                lines=frozenset(gate_lines),
                message=block.get("gate_message", "input rejected"),
            ),
            files=block["files"],
            bugs=block["bugs"],
            probe_base=block.get("probe_base", b""),
            probe_positions=tuple(block.get("probe_positions", ())),
        )
        targets[target.name] = target
        block = None

    for raw in text.splitlines():
        line = raw.strip()
        stripped = raw.lstrip()
        if stripped.startswith("|"):
            if block is None or current_file is None:
                raise ParseError(f"source line outside a file block: {raw!r}")
            content = stripped[1:]
            if content.startswith(" "):
                content = content[1:]
            block["files"][current_file].append(content)
            continue
        if not line or line.startswith("#"):
            continue
        if line.startswith("target "):
            finish()
            block = {"name": line[7:].strip(), "files": {}, "bugs": []}
            current_file = None
            continue
        if block is None:
            raise ParseError(f"directive outside a target block: {line!r}")
        if line.startswith("entry "):
            file, _, func = line[6:].strip().partition(":")
            block["entry"] = (file, func)
        elif line.startswith("gate-function "):
            file, _, func = line[14:].strip().partition(":")
            block["gate_function"] = (file, func)
        elif line.startswith("gate-message "):
            block["gate_message"] = line[13:].strip()
        elif line.startswith("gate "):
            block["gate"] = line[5:].strip()
        elif line.startswith("bug "):
            block["bugs"].append(_parse_bug(line))
        elif line.startswith("probe-base "):
            block["probe_base"] = bytes.fromhex(line[11:].strip())
        elif line.startswith("probe-bytes "):
            block["probe_positions"] = [int(x) for x in line[12:].split()]
        elif line.startswith("file "):
            current_file = line[5:].strip()
            block["files"][current_file] = []
        else:
            raise ParseError(f"unknown target directive: {line!r}")
    finish()
    return targets


_BUG_RE = re.compile(
    r"^bug\s+(\S+)\s+at\s+(\S+):(\d+)\s+when\s+(.+?)\s+witness\s+([0-9a-fA-F]+)$"
)


def _parse_bug(line: str) -> PlantedBug:
    m = _BUG_RE.match(line)
    if m is None:
        raise ParseError(f"bad bug directive: {line!r}")
    return PlantedBug(
        kind=m.group(1),
        file=m.group(2),
        line=int(m.group(3)),
        trigger=m.group(4),
        witness=bytes.fromhex(m.group(5)),
    )


def _function_span(lines: list[str], func: str) -> tuple[int, int] | None:
    start = None
    for number, text in enumerate(lines, start=1):
        stripped = text.strip()
        if stripped == f"func {func}":
            start = number
        elif start is not None and stripped.startswith("func "):
            return (start, number - 1)
    if start is not None:
        return (start, len(lines))
    return None


def load_tasks(text: str, targets: dict[str, SimTarget]) -> list[SimTask]:
    """Parse a .tasks file: ``task ID`` blocks with ``target``,
    ``instruction`` and ``check`` directives."""
    tasks: list[SimTask] = []
    block: dict | None = None

    def finish() -> None:
        nonlocal block
        if block is None:
            return
        for key in ("target", "instruction", "check"):
            if key not in block:
                raise ParseError(f"task {block['id']!r} missing {key}")
        target = targets.get(block["target"])
        if target is None:
            raise ParseError(f"task {block['id']!r}: unknown target {block['target']!r}")
        tasks.append(
            SimTask(
                id=block["id"],
                target=target,
                instruction=block["instruction"],
                hidden_check=_compile_check(block["check"], target),
                check_spec=block["check"],
            )
        )
        block = None

    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("task "):
            finish()
            block = {"id": line[5:].strip()}
            continue
        if block is None:
            raise ParseError(f"directive outside a task block: {line!r}")
        for key in ("target", "instruction", "check"):
            if line.startswith(key + " "):
                block[key] = line[len(key) + 1 :].strip()
                break
        else:
            raise ParseError(f"unknown task directive: {line!r}")
    finish()
    return tasks
