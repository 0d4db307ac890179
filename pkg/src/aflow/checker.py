"""Well-formedness checking for harness programs.

A single linear-time traversal enforces five judgement classes:

  T-Agent   every template variable resolves to an upstream output, a
            channel the environment provides, or the reserved member index
            inside a fanout family
  T-Edge    every data edge is actually read by the destination template
            (edges out of sentinel status nodes are exempt)
  T-Branch  guards are one of ok/fail (defensive; the parser already enforces)
  T-Conn    every node is reachable from some source
  D-Cycle   cycles among data edges are rejected (the runtime's
            dispatch-when-inputs-bound rule would deadlock on them)
  F-Guard   no edge may address an agent consumed inside a fanout family

Ill-formedness is a report, not an exception.  The traversal works on an
integer-indexed view of the graph so wall time stays linear at hundreds of
thousands of nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .program import (
    FANOUT_INDEX_VAR,
    GUARDS,
    Edge,
    FanoutNode,
    Program,
)

RULES = ("T-Agent", "T-Edge", "T-Branch", "T-Conn", "D-Cycle", "F-Guard")


@dataclass(frozen=True)
class Violation:
    rule: str
    where: str  # node name or "src->dst" edge label
    detail: str

    def __str__(self) -> str:
        return f"{self.rule} {self.where}: {self.detail}"


@dataclass
class CheckReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "well_formed" if not self.violations else "ill_formed"

    @property
    def well_formed(self) -> bool:
        return not self.violations

    def to_text(self) -> str:
        """One violation per line: rule, location, detail."""
        if self.well_formed:
            return "well_formed\n"
        return "\n".join(str(v) for v in self.violations) + "\n"


@dataclass(frozen=True)
class ScopeSets:
    """Per-node visible inputs and the program's source set."""

    in_of: dict[str, frozenset[str]]
    sources: frozenset[str]


def _edge_label(e: Edge) -> str:
    arrow = ">>" if e.guard is None else f".on_{e.guard}>>"
    return f"{e.src}{arrow}{e.dst}"


class _Structure:
    """One pass over a program: everything the judgements need, indexed by
    small integers rather than name strings."""

    def __init__(self, program: Program):
        self.program = program
        self.consumed = program.consumed_inners()
        self.names = [n for n in program.nodes if n not in self.consumed]
        self.index = {name: i for i, name in enumerate(self.names)}
        n = len(self.names)
        self.in_refs: list[list[str]] = [[] for _ in range(n)]
        self.in_data_deg = [0] * n
        self.succ_all: list[list[int]] = [[] for _ in range(n)]
        self.succ_data: list[list[int]] = [[] for _ in range(n)]
        self.touched = bytearray(n)
        self.member_edges: list[Edge] = []
        self.wired: list[Edge] = []
        for e in program.edges:
            if e.src in self.consumed or e.dst in self.consumed:
                self.member_edges.append(e)
                continue
            self.wired.append(e)
            src, dst = self.index[e.src], self.index[e.dst]
            self.touched[src] = self.touched[dst] = 1
            self.succ_all[src].append(dst)
            if e.guard is None:
                self.in_refs[dst].append(f"{e.src}.out")
                self.in_data_deg[dst] += 1
                self.succ_data[src].append(dst)

    def sources(self) -> list[int]:
        # Sources: no incoming data edge.  Guarded edges transfer control,
        # not data, so a retry target that also heads a forward chain stays a
        # source.  A fully isolated node alongside other nodes is a stray,
        # not a source.
        lone_ok = len(self.names) == 1
        return [
            i
            for i in range(len(self.names))
            if not self.in_data_deg[i] and (self.touched[i] or lone_ok)
        ]

    def reachable(self) -> bytearray:
        seen = bytearray(len(self.names))
        stack = self.sources()
        for i in stack:
            seen[i] = 1
        while stack:
            for j in self.succ_all[stack.pop()]:
                if not seen[j]:
                    seen[j] = 1
                    stack.append(j)
        return seen


def scope_sets(program: Program) -> ScopeSets:
    s = _Structure(program)
    sources = s.sources()
    return ScopeSets(
        in_of={name: frozenset(s.in_refs[i]) for i, name in enumerate(s.names)},
        sources=frozenset(s.names[i] for i in sources),
    )


def reachability(program: Program) -> frozenset[str]:
    """Closure of the source set over all edges (data and guarded).

    Members of a reachable fanout family count as reachable through it.
    """
    s = _Structure(program)
    seen = s.reachable()
    out = {name for i, name in enumerate(s.names) if seen[i]}
    for name in list(out):
        node = program.nodes[name]
        if isinstance(node, FanoutNode):
            out.add(node.inner.name)
    return frozenset(out)


def _data_cycles(succ: list[list[int]]) -> list[list[int]]:
    """Strongly connected components of the data-edge subgraph that form a
    cycle (size > 1, or a self-loop).  Iterative Tarjan."""
    n = len(succ)
    UNSEEN = -1
    index = [UNSEEN] * n
    low = [0] * n
    on_stack = bytearray(n)
    stack: list[int] = []
    counter = 0
    cycles: list[list[int]] = []

    for root in range(n):
        if index[root] != UNSEEN:
            continue
        work: list[list[int]] = [[root, 0]]
        while work:
            node, child_i = work[-1]
            if child_i == 0:
                index[node] = low[node] = counter
                counter += 1
                stack.append(node)
                on_stack[node] = 1
            advanced = False
            children = succ[node]
            while child_i < len(children):
                child = children[child_i]
                child_i += 1
                if index[child] == UNSEEN:
                    work[-1][1] = child_i
                    work.append([child, 0])
                    advanced = True
                    break
                if on_stack[child]:
                    if index[child] < low[node]:
                        low[node] = index[child]
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                if low[node] < low[parent]:
                    low[parent] = low[node]
            if low[node] == index[node]:
                comp: list[int] = []
                while True:
                    member = stack.pop()
                    on_stack[member] = 0
                    comp.append(member)
                    if member == node:
                        break
                if len(comp) > 1 or node in succ[node]:
                    cycles.append(comp)
    return cycles


def check(program: Program, channels: frozenset[str] | None = None) -> CheckReport:
    """Gate a program against the environment's channel set.

    ``channels`` defaults to the program's declared universe.  The task
    channel is always bindable (the campaign supplies it).
    """
    allowed = frozenset(channels) if channels is not None else program.channels
    allowed = allowed | {"task"}
    s = _Structure(program)
    violations: list[Violation] = []

    # T-Agent: template variables resolve within In(n) plus the channel set.
    for i, name in enumerate(s.names):
        node = program.nodes[name]
        is_family = isinstance(node, FanoutNode)
        template = node.inner.template if is_family else node.template
        in_refs = s.in_refs[i]
        for var in sorted(template.variables):
            if "." in var:
                if var not in in_refs:
                    violations.append(
                        Violation("T-Agent", name, f"{var} is not an upstream output")
                    )
            elif var == FANOUT_INDEX_VAR:
                if not is_family:
                    violations.append(
                        Violation(
                            "T-Agent", name, "fanout_index outside a fanout family"
                        )
                    )
            elif var not in allowed:
                violations.append(
                    Violation("T-Agent", name, f"channel {var} not provided")
                )

    # F-Guard: family members are addressed only through their family.
    for e in s.member_edges:
        member = e.src if e.src in s.consumed else e.dst
        violations.append(
            Violation(
                "F-Guard",
                _edge_label(e),
                f"{member} is inside fanout {s.consumed[member]} and cannot be wired",
            )
        )

    for e in s.wired:
        if e.guard is None:
            # T-Edge: the destination must actually read the source's output.
            src_node = program.nodes[e.src]
            inner = src_node.inner if isinstance(src_node, FanoutNode) else src_node
            if inner.sentinel:
                continue
            dst_node = program.nodes[e.dst]
            dst_template = (
                dst_node.inner.template
                if isinstance(dst_node, FanoutNode)
                else dst_node.template
            )
            if f"{e.src}.out" not in dst_template.variables:
                violations.append(
                    Violation(
                        "T-Edge",
                        _edge_label(e),
                        f"{e.dst} template never reads {e.src}.out",
                    )
                )
        elif e.guard not in GUARDS:
            violations.append(
                Violation(
                    "T-Branch", _edge_label(e), f"guard {e.guard!r} is not ok or fail"
                )
            )

    reachable = s.reachable()
    for i, name in enumerate(s.names):
        if not reachable[i]:
            violations.append(
                Violation("T-Conn", name, "not reachable from any source")
            )

    for cycle in _data_cycles(s.succ_data):
        members = sorted(s.names[i] for i in cycle)
        violations.append(
            Violation("D-Cycle", members[0], "data-edge cycle: " + " -> ".join(members))
        )

    return CheckReport(violations=violations)
