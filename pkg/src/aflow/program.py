"""Abstract syntax for harness programs.

A program is a labelled directed graph: nodes are agents (optionally lifted
into parallel families), edges carry data or transfer control under an
ok/fail guard.  Values are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import TemplateError, UnboundVariable

# Channels every campaign may reference.  "task" carries the campaign's task
# instruction; the rest are emitted by the target under test.
STANDARD_CHANNELS = frozenset(
    {"cov", "branch", "san", "trace", "outcome", "stdout", "stderr", "task"}
)

# Freeform channels get wrapped in sentinel delimiters before substitution so
# target output can never be parsed as structure by a downstream agent.
FREEFORM_CHANNELS = frozenset({"stdout", "stderr", "trace"})

# Reserved per-member variable injected into fanout family members.
FANOUT_INDEX_VAR = "fanout_index"

GUARD_OK = "ok"
GUARD_FAIL = "fail"
GUARDS = (GUARD_OK, GUARD_FAIL)

_VAR_RE = re.compile(
    r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)?)\s*\}\}"
)


@dataclass(frozen=True)
class TemplateString:
    """A prompt template with double-brace variable references.

    Variables are either ``name.out`` (an upstream node's output) or a bare
    channel name.  ``variables`` is derived from ``raw`` at construction and
    duplicates collapse.
    """

    raw: str
    variables: frozenset[str] = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "variables", frozenset(_extract_vars(self.raw)))

    def node_refs(self) -> frozenset[str]:
        """Referenced upstream outputs, as bare node names."""
        return frozenset(v[: -len(".out")] for v in self.variables if "." in v)

    def channel_refs(self) -> frozenset[str]:
        return frozenset(v for v in self.variables if "." not in v)


def _extract_vars(raw: str) -> list[str]:
    seen: list[str] = []
    last = 0
    for m in _VAR_RE.finditer(raw):
        gap = raw[last : m.start()]
        if "{{" in gap or "}}" in gap:
            raise TemplateError(f"stray template braces near: {gap.strip()!r}")
        var = m.group(1)
        if "." in var and not var.endswith(".out"):
            raise TemplateError(f"node reference must end in .out: {{{{{var}}}}}")
        if var not in seen:
            seen.append(var)
        last = m.end()
    tail = raw[last:]
    if "{{" in tail or "}}" in tail:
        raise TemplateError(f"stray template braces near: {tail.strip()!r}")
    return seen


def free_vars(template: TemplateString) -> frozenset[str]:
    """The exact set of variable references in a template."""
    return template.variables


def render_template(template: TemplateString, binding: dict[str, str]) -> str:
    """Substitute every variable; text outside variables is untouched.

    Raises UnboundVariable when the binding does not cover free_vars.  For
    well-formed programs executed through the runtime this is unreachable and
    treated as a fatal internal fault.
    """
    missing = template.variables - binding.keys()
    if missing:
        raise UnboundVariable(
            "unbound template variable(s): " + ", ".join(sorted(missing))
        )
    return _VAR_RE.sub(lambda m: binding[m.group(1)], template.raw)


@dataclass(frozen=True)
class AgentNode:
    """One agent: role label, prompt template, model id and tool set.

    ``sentinel`` marks a pure-side-effect agent whose output is a status flag
    that downstream templates are not required to reference.
    """

    name: str
    role: str
    template: TemplateString
    model_id: str
    tools: frozenset[str] = frozenset()
    sentinel: bool = False


@dataclass(frozen=True)
class FanoutNode:
    """k parallel copies of an agent sharing upstream context."""

    name: str
    inner: AgentNode
    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"fanout {self.name}: k must be >= 1, got {self.k}")


Node = AgentNode | FanoutNode


@dataclass(frozen=True)
class Edge:
    """Directed edge; guard None is a data edge, "ok"/"fail" a guarded edge."""

    src: str
    dst: str
    guard: str | None = None

    def is_data(self) -> bool:
        return self.guard is None


@dataclass
class Program:
    """A harness program: named nodes plus an ordered edge list.

    ``channels`` is the program's declared channel universe (standard set plus
    any campaign extras named in a ``use channels`` directive).  Node names
    are unique; every edge endpoint names a declared node.
    """

    nodes: dict[str, Node]
    edges: list[Edge]
    channels: frozenset[str] = STANDARD_CHANNELS

    def __post_init__(self) -> None:
        # task is the campaign input, not target output; always bindable.
        self.channels = frozenset(self.channels) | {"task"}
        for e in self.edges:
            for end in (e.src, e.dst):
                if end not in self.nodes:
                    raise ValueError(f"edge endpoint {end!r} is not a declared node")

    # -- structure helpers -------------------------------------------------

    def consumed_inners(self) -> dict[str, str]:
        """Map of agent name -> family name, for agents lifted by a fanout."""
        return {
            n.inner.name: n.name
            for n in self.nodes.values()
            if isinstance(n, FanoutNode)
        }

    def topology_nodes(self) -> list[str]:
        """Node names that take part in the graph (fanout inners excluded)."""
        consumed = self.consumed_inners()
        return [name for name in self.nodes if name not in consumed]

    def template_of(self, name: str) -> TemplateString:
        """The effective template of a topology node (a family's is its inner's)."""
        node = self.nodes[name]
        return node.inner.template if isinstance(node, FanoutNode) else node.template

    def data_edges(self) -> list[Edge]:
        return [e for e in self.edges if e.is_data()]

    def guarded_edges(self) -> list[Edge]:
        return [e for e in self.edges if not e.is_data()]

    def extra_channels(self) -> frozenset[str]:
        return self.channels - STANDARD_CHANNELS

    # -- canonical serialization -------------------------------------------

    def to_source(self) -> str:
        """Deterministic surface text that reparses to an equal Program.

        Nodes keep declaration order; edges keep declaration order, one per
        line.
        """
        lines: list[str] = []
        if self.channels != STANDARD_CHANNELS:
            lines.append(
                "use channels " + ", ".join(sorted(self.channels - {"task"}))
            )
        for name, node in self.nodes.items():
            if isinstance(node, AgentNode):
                lines.append(_agent_source(node))
            else:
                lines.append(f"{name} = fanout({node.inner.name}, k={node.k})")
        for e in self.edges:
            src = e.src if e.guard is None else f"{e.src}.on_{e.guard}"
            lines.append(f"{src} >> {e.dst}")
        return "\n".join(lines) + "\n"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Program):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.edges == other.edges
            and self.channels == other.channels
        )


def _quote(text: str) -> str:
    out = text.replace("\\", "\\\\").replace('"', '\\"')
    out = out.replace("\n", "\\n").replace("\t", "\\t")
    return f'"{out}"'


def _agent_source(node: AgentNode) -> str:
    tools = ", ".join(
        t if t.isidentifier() else _quote(t) for t in sorted(node.tools)
    )
    parts = [
        f"role={_quote(node.role)}",
        f"prompt={_quote(node.template.raw)}",
        f"tools={{{tools}}}",
        f"model={_quote(node.model_id)}",
    ]
    if node.sentinel:
        parts.append("sentinel=true")
    return f"{node.name} = agent({', '.join(parts)})"
