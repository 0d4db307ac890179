"""Scripted backend doubles.

Real model adapters are deliberately out of tree; these doubles make the
whole loop runnable and verifiable at desk scale.  Every double is a pure
function of its inputs and seed, so campaigns replay byte-identically.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

from .optimizer import (
    Backends,
    Diagnosis,
    DiagnoserBackend,
    ProposerBackend,
)
from .parser import parse_program
from .program import AgentNode, Edge, Program, TemplateString
from .runtime import AgentBackend, AgentResult, TaskContext


def _h(*parts: object) -> str:
    return hashlib.sha256("|".join(str(p) for p in parts).encode()).hexdigest()


class EchoBackend(AgentBackend):
    """Succeeds immediately, echoing the rendered prompt."""

    def invoke(self, role, rendered_prompt, tools, model_id, task_context):
        return AgentResult(
            output=rendered_prompt,
            outcome="ok",
            trace=(f"{role} echoed {len(rendered_prompt)} chars",),
        )


@dataclass
class HashBackend(AgentBackend):
    """Deterministic pseudo-random behavior: output, outcome and latency all
    derive from a hash of the invocation.  Used to fuzz the runtime."""

    seed: int = 0
    fail_rate: float = 0.25

    def invoke(self, role, rendered_prompt, tools, model_id, task_context):
        digest = _h(self.seed, role, task_context.node, rendered_prompt)
        fail = int(digest[:8], 16) / 0xFFFFFFFF < self.fail_rate
        return AgentResult(
            output=digest[:24],
            outcome="fail" if fail else "ok",
            trace=(f"{role} acted ({digest[:8]})",),
            latency=1.0 + int(digest[8:12], 16) % 7,
        )


# -- the staged campaign: a planted alpha-plane copy fault ----------------------

SOLO_SOURCE = """\
solo = agent(role="solo", prompt="find a memory-safety bug in {{task}}", tools={read, exec}, model=M)
"""

ANALYZE_CRAFT_SOURCE = """\
analyzer = agent(role="analyzer", prompt="map the input format of {{task}} from source, guided by {{cov}}", tools={read}, model=M)
crafter = agent(role="crafter", prompt="craft a candidate input from {{analyzer.out}}", tools={exec}, model=M)
analyzer >> crafter
"""

VERIFIED_RETRY_SOURCE = """\
analyzer = agent(role="analyzer", prompt="map the input format of {{task}} from source, guided by {{cov}}", tools={read}, model=M)
crafter = agent(role="crafter", prompt="craft a candidate input from {{analyzer.out}}", tools={exec}, model=M)
verifier = agent(role="verifier", prompt="mutate {{crafter.out}} and rerun until {{san}} reports an error", tools={exec}, model=M)
analyzer >> crafter >> verifier
verifier.on_fail >> verifier
"""

_GATE_PREFIX = bytes.fromhex("66747970")  # magic the format gate expects
_CRAFT_DEPTH = 16
_PROBE_DEPTHS = (4, 2, 8)


class StagedCampaignAgents(AgentBackend):
    """Agent doubles for the three-stage campaign against the planted
    alpha-plane copy fault.

    solo submits a junk file that dies at the format gate; analyzer reads the
    target source and notes the expected layout; crafter submits a valid file
    with a 16-bit depth that never takes the buggy branch; verifier mutates
    the depth field and resubmits until the sanitizer complains.
    """

    def invoke(self, role, rendered_prompt, tools, model_id, ctx: TaskContext):
        if role == "solo":
            data = b"\x00" * 6
            ctx.env.submit(data)
            return AgentResult(
                output=data.hex(),
                outcome="fail",
                trace=("generated a candidate file from scratch", "ran the target"),
            )
        if role == "analyzer":
            entry_file = ctx.env.target.entry[0]
            listing = ctx.env.read_source(entry_file)
            note = (
                "layout: 4 magic bytes 66747970, depth byte at offset 4, "
                f"payload follows ({len(listing)} source chars reviewed)"
            )
            return AgentResult(output=note, outcome="ok", trace=(f"read {entry_file}",))
        if role == "crafter":
            data = _GATE_PREFIX + bytes([_CRAFT_DEPTH, 0])
            ctx.env.submit(data)
            return AgentResult(
                output=data.hex(),
                outcome="ok",
                trace=("assembled a gate-passing file", "ran the target"),
            )
        if role == "verifier":
            tried = {
                s[4] for s in ctx.env.submissions if len(s) > 4 and s[:4] == _GATE_PREFIX
            }
            depth = next((d for d in _PROBE_DEPTHS if d not in tried), _PROBE_DEPTHS[-1])
            data = _GATE_PREFIX + bytes([depth, 0])
            ctx.env.submit(data)
            crashed = bool(ctx.env.current_bundle().san)
            return AgentResult(
                output=data.hex(),
                outcome="ok" if crashed else "fail",
                trace=(f"flipped depth field to {depth}", "ran the target"),
            )
        raise ValueError(f"no scripted behavior for role {role!r}")


@dataclass
class StagedCampaignProposer(ProposerBackend):
    """Emits the three-stage harness sequence, one stage per iteration."""

    calls: int = 0

    def propose(self, diagnosis, archive):
        self.calls += 1
        stages = (SOLO_SOURCE, ANALYZE_CRAFT_SOURCE, VERIFIED_RETRY_SOURCE)
        return stages[min(self.calls, len(stages)) - 1]


@dataclass
class StagedCampaignDiagnoser(DiagnoserBackend):
    calls: int = 0

    def diagnose(self, per_task, archive):
        self.calls += 1
        scripted = (
            Diagnosis(
                bottleneck="solo",
                intended="craft a crashing input in one shot",
                actual="the input failed an early format check; nothing past the gate ran",
                corrective_edit="separate format analysis from crafting and wire coverage in",
            ),
            Diagnosis(
                bottleneck="crafter",
                intended="reach the vulnerable conversion path",
                actual="the conversion function ran but the 8-bit branch was never taken",
                corrective_edit="add a verifier that mutates the depth field and retries on failure",
            ),
            Diagnosis(
                bottleneck="verifier",
                intended="confirm the fault with the sanitizer",
                actual="sanitizer reported the overflow at the copy site",
                corrective_edit="keep the incumbent harness; the crash reproduces",
            ),
        )
        return scripted[min(self.calls, len(scripted)) - 1]


# -- generic doubles ---------------------------------------------------------------

@dataclass
class IdentityProposer(ProposerBackend):
    """Always re-emits one fixed program."""

    source: str

    def propose(self, diagnosis, archive):
        return self.source


@dataclass
class FlakyProposer(ProposerBackend):
    """Emits garbage on a fixed schedule (every Nth call), the fixed program
    otherwise; every_n=5 makes exactly 20% of proposals malformed."""

    source: str
    every_n: int = 5
    calls: int = 0

    def propose(self, diagnosis, archive):
        self.calls += 1
        if self.calls % self.every_n == 0:
            return "broken = agent(role=\"broken\", prompt=\"oops\"  # unterminated"
        return self.source


@dataclass
class RotatingEditProposer(ProposerBackend):
    """Applies one single-family edit per call, cycling through the families.

    Edits are valid programs, so only the edit-family freeze can reject them;
    that isolates the freeze logic in campaigns that exercise it.
    """

    source: str
    seed: int = 0
    calls: int = 0

    def propose(self, diagnosis, archive):
        family = ("prompt", "tool", "structural")[self.calls % 3]
        self.calls += 1
        program = parse_program(self.source)
        if family == "prompt":
            return self._edit_prompt(program)
        if family == "tool":
            return self._edit_tools(program)
        return self._edit_structure(program)

    def _edit_prompt(self, program: Program) -> str:
        name, node = self._first_agent(program)
        edited = AgentNode(
            name=node.name,
            role=node.role,
            template=TemplateString(node.template.raw + f" (pass {self.calls})"),
            model_id=node.model_id,
            tools=node.tools,
            sentinel=node.sentinel,
        )
        program.nodes[name] = edited
        return program.to_source()

    def _edit_tools(self, program: Program) -> str:
        name, node = self._first_agent(program)
        tools = node.tools ^ {"exec"}
        edited = AgentNode(
            name=node.name,
            role=node.role,
            template=node.template,
            model_id=node.model_id,
            tools=tools,
            sentinel=node.sentinel,
        )
        program.nodes[name] = edited
        return program.to_source()

    def _edit_structure(self, program: Program) -> str:
        anchor = program.topology_nodes()[-1]
        aux = f"aux_{self.calls}"
        program.nodes[aux] = AgentNode(
            name=aux,
            role="aux",
            template=TemplateString(f"summarize {{{{{anchor}.out}}}}"),
            model_id="M",
            tools=frozenset({"read"}),
        )
        program.edges.append(Edge(src=anchor, dst=aux))
        return program.to_source()

    def _first_agent(self, program: Program) -> tuple[str, AgentNode]:
        for name in program.topology_nodes():
            node = program.nodes[name]
            if isinstance(node, AgentNode):
                return name, node
        raise ValueError("program has no plain agent node")


class InstructionSolverAgents(AgentBackend):
    """Solves tasks whose instruction states the requirement outright
    ("... byte I equals V ..."); anything vaguer defeats it."""

    _BYTE_RE = re.compile(r"byte (\d+) equals (\d+)")

    def invoke(self, role, rendered_prompt, tools, model_id, ctx: TaskContext):
        m = self._BYTE_RE.search(ctx.task)
        if m is None:
            return AgentResult(
                output="no actionable requirement found",
                outcome="fail",
                trace=("parsed the instruction", "gave up"),
            )
        index, value = int(m.group(1)), int(m.group(2))
        data = bytearray(max(index + 1, 2))
        data[index] = value
        if ctx.env is not None and hasattr(ctx.env, "submit"):
            ctx.env.submit(bytes(data))
        return AgentResult(
            output=bytes(data).hex(),
            outcome="ok",
            trace=(f"set byte {index} to {value}", "ran the target"),
        )


@dataclass
class TraceKeyDiagnoser(DiagnoserBackend):
    """Minimal valid diagnoser: names the first traced plain node as the
    bottleneck and reports outcome statistics."""

    def diagnose(self, per_task, archive):
        names = sorted(
            {
                node
                for bundle in per_task.values()
                for node in bundle.traces
                if "[" not in node
            }
        )
        passed = sum(1 for b in per_task.values() if b.outcome == "pass")
        return Diagnosis(
            bottleneck=names[0] if names else "(unknown)",
            intended="solve every task in the suite",
            actual=f"{passed} of {len(per_task)} tasks passed",
            corrective_edit="sharpen the weakest agent's prompt",
        )


@dataclass
class CrashingProposer(ProposerBackend):
    """Raises on every call; exists to exercise the failed-iteration path."""

    def propose(self, diagnosis, archive):
        raise RuntimeError("proposer backend is down")


# -- registry -----------------------------------------------------------------------

def make_backends(name: str, seed: int, initial_source: str = "") -> Backends:
    """Construct the named scripted backend triple (proposer, diagnoser,
    agents).  Campaign configs refer to these ids."""
    if name == "staged-crash":
        return Backends(
            proposer=StagedCampaignProposer(),
            diagnoser=StagedCampaignDiagnoser(),
            agents=StagedCampaignAgents(),
        )
    if name == "identity":
        return Backends(
            proposer=IdentityProposer(initial_source),
            diagnoser=TraceKeyDiagnoser(),
            agents=InstructionSolverAgents(),
        )
    if name == "flaky20":
        return Backends(
            proposer=FlakyProposer(initial_source, every_n=5),
            diagnoser=TraceKeyDiagnoser(),
            agents=InstructionSolverAgents(),
        )
    if name == "rotating-edits":
        return Backends(
            proposer=RotatingEditProposer(initial_source, seed=seed),
            diagnoser=TraceKeyDiagnoser(),
            agents=InstructionSolverAgents(),
        )
    raise ValueError(f"unknown backend id {name!r}")


BACKEND_IDS = ("staged-crash", "identity", "flaky20", "rotating-edits")
