"""Graph runtime: walks a well-formed program, binding templates and
dispatching agents through a pluggable backend.

A node dispatches once all of its data inputs are bound.  Completing with
outcome g fires any outgoing guarded edge with guard g (up to the per-edge
retry cap); firing a guard invalidates the target node and its data
descendants, which then re-execute as their inputs refresh.  Fanout families
dispatch k member invocations sharing the upstream context; a downstream
reference to the family binds to a JSON list of member outputs in completion
order.

Two drive modes: "virtual" is single-threaded and deterministic, ordering
completions by each result's scripted latency; "threads" runs ready nodes
concurrently and records completion order atomically.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import UnboundVariable
from .feedback import FeedbackBundle, channel_text, delimit
from .program import (
    FANOUT_INDEX_VAR,
    AgentNode,
    Edge,
    FanoutNode,
    Program,
    render_template,
)

OUTCOME_OK = "ok"
OUTCOME_FAIL = "fail"


@dataclass(frozen=True)
class AgentResult:
    """What one invocation produced: output text, ok/fail outcome, and the
    agent's action trace (never empty).  ``latency`` orders completions in
    the deterministic executor."""

    output: str
    outcome: str = OUTCOME_OK
    trace: tuple[str, ...] = ()
    latency: float = 1.0

    def __post_init__(self) -> None:
        if self.outcome not in (OUTCOME_OK, OUTCOME_FAIL):
            raise ValueError(f"outcome must be ok or fail, got {self.outcome!r}")
        if not self.trace:
            object.__setattr__(self, "trace", ("(no actions recorded)",))


class AgentBackend:
    """Pluggable agent intelligence.

    Test doubles must be deterministic given identical inputs and seed; a
    real model adapter would live behind this same call.
    """

    def invoke(
        self,
        role: str,
        rendered_prompt: str,
        tools: frozenset[str],
        model_id: str,
        task_context: "TaskContext",
    ) -> AgentResult:
        raise NotImplementedError


@dataclass
class TaskContext:
    """Per-invocation context handed to the backend: the campaign task text,
    the target environment (the backend's tool surface), and identity."""

    task: str
    env: "TargetEnv"
    node: str
    member_index: int | None = None


class TargetEnv:
    """Base target environment: declares provided channels, carries the task
    instruction, accumulates per-agent traces, and composes the current
    feedback bundle.  Simulated targets extend this with real feedback.

    current_bundle() must materialize a value for every declared channel
    (empty until the target produces one); the dispatch-soundness guarantee
    relies on declared channels always being bindable."""

    def __init__(self, task_text: str = "", channels: frozenset[str] = frozenset()):
        self.task_text = task_text
        self.channels = channels
        self._traces: dict[str, str] = {}

    def reset(self) -> None:
        self._traces = {}

    def record_trace(self, node: str, trace: str) -> None:
        self._traces[node] = trace

    def extra_defaults(self, present: dict[str, str] | None = None) -> dict[str, str]:
        """Empty placeholders for declared campaign-extra channels."""
        from .program import STANDARD_CHANNELS

        extras = {c: "" for c in self.channels - STANDARD_CHANNELS}
        extras.update(present or {})
        return extras

    def current_bundle(self) -> FeedbackBundle:
        return FeedbackBundle(traces=dict(self._traces), extra=self.extra_defaults())


@dataclass(frozen=True)
class RunLimits:
    max_retries: int = 3  # per guarded edge
    max_dispatches: int = 10_000  # backend invocations per run


@dataclass(frozen=True)
class DispatchRecord:
    """One backend invocation, as written to the trace file."""

    node: str
    epoch: int
    prompt_digest: str
    output_digest: str
    outcome: str
    started: float
    finished: float
    stale: bool = False
    error: str | None = None


@dataclass(frozen=True)
class GuardFiring:
    src: str
    dst: str
    guard: str
    outcome: str
    at: float


@dataclass
class RunRecord:
    """Everything one run produced: the latest result per node or family
    member, the end-of-run feedback bundle, guard accounting and the full
    dispatch log."""

    per_node: dict[str, AgentResult] = field(default_factory=dict)
    bundle: FeedbackBundle = field(default_factory=FeedbackBundle)
    retry_counts: dict[tuple[str, str, str], int] = field(default_factory=dict)
    dispatches: list[DispatchRecord] = field(default_factory=list)
    guard_firings: list[GuardFiring] = field(default_factory=list)
    backend_failures: list[str] = field(default_factory=list)
    truncated: bool = False
    final_output: str = ""

    def dispatch_count(self) -> int:
        return len(self.dispatches)

    def trace_lines(self) -> list[str]:
        lines = ["aflow-trace 1"]
        for d in self.dispatches:
            flags = "stale" if d.stale else "live"
            lines.append(
                f"{d.node}\t{d.prompt_digest}\t{d.outcome}\t{d.output_digest}"
                f"\t{d.started:.3f}\t{d.finished:.3f}\t{flags}"
            )
        return lines


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def bind_channels(
    node: AgentNode,
    bundle: FeedbackBundle,
    upstream: dict[str, str],
    *,
    task_text: str = "",
    nonce: str = "local",
    member_index: int | None = None,
) -> dict[str, str]:
    """Produce the complete binding for one node's template.

    Upstream outputs pass through untouched; target-emitted freeform text
    (stdout/stderr, traces, sanitizer raw blocks, campaign extras) is wrapped
    in the campaign's fixed delimiters.  Raises UnboundVariable only for
    programs that skipped the well-formedness gate.
    """
    binding: dict[str, str] = {}
    for var in node.template.variables:
        if "." in var:
            if var not in upstream:
                raise UnboundVariable(f"{node.name}: no upstream binding for {var}")
            binding[var] = upstream[var]
        elif var == "task":
            binding[var] = task_text
        elif var == FANOUT_INDEX_VAR:
            if member_index is None:
                raise UnboundVariable(f"{node.name}: fanout_index outside a family")
            binding[var] = str(member_index)
        elif var in ("cov", "branch"):
            if (var == "cov" and bundle.cov is None) or (
                var == "branch" and bundle.branch is None
            ):
                raise UnboundVariable(f"{node.name}: channel {var} not provided")
            binding[var] = channel_text(bundle, var, nonce)
        elif var in ("outcome", "stdout", "stderr", "trace"):
            binding[var] = channel_text(bundle, var, nonce)
        elif var == "san":
            binding[var] = delimit("san", channel_text(bundle, "san", nonce), nonce)
        elif var in bundle.extra:
            binding[var] = channel_text(bundle, var, nonce)
        else:
            raise UnboundVariable(f"{node.name}: channel {var} not provided")
    return binding


@dataclass(frozen=True)
class _Completion:
    node: str  # topology node name
    member_index: int | None
    member_name: str | None
    epoch: int
    result: AgentResult
    error: str | None
    prompt_digest: str
    started: float


class _Run:
    def __init__(
        self,
        program: Program,
        backend: AgentBackend,
        env: TargetEnv,
        limits: RunLimits,
        nonce: str,
    ):
        self.program = program
        self.backend = backend
        self.env = env
        self.limits = limits
        self.nonce = nonce

        self.topo = program.topology_nodes()
        consumed = program.consumed_inners()
        wired = [
            e
            for e in program.edges
            if e.src not in consumed and e.dst not in consumed
        ]
        self.data_preds: dict[str, list[str]] = {n: [] for n in self.topo}
        self.data_succs: dict[str, list[str]] = {n: [] for n in self.topo}
        self.guards_out: dict[str, list[Edge]] = {n: [] for n in self.topo}
        for e in wired:
            if e.guard is None:
                self.data_preds[e.dst].append(e.src)
                self.data_succs[e.src].append(e.dst)
            else:
                self.guards_out[e.src].append(e)

        self.outputs: dict[str, str] = {}
        self.epoch: dict[str, int] = {n: 0 for n in self.topo}
        self.inflight: set[str] = set()
        self.family_done: dict[str, list[tuple[str, str]]] = {}
        self.family_outcomes: dict[str, list[str]] = {}

        self.record = RunRecord()
        self.dispatched = 0
        self.seq = 0
        self.now = 0.0
        self.stopped = False

    # -- shared completion machinery ---------------------------------------

    def ready(self, n: str) -> bool:
        return (
            n not in self.inflight
            and n not in self.outputs
            and all(p in self.outputs for p in self.data_preds[n])
        )

    def descendants(self, n: str) -> set[str]:
        seen: set[str] = set()
        stack = list(self.data_succs[n])
        while stack:
            d = stack.pop()
            if d in seen:
                continue
            seen.add(d)
            stack.extend(self.data_succs[d])
        return seen

    def invalidate(self, n: str) -> None:
        cone = {n} | self.descendants(n)
        for d in cone:
            self.outputs.pop(d, None)
            self.epoch[d] += 1
            self.inflight.discard(d)
            self.family_done.pop(d, None)
            self.family_outcomes.pop(d, None)

    def build_invocations(self, n: str) -> list[tuple[AgentNode, int | None, str]]:
        node = self.program.nodes[n]
        if isinstance(node, FanoutNode):
            return [
                (node.inner, i, f"{node.inner.name}[{i}]")
                for i in range(1, node.k + 1)
            ]
        assert isinstance(node, AgentNode)
        return [(node, None, n)]

    def upstream_snapshot(self, n: str) -> dict[str, str]:
        return {f"{p}.out": self.outputs[p] for p in self.data_preds[n]}

    def invoke(
        self, owner: AgentNode, prompt: str, member_index: int | None, name: str
    ) -> tuple[AgentResult, str | None]:
        ctx = TaskContext(
            task=self.env.task_text, env=self.env, node=name, member_index=member_index
        )
        try:
            return self.backend.invoke(owner.role, prompt, owner.tools, owner.model_id, ctx), None
        except Exception as exc:  # recorded, node fails, run continues
            result = AgentResult(
                output="",
                outcome=OUTCOME_FAIL,
                trace=(f"backend failure: {exc}",),
            )
            return result, str(exc)

    def process_completion(self, comp: _Completion) -> list[str]:
        """Record one completion; returns nodes to try dispatching next."""
        stale = comp.epoch != self.epoch[comp.node]
        self.record.dispatches.append(
            DispatchRecord(
                node=comp.member_name or comp.node,
                epoch=comp.epoch,
                prompt_digest=comp.prompt_digest,
                output_digest=_digest(comp.result.output),
                outcome=comp.result.outcome,
                started=comp.started,
                finished=self.now,
                stale=stale,
                error=comp.error,
            )
        )
        if comp.error is not None:
            self.record.backend_failures.append(comp.member_name or comp.node)
        if stale:
            return []

        name = comp.node
        trace_text = "\n".join(comp.result.trace)
        if comp.member_name is not None:
            self.record.per_node[comp.member_name] = comp.result
            self.env.record_trace(comp.member_name, trace_text)
            done = self.family_done.setdefault(name, [])
            done.append((comp.member_name, comp.result.output))
            self.family_outcomes.setdefault(name, []).append(comp.result.outcome)
            node = self.program.nodes[name]
            assert isinstance(node, FanoutNode)
            if len(done) < node.k:
                return []
            # Family complete: list binding in completion order; the family
            # succeeds when at least one member did.
            output = json.dumps([out for _, out in done])
            outcome = (
                OUTCOME_OK
                if OUTCOME_OK in self.family_outcomes[name]
                else OUTCOME_FAIL
            )
            result = AgentResult(
                output=output,
                outcome=outcome,
                trace=tuple(member for member, _ in done),
            )
        else:
            result = comp.result
            self.env.record_trace(name, trace_text)

        self.record.per_node[name] = result
        self.outputs[name] = result.output
        self.inflight.discard(name)
        self.record.final_output = result.output

        to_try: list[str] = []
        for e in self.guards_out[name]:
            if e.guard != result.outcome:
                continue
            key = (e.src, e.dst, e.guard or "")
            fired = self.record.retry_counts.get(key, 0)
            if fired >= self.limits.max_retries:
                continue  # cap reached: proceed as if the edge were absent
            self.record.retry_counts[key] = fired + 1
            self.record.guard_firings.append(
                GuardFiring(e.src, e.dst, e.guard or "", result.outcome, self.now)
            )
            self.invalidate(e.dst)
            to_try.append(e.dst)
        to_try.extend(self.data_succs[name])
        return to_try

    # -- deterministic single-threaded drive --------------------------------

    def run_virtual(self) -> RunRecord:
        heap: list[tuple[float, int, _Completion]] = []

        def dispatch(n: str) -> None:
            invocations = self.build_invocations(n)
            if self.dispatched + len(invocations) > self.limits.max_dispatches:
                self.record.truncated = True
                self.stopped = True
                return
            upstream = self.upstream_snapshot(n)
            bundle = self.env.current_bundle()
            self.inflight.add(n)
            for owner, idx, name in invocations:
                binding = bind_channels(
                    owner,
                    bundle,
                    upstream,
                    task_text=self.env.task_text,
                    nonce=self.nonce,
                    member_index=idx,
                )
                prompt = render_template(owner.template, binding)
                self.dispatched += 1
                result, error = self.invoke(owner, prompt, idx, name)
                self.seq += 1
                heapq.heappush(
                    heap,
                    (
                        self.now + max(result.latency, 0.0),
                        self.seq,
                        _Completion(
                            node=n,
                            member_index=idx,
                            member_name=name if idx is not None else None,
                            epoch=self.epoch[n],
                            result=result,
                            error=error,
                            prompt_digest=_digest(prompt),
                            started=self.now,
                        ),
                    ),
                )

        for n in self.topo:
            if not self.stopped and self.ready(n):
                dispatch(n)
        while heap:
            finish, _, comp = heapq.heappop(heap)
            self.now = finish
            for nxt in self.process_completion(comp):
                if not self.stopped and self.ready(nxt):
                    dispatch(nxt)
        return self.finish()

    # -- concurrent drive -----------------------------------------------------

    def run_threads(self, max_workers: int) -> RunRecord:
        completions: queue.Queue[_Completion] = queue.Queue()
        outstanding = 0
        clock = threading.Lock()
        tick = [0.0]

        def stamp() -> float:
            with clock:
                tick[0] += 1.0
                return tick[0]

        with ThreadPoolExecutor(max_workers=max_workers) as pool:

            def dispatch(n: str) -> int:
                invocations = self.build_invocations(n)
                if self.dispatched + len(invocations) > self.limits.max_dispatches:
                    self.record.truncated = True
                    self.stopped = True
                    return 0
                upstream = self.upstream_snapshot(n)
                bundle = self.env.current_bundle()
                self.inflight.add(n)
                started = stamp()
                epoch = self.epoch[n]
                for owner, idx, name in invocations:
                    binding = bind_channels(
                        owner,
                        bundle,
                        upstream,
                        task_text=self.env.task_text,
                        nonce=self.nonce,
                        member_index=idx,
                    )
                    prompt = render_template(owner.template, binding)
                    self.dispatched += 1

                    def work(
                        owner: AgentNode = owner,
                        prompt: str = prompt,
                        idx: int | None = idx,
                        name: str = name,
                        epoch: int = epoch,
                        started: float = started,
                    ) -> None:
                        result, error = self.invoke(owner, prompt, idx, name)
                        completions.put(
                            _Completion(
                                node=n,
                                member_index=idx,
                                member_name=name if idx is not None else None,
                                epoch=epoch,
                                result=result,
                                error=error,
                                prompt_digest=_digest(prompt),
                                started=started,
                            )
                        )

                    pool.submit(work)
                return len(invocations)

            for n in self.topo:
                if not self.stopped and self.ready(n):
                    outstanding += dispatch(n)
            while outstanding:
                comp = completions.get()
                outstanding -= 1
                self.now = stamp()
                for nxt in self.process_completion(comp):
                    if not self.stopped and self.ready(nxt):
                        outstanding += dispatch(nxt)
        return self.finish()

    def finish(self) -> RunRecord:
        self.record.bundle = self.env.current_bundle()
        return self.record


def run(
    program: Program,
    backend: AgentBackend,
    env: TargetEnv,
    limits: RunLimits | None = None,
    *,
    mode: str = "virtual",
    nonce: str = "local",
    max_workers: int = 8,
) -> RunRecord:
    """Execute a program against a target environment.

    The caller is expected to have gated the program through check() for the
    environment's channel set; the soundness guarantee (no UnboundVariable at
    dispatch) holds exactly for programs that passed.
    """
    runner = _Run(program, backend, env, limits or RunLimits(), nonce)
    if mode == "virtual":
        return runner.run_virtual()
    if mode == "threads":
        return runner.run_threads(max_workers)
    raise ValueError(f"unknown run mode {mode!r}")
