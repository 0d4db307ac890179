"""Feedback-guided harness search.

Each iteration proposes a candidate program, gates it through a three-stage
validation pipeline (parse, well-formedness, one-shot smoke test) plus the
edit-family freeze, runs the surviving candidate on every task, scores the
feedback, diagnoses the failure mode, and appends to the archive.  The
incumbent updates only on strict score improvement, so the best-so-far
sequence is nondecreasing and ties resolve to the earliest iteration.

Rejected candidates never reach the task suite: at most the single smoke
task runs before rejection, which is what makes cheap structural validation
worth it when most of the budget is agent inference.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .checker import check
from .errors import ParseError
from .feedback import FeedbackBundle, unique_crashes
from .parser import parse_program
from .program import AgentNode, FanoutNode, Program
from .runtime import AgentBackend, RunLimits, RunRecord, TargetEnv, run


class MissingVerdict(Exception):
    """A pass-rate score was asked of a bundle with no test verdict."""


@dataclass(frozen=True)
class Diagnosis:
    """Four-field failure attribution produced after every iteration."""

    bottleneck: str  # node name or edge label in the evaluated harness
    intended: str
    actual: str
    corrective_edit: str

    def complete(self) -> bool:
        return all(
            (self.bottleneck, self.intended, self.actual, self.corrective_edit)
        )


@dataclass
class ArchiveEntry:
    harness: Program
    feedback: dict[str, FeedbackBundle]
    diagnosis: Diagnosis
    score: float
    iteration: int

    def summary_line(self) -> str:
        edit = self.diagnosis.corrective_edit
        if len(edit) > 80:
            edit = edit[:77] + "..."
        return (
            f"iter {self.iteration}: score {self.score:g};"
            f" bottleneck {self.diagnosis.bottleneck}; {edit}"
        )


@dataclass(frozen=True)
class ArchiveViewEntry:
    iteration: int
    score: float
    form: str  # full | summary
    summary: str
    source: str = ""
    diagnosis: Diagnosis | None = None
    feedback_digests: dict[str, str] = field(default_factory=dict)


def archive_view(entries: Sequence[ArchiveEntry], w: int = 3) -> list[ArchiveViewEntry]:
    """Window the archive for backend consumption: the top-scoring entry and
    the most recent ``w`` in full, everything older as one-line summaries.

    The top entry appears once even when it is also recent, so at most w+1
    entries are full.
    """
    if w < 0:
        raise ValueError("window must be >= 0")
    recent = entries[max(len(entries) - w, 0) :] if w else []
    full: set[int] = {e.iteration for e in recent}
    if entries:
        best = max(entries, key=lambda e: (e.score, -e.iteration))
        full.add(best.iteration)
    view = []
    for e in entries:
        if e.iteration in full:
            view.append(
                ArchiveViewEntry(
                    iteration=e.iteration,
                    score=e.score,
                    form="full",
                    summary=e.summary_line(),
                    source=e.harness.to_source(),
                    diagnosis=e.diagnosis,
                    feedback_digests={t: b.digest() for t, b in e.feedback.items()},
                )
            )
        else:
            view.append(
                ArchiveViewEntry(
                    iteration=e.iteration,
                    score=e.score,
                    form="summary",
                    summary=e.summary_line(),
                )
            )
    return view


@dataclass(frozen=True)
class EditFamilyMask:
    """Which edit families the proposer may touch; at least one stays open."""

    structural: bool = True
    prompt: bool = True
    tool: bool = True

    def __post_init__(self) -> None:
        if not (self.structural or self.prompt or self.tool):
            raise ValueError("at least one edit family must be enabled")

    def frozen_families(self) -> frozenset[str]:
        out = set()
        if not self.structural:
            out.add("structural")
        if not self.prompt:
            out.add("prompt")
        if not self.tool:
            out.add("tool")
        return frozenset(out)


def _effective(node: AgentNode | FanoutNode) -> AgentNode:
    return node.inner if isinstance(node, FanoutNode) else node


def diff_families(old: Program, new: Program) -> frozenset[str]:
    """Classify the difference between two programs into edit families.

    structural: node set, edge set, fanout width, guards, or agent identity
    (kind, role, model, sentinel) changed; prompt: a shared node's template
    text changed; tool: a shared node's tool set changed.
    """
    families: set[str] = set()
    if set(old.nodes) != set(new.nodes):
        families.add("structural")
    old_edges = sorted((e.src, e.dst, e.guard or "") for e in old.edges)
    new_edges = sorted((e.src, e.dst, e.guard or "") for e in new.edges)
    if old_edges != new_edges:
        families.add("structural")
    for name in set(old.nodes) & set(new.nodes):
        a, b = old.nodes[name], new.nodes[name]
        if type(a) is not type(b):
            families.add("structural")
            continue
        if isinstance(a, FanoutNode) and isinstance(b, FanoutNode):
            if a.k != b.k or a.inner.name != b.inner.name:
                families.add("structural")
        ea, eb = _effective(a), _effective(b)
        if (ea.role, ea.model_id, ea.sentinel) != (eb.role, eb.model_id, eb.sentinel):
            families.add("structural")
        if ea.template.raw != eb.template.raw:
            families.add("prompt")
        if ea.tools != eb.tools:
            families.add("tool")
    return frozenset(families)


# -- score functions -----------------------------------------------------------

def score_pass_rate(bundles: dict[str, FeedbackBundle]) -> float:
    """Fraction of tasks whose verdict is pass."""
    if not bundles:
        return 0.0
    for task_id, bundle in bundles.items():
        if bundle.outcome == "none":
            raise MissingVerdict(f"task {task_id} has no verdict")
    passed = sum(1 for b in bundles.values() if b.outcome == "pass")
    return passed / len(bundles)


def score_unique_crashes(bundles: dict[str, FeedbackBundle]) -> float:
    """Count of distinct crash signatures across all tasks."""
    return float(unique_crashes(bundles.values()).count)


SCORE_FUNCTIONS: dict[str, Callable[[dict[str, FeedbackBundle]], float]] = {
    "pass_rate": score_pass_rate,
    "unique_crashes": score_unique_crashes,
}


# -- backends --------------------------------------------------------------------

class ProposerBackend:
    """Emits candidate program text from the latest diagnosis and the
    archive view.  Output is text, validated downstream, never trusted."""

    def propose(
        self, diagnosis: Diagnosis | None, archive: list[ArchiveViewEntry]
    ) -> str:
        raise NotImplementedError


class DiagnoserBackend:
    """Produces the four-field diagnosis from per-task feedback bundles."""

    def diagnose(
        self,
        per_task: dict[str, FeedbackBundle],
        archive: list[ArchiveViewEntry],
    ) -> Diagnosis:
        raise NotImplementedError

    def summarize_trace(self, node: str, trace: str) -> str | None:
        """Hook for trace compression; None falls back to truncation."""
        return None


@dataclass
class Backends:
    proposer: ProposerBackend
    diagnoser: DiagnoserBackend
    agents: AgentBackend


# -- validation -------------------------------------------------------------------

@dataclass(frozen=True)
class Rejection:
    stage: str  # parse | check | frozen-family | smoke
    detail: str

    def __str__(self) -> str:
        return f"rejected at {self.stage}: {self.detail}"


def validate_candidate(
    source: str,
    *,
    channels: frozenset[str],
    mask: EditFamilyMask,
    incumbent: Program,
    tool_registry: frozenset[str] | None = None,
    smoke: Callable[[Program], str | None] | None = None,
) -> Program | Rejection:
    """Three-stage validation plus the edit-family freeze.

    Stage 1 parses, stage 2 checks well-formedness against the environment's
    channel set, then a frozen-family diff against the incumbent, and stage 3
    smoke-tests on a single task.  Rejection carries the stage and detail and
    consumes no task-suite executions beyond that one smoke run.
    """
    try:
        program = parse_program(source, tool_registry=tool_registry)
    except ParseError as exc:
        return Rejection("parse", str(exc))
    report = check(program, channels)
    if not report.well_formed:
        v = report.violations[0]
        return Rejection("check", str(v))
    touched = diff_families(incumbent, program)
    frozen_hit = touched & mask.frozen_families()
    if frozen_hit:
        return Rejection("frozen-family", ",".join(sorted(frozen_hit)))
    if smoke is not None:
        failure = smoke(program)
        if failure is not None:
            return Rejection("smoke", failure)
    return program


# -- campaign plumbing ---------------------------------------------------------------

@dataclass
class CampaignEnv:
    """Everything the loop needs to evaluate a harness: the task set, an
    environment factory, the channel set candidates are checked against, and
    an optional hidden-test grader that overrides the bundle verdict."""

    tasks: list
    make_env: Callable[[object], TargetEnv]
    channels: frozenset[str]
    tool_registry: frozenset[str] | None = None
    grader: Callable[[object, RunRecord], str] | None = None
    smoke_task_id: str | None = None

    def ordered_tasks(self) -> list:
        return sorted(self.tasks, key=lambda t: t.id)

    def smoke_task(self):
        wanted = self.smoke_task_id
        ordered = self.ordered_tasks()
        if wanted is None:
            return ordered[0]
        for task in ordered:
            if task.id == wanted:
                return task
        raise ValueError(f"smoke task {wanted!r} is not in the task set")


@dataclass
class ExecutionCounters:
    full_runs: int = 0
    smoke_runs: int = 0
    evaluated_sources: list[str] = field(default_factory=list)
    rejected_sources: list[str] = field(default_factory=list)


@dataclass
class IterationRecord:
    iteration: int
    candidate_source: str
    check_report: str  # verdict text for the evaluated harness
    accepted: bool  # a proposed candidate survived validation
    fallback: bool  # incumbent evaluated instead
    failed: bool  # backend fault: no evaluation at all
    proposals: int
    rejections: list[Rejection]
    score: float
    improved: bool
    best_score: float
    digests: dict[str, str]
    diagnosis: Diagnosis
    families_vs_initial: list[str]

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "candidate_source": self.candidate_source,
            "check_report": self.check_report,
            "accepted": self.accepted,
            "fallback": self.fallback,
            "failed": self.failed,
            "proposals": self.proposals,
            "rejections": [{"stage": r.stage, "detail": r.detail} for r in self.rejections],
            "score": self.score,
            "improved": self.improved,
            "best_score": self.best_score,
            "digests": self.digests,
            "diagnosis": {
                "bottleneck": self.diagnosis.bottleneck,
                "intended": self.diagnosis.intended,
                "actual": self.diagnosis.actual,
                "corrective_edit": self.diagnosis.corrective_edit,
            },
            "families_vs_initial": self.families_vs_initial,
        }


@dataclass
class OptimizationResult:
    best: Program
    best_score: float
    best_iteration: int
    history: list[IterationRecord]
    archive: list[ArchiveEntry]
    counters: ExecutionCounters


def truncate_trace(text: str, budget: int = 2000) -> str:
    """Head+tail retention within a byte budget."""
    if len(text) <= budget:
        return text
    half = max(budget // 2 - 20, 1)
    return text[:half] + f"\n... ({len(text) - 2 * half} bytes elided) ...\n" + text[-half:]


def _synthetic_diagnosis(program: Program, reason: str) -> Diagnosis:
    nodes = program.topology_nodes()
    return Diagnosis(
        bottleneck=nodes[0] if nodes else "(empty)",
        intended="evaluate the candidate harness on the task set",
        actual=reason,
        corrective_edit="repair the failing backend and retry the iteration",
    )


def _source_digest(source: str) -> str:
    return hashlib.sha256(source.encode()).hexdigest()[:16]


PROPOSER_RETRIES = 2  # per iteration, on top of the first proposal


def harness_opt(
    backends: Backends,
    campaign: CampaignEnv,
    score_fn: Callable[[dict[str, FeedbackBundle]], float],
    budget: int,
    mask: EditFamilyMask,
    seed: int,
    initial_source: str,
    *,
    window: int = 3,
    limits: RunLimits | None = None,
    trace_budget: int = 2000,
) -> OptimizationResult:
    """Run the full search loop for exactly ``budget`` iterations.

    The initial harness is the incumbent until a candidate strictly beats
    it; proposer retries never consume iterations; per-iteration faults mark
    the iteration failed (score 0, synthetic diagnosis) without aborting the
    campaign.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    limits = limits or RunLimits()
    nonce = hashlib.sha256(f"campaign:{seed}".encode()).hexdigest()[:12]

    initial = parse_program(initial_source, tool_registry=campaign.tool_registry)
    initial_report = check(initial, campaign.channels)
    if not initial_report.well_formed:
        raise ValueError("initial harness is ill-formed:\n" + initial_report.to_text())

    def run_on(task, program: Program) -> tuple[RunRecord, FeedbackBundle]:
        env = campaign.make_env(task)
        record = run(program, backends.agents, env, limits, nonce=nonce)
        bundle = record.bundle
        if campaign.grader is not None:
            bundle = replace(bundle, outcome=campaign.grader(task, record))
        return record, bundle

    def smoke(program: Program) -> str | None:
        counters.smoke_runs += 1
        try:
            record, _ = run_on(campaign.smoke_task(), program)
        except Exception as exc:  # runtime faults invisible at the type level
            return f"smoke run raised: {exc}"
        if record.truncated:
            return "smoke run exhausted the dispatch budget"
        if record.backend_failures:
            return "backend failure on " + ",".join(record.backend_failures)
        return None

    counters = ExecutionCounters()
    archive: list[ArchiveEntry] = []
    history: list[IterationRecord] = []
    best = initial  # the incumbent: updated only on strict improvement
    best_score = 0.0
    best_iteration = 0
    diagnosis: Diagnosis | None = None

    for i in range(1, budget + 1):
        view = archive_view(archive, window)
        candidate: Program | None = None
        candidate_source = ""
        rejections: list[Rejection] = []
        failed_reason: str | None = None
        proposals = 0
        while proposals <= PROPOSER_RETRIES:
            try:
                source = backends.proposer.propose(diagnosis, view)
            except Exception as exc:
                failed_reason = f"proposer fault: {exc}"
                break
            proposals += 1
            outcome = validate_candidate(
                source,
                channels=campaign.channels,
                mask=mask,
                incumbent=best,
                tool_registry=campaign.tool_registry,
                smoke=smoke,
            )
            if isinstance(outcome, Rejection):
                rejections.append(outcome)
                counters.rejected_sources.append(_source_digest(source))
                continue
            candidate = outcome
            candidate_source = source
            break

        if failed_reason is not None:
            diagnosis = _synthetic_diagnosis(best, failed_reason)
            archive.append(
                ArchiveEntry(
                    harness=best,
                    feedback={},
                    diagnosis=diagnosis,
                    score=0.0,
                    iteration=i,
                )
            )
            history.append(
                IterationRecord(
                    iteration=i,
                    candidate_source="",
                    check_report="",
                    accepted=False,
                    fallback=False,
                    failed=True,
                    proposals=proposals,
                    rejections=rejections,
                    score=0.0,
                    improved=False,
                    best_score=best_score,
                    digests={},
                    diagnosis=diagnosis,
                    families_vs_initial=[],
                )
            )
            continue

        evaluated = candidate if candidate is not None else best
        evaluated_source = evaluated.to_source()
        counters.evaluated_sources.append(_source_digest(evaluated_source))

        bundles: dict[str, FeedbackBundle] = {}
        fault: str | None = None
        for task in campaign.ordered_tasks():
            counters.full_runs += 1
            try:
                _, bundle = run_on(task, evaluated)
            except Exception as exc:
                fault = f"run fault on task {task.id}: {exc}"
                break
            bundles[task.id] = bundle

        if fault is None:
            try:
                score = score_fn(bundles)
            except Exception as exc:  # e.g. MissingVerdict on a misconfigured score
                fault = f"score fault: {exc}"
        if fault is not None:
            score = 0.0
            diagnosis = _synthetic_diagnosis(evaluated, fault)
        else:
            diagnosis = _diagnose(backends.diagnoser, bundles, view, evaluated, trace_budget)

        improved = score > best_score
        if improved:
            best, best_score, best_iteration = evaluated, score, i

        archive.append(
            ArchiveEntry(
                harness=evaluated,
                feedback=bundles,
                diagnosis=diagnosis,
                score=score,
                iteration=i,
            )
        )
        history.append(
            IterationRecord(
                iteration=i,
                candidate_source=evaluated_source,
                check_report=check(evaluated, campaign.channels).to_text().strip(),
                accepted=candidate is not None,
                fallback=candidate is None,
                failed=fault is not None,
                proposals=proposals,
                rejections=rejections,
                score=score,
                improved=improved,
                best_score=best_score,
                digests={t: b.digest() for t, b in sorted(bundles.items())},
                diagnosis=diagnosis,
                families_vs_initial=sorted(diff_families(initial, evaluated)),
            )
        )

    return OptimizationResult(
        best=best,
        best_score=best_score,
        best_iteration=best_iteration,
        history=history,
        archive=archive,
        counters=counters,
    )


def _diagnose(
    diagnoser: DiagnoserBackend,
    bundles: dict[str, FeedbackBundle],
    view: list[ArchiveViewEntry],
    harness: Program,
    trace_budget: int,
) -> Diagnosis:
    compact = {}
    for task_id, bundle in bundles.items():
        traces = {}
        for node, text in bundle.traces.items():
            summarized = diagnoser.summarize_trace(node, text)
            traces[node] = (
                summarized if summarized is not None else truncate_trace(text, trace_budget)
            )
        compact[task_id] = replace(bundle, traces=traces)
    elements = set(harness.nodes)
    elements.update(
        f"{e.src}{'>>' if e.guard is None else '.on_' + e.guard + '>>'}{e.dst}"
        for e in harness.edges
    )
    try:
        d = diagnoser.diagnose(compact, view)
    except Exception as exc:
        return _synthetic_diagnosis(harness, f"diagnoser fault: {exc}")
    if not d.complete() or d.bottleneck not in elements:
        return _synthetic_diagnosis(harness, "diagnoser output rejected")
    return d
