"""aflow: a typed graph DSL for multi-agent harnesses, a well-formedness
checker with a dispatch-soundness guarantee, a feedback-routing graph
runtime, and a feedback-guided harness optimizer, all verifiable at desk
scale against a bundled simulated target environment."""

from importlib import resources
from pathlib import Path

from .checker import CheckReport, ScopeSets, Violation, check, reachability, scope_sets
from .errors import ParseError, TemplateError, UnboundVariable
from .feedback import (
    BranchMap,
    CoverageMap,
    CrashSignature,
    FeedbackBundle,
    SanitizerReport,
    StackFrame,
    parse_sanitizer,
    signature,
    unique_crashes,
)
from .optimizer import (
    ArchiveEntry,
    Backends,
    CampaignEnv,
    Diagnosis,
    EditFamilyMask,
    MissingVerdict,
    Rejection,
    archive_view,
    diff_families,
    harness_opt,
    score_pass_rate,
    score_unique_crashes,
    validate_candidate,
)
from .parser import parse_program
from .program import (
    AgentNode,
    Edge,
    FanoutNode,
    Program,
    TemplateString,
    free_vars,
    render_template,
)
from .runtime import (
    AgentBackend,
    AgentResult,
    RunLimits,
    RunRecord,
    TargetEnv,
    TaskContext,
    bind_channels,
    run,
)
from .simenv import SimEnv, SimTarget, SimTask, execute_target, grade, load_targets, load_tasks

__version__ = "0.1.0"


def fixture_path(name: str = "") -> Path:
    """Path to a bundled fixture (program, target, or task file)."""
    base = Path(str(resources.files("aflow") / "fixtures"))
    return base / name if name else base
