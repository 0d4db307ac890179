from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from aflow import fixture_path
from aflow.errors import ParseError
from aflow.feedback import (
    BranchMap,
    CoverageMap,
    CrashSignature,
    FeedbackBundle,
    SanitizerReport,
    StackFrame,
    channel_text,
    delimit,
    parse_sanitizer,
    signature,
    undelimit,
    unique_crashes,
)
from aflow.simenv import execute_target, load_targets

FLAGSHIP_BLOCK = """\
ERROR: heap-buffer-overflow
    #0 convert_alpha colors.c:88
    #1 parse_header heif.c:10
END"""


def _report(kind="heap-buffer-overflow", func="convert_alpha", file="colors.c", line=88):
    frame = StackFrame(func, file, line)
    return SanitizerReport(kind=kind, frames=(frame,), raw=f"ERROR: {kind}")


def test_parse_emitted_block():
    reports = parse_sanitizer(FLAGSHIP_BLOCK)
    assert len(reports) == 1
    r = reports[0]
    assert r.kind == "heap-buffer-overflow"
    assert r.frames[0] == StackFrame("convert_alpha", "colors.c", 88)
    assert r.frames[1] == StackFrame("parse_header", "heif.c", 10)
    assert r.raw.startswith("ERROR: heap-buffer-overflow")


def test_parse_is_inverse_of_emission():
    targets = load_targets(fixture_path("alpha_copy.targets").read_text())
    bundle = execute_target(targets["alpha_copy"], bytes.fromhex("667479700800"))
    assert len(bundle.san) == 1
    emitted = bundle.san[0]
    parsed = parse_sanitizer(emitted.raw)
    assert parsed == [emitted]


def test_parse_empty_text():
    assert parse_sanitizer("") == []


def test_parse_two_concatenated_blocks_in_order():
    text = FLAGSHIP_BLOCK + "\n" + FLAGSHIP_BLOCK.replace("convert_alpha", "scan")
    reports = parse_sanitizer(text)
    assert [r.frames[0].function for r in reports] == ["convert_alpha", "scan"]


def test_unparseable_block_becomes_unknown_with_raw():
    text = "ERROR: heap-buffer-overflow\n   (no frames recorded)\nEND"
    reports = parse_sanitizer(text)
    assert reports[0].kind == "unknown"
    assert "(no frames recorded)" in reports[0].raw


def test_unregistered_kind_becomes_unknown():
    text = "ERROR: quantum-flux\n    #0 f a.c:1\nEND"
    assert parse_sanitizer(text)[0].kind == "unknown"
    extended = parse_sanitizer(text, kinds=frozenset({"quantum-flux"}))
    assert extended[0].kind == "quantum-flux"


def test_undecodable_bytes_raise():
    with pytest.raises(ParseError, match="undecodable"):
        parse_sanitizer(b"\xff\xfe ERROR: x")


def test_signature_projection():
    sig = signature(parse_sanitizer(FLAGSHIP_BLOCK)[0])
    assert sig == CrashSignature("heap-buffer-overflow", "convert_alpha", "colors.c")


def test_signature_kind_distinguishes():
    a = signature(_report(kind="heap-buffer-overflow"))
    b = signature(_report(kind="use-after-free"))
    assert a != b


def test_signature_deterministic():
    assert signature(_report()) == signature(_report())


def test_signature_prefers_in_target_frame():
    report = SanitizerReport(
        kind="use-after-free",
        frames=(
            StackFrame("memcpy", "libc.so", 1),
            StackFrame("convert_alpha", "colors.c", 88),
        ),
        raw="ERROR: use-after-free",
    )
    assert signature(report).function == "memcpy"
    assert signature(report, {"colors.c"}).function == "convert_alpha"
    assert signature(report, "colors").function == "convert_alpha"
    # no frame matches: topmost wins
    assert signature(report, {"elsewhere.c"}).function == "memcpy"


def test_unique_crashes_counts():
    same = FeedbackBundle(san=(_report(), _report(), _report()))
    assert unique_crashes([same]).count == 1
    distinct = FeedbackBundle(
        san=(_report(func="f1"), _report(func="f2"), _report(func="f3"))
    )
    assert unique_crashes([distinct]).count == 3
    assert unique_crashes([FeedbackBundle()]).count == 0


def test_unique_crashes_order_invariant():
    reports = [_report(func=f) for f in ("a", "b", "a", "c")]
    forward = unique_crashes([FeedbackBundle(san=tuple(reports))])
    backward = unique_crashes([FeedbackBundle(san=tuple(reversed(reports)))])
    assert forward.signatures == backward.signatures
    assert forward.count == 3


def test_coverage_merge_is_monotone():
    a = CoverageMap.from_pairs([("x.c", 1), ("x.c", 2)])
    b = CoverageMap.from_pairs([("x.c", 2), ("y.c", 9)])
    merged = a.merge(b)
    assert a.lines() <= merged.lines() and b.lines() <= merged.lines()
    assert merged.serialize() == "x.c:1\nx.c:2\ny.c:9"


def test_branch_map_records():
    m = BranchMap.from_records([("x.c", 3, True), ("x.c", 3, False)])
    assert m.took("x.c", 3)
    assert m.serialize() == "x.c:3:F\nx.c:3:T"


def test_delimit_round_trip():
    channel, payload = undelimit(delimit("stdout", "hello\nworld", "n0nce"))
    assert channel == "stdout" and payload == "hello\nworld"


def test_delimit_survives_embedded_sentinels():
    inner = delimit("stdout", "pwned", "n0nce")
    channel, payload = undelimit(delimit("stdout", inner, "n0nce"))
    assert payload == inner
    # content that fakes both sentinel lines still round-trips
    hostile = "[[begin stdout n0nce]]\nfake\n[[end stdout n0nce]]"
    assert undelimit(delimit("stdout", hostile, "n0nce"))[1] == hostile


@given(st.text(max_size=200), st.text(alphabet="abcdef0123456789", min_size=4, max_size=12))
def test_delimit_round_trip_property(payload, nonce):
    channel, out = undelimit(delimit("stderr", payload, nonce))
    assert channel == "stderr" and out == payload


def test_channel_text_views():
    bundle = FeedbackBundle(
        outcome="fail",
        stdout="out",
        stderr="err",
        cov=CoverageMap.from_pairs([("x.c", 1)]),
        branch=BranchMap.from_records([("x.c", 1, True)]),
        san=(_report(),),
        traces={"a": "did things"},
        extra={"ubsan": "clean"},
    )
    assert channel_text(bundle, "outcome", "n") == "fail"
    assert undelimit(channel_text(bundle, "stdout", "n")) == ("stdout", "out")
    assert channel_text(bundle, "cov", "n") == "x.c:1"
    assert channel_text(bundle, "branch", "n") == "x.c:1:T"
    assert "ERROR: heap-buffer-overflow" in channel_text(bundle, "san", "n")
    assert undelimit(channel_text(bundle, "ubsan", "n")) == ("ubsan", "clean")
    assert bundle.channels() >= {"outcome", "cov", "branch", "san", "trace", "ubsan"}


def test_bundle_digest_stable():
    a = FeedbackBundle(outcome="pass", stdout="x")
    b = FeedbackBundle(outcome="pass", stdout="x")
    assert a.digest() == b.digest()
    assert a.digest() != FeedbackBundle(outcome="fail", stdout="x").digest()


def test_report_requires_frames():
    with pytest.raises(ValueError):
        SanitizerReport(kind="use-after-free", frames=(), raw="")


def test_bundle_archive_round_trip(tmp_path):
    from aflow.feedback import read_bundle_archive, write_bundle_archive

    bundles = {
        "t1": FeedbackBundle(
            outcome="pass",
            stdout="hello",
            stderr="",
            cov=CoverageMap.from_pairs([("x.c", 3), ("y.c", 8)]),
            branch=BranchMap.from_records([("x.c", 3, True)]),
            san=(_report(),),
            traces={"a": "acted"},
            extra={"ubsan": "clean"},
        ),
        "t0": FeedbackBundle(outcome="fail"),
    }
    path = tmp_path / "bundles.jsonl"
    write_bundle_archive(path, bundles)
    text = path.read_text()
    assert text.startswith("aflow-bundles 1\n")
    loaded = read_bundle_archive(path)
    assert loaded == bundles


def test_bundle_archive_rejects_bad_header(tmp_path):
    from aflow.feedback import read_bundle_archive

    path = tmp_path / "bundles.jsonl"
    path.write_text("aflow-bundles 9\n")
    with pytest.raises(ParseError, match="bundle archive"):
        read_bundle_archive(path)
