import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import VALID_RULES
from sitewarden.assess import (
    Assessment,
    assess_frame,
    build_assessment_prompt,
    parse_assessment,
    severity_to_label,
)
from sitewarden.errors import ImageNotFound, VerdictParseError
from sitewarden.inference import ScriptedBackend
from sitewarden.ingest import Frame
from sitewarden.rulegen import RuleSet, parse_rule_response

SCALE = [
    "1 = No real hazard or extremely minor risk",
    "2 = Mild risk that does not violate serious safety regulations",
    "3 = Moderate risk that may need attention but is not a major legal breach",
    "4 = Serious hazard posing high risk of harm or a clear legal breach",
    "5 = Extremely serious, life-threatening hazard or glaring violation of the law/regulations",
]


@pytest.fixture
def rules():
    return RuleSet(16, tuple(parse_rule_response(VALID_RULES)), ("1926.1053#0",), "B16-2A", VALID_RULES)


@pytest.fixture
def frame(tmp_path):
    path = tmp_path / "Frame16-00:16:000.jpg"
    path.write_bytes(b"jpeg")
    return Frame(16, 16000, path, "s")


def test_severity_table_and_monotonicity():
    assert {s: severity_to_label(s) for s in range(1, 6)} == {
        1: "Safe", 2: "Safe", 3: "Safe", 4: "Unsafe", 5: "Unsafe"
    }
    for a in range(1, 6):
        for b in range(a, 6):
            if severity_to_label(a) == "Unsafe":
                assert severity_to_label(b) == "Unsafe"
    with pytest.raises(ValueError):
        severity_to_label(6)


def test_prompt_content(rules):
    prompt = build_assessment_prompt(rules)
    assert "Situation: [Safe or Unsafe]" in prompt
    assert "Reason for decision: [One sentence]" in prompt
    for line in SCALE:
        assert line in prompt
    tail = prompt.split("Rules:", 1)[1]
    for r in rules.rules:
        assert r.principle in tail and r.criterion in tail


def test_parse_examples():
    assert parse_assessment("Situation: Unsafe\nReason for decision: Cord runs through standing water.") == (
        "Unsafe", "Cord runs through standing water.", None
    )
    with pytest.raises(VerdictParseError) as err:
        parse_assessment("Situation: Hazardous\nReason for decision: x.")
    assert err.value.kind == "bad-label"
    with pytest.raises(VerdictParseError) as err:
        parse_assessment("Situation: Safe")
    assert err.value.kind == "missing-line"
    assert err.value.raw_text == "Situation: Safe"


def test_parse_normalizes_case_and_markup():
    label, reason, sev = parse_assessment("**situation:** [UNSAFE] (5)\n  reason for decision:   Ladder on forklift.  ")
    assert (label, reason, sev) == ("Unsafe", "Ladder on forklift.", 5)
    assert parse_assessment("Situation: Safe.\nReason for decision: ok\nSeverity: 2")[2] == 2


def test_assess_frame_unsafe(frame, rules):
    reply = "Situation: Unsafe\nReason for decision: The worker on the ladder is not wearing a hard hat."
    a = assess_frame(frame, rules, ScriptedBackend.always(reply))
    assert (a.label, a.reason) == ("Unsafe", "The worker on the ladder is not wearing a hard hat.")
    assert a.provenance_label == "B16-3AB"
    assert a.rule_set_ref == "B16-2A"
    assert a.time_label == "00:16:000"
    assert not a.inconsistency_flag
    assert Assessment.from_record(a.to_record()) == a


def test_assess_frame_safe_and_inconsistent(frame, rules):
    a = assess_frame(frame, rules, ScriptedBackend.always("Situation: Safe\nReason for decision: Walkway is clear."))
    assert a.label == "Safe" and a.severity is None
    b = assess_frame(frame, rules, ScriptedBackend.always("Situation: Safe\nReason for decision: Cord in water.\nSeverity: 4"))
    # the model's word wins, the disagreement is flagged
    assert b.label == "Safe" and b.severity == 4 and b.inconsistency_flag


def test_assess_frame_retry_and_failure(frame, rules):
    backend = ScriptedBackend([(None, ["The scene looks fine.", "Situation: Safe\nReason for decision: Fine."])])
    assert assess_frame(frame, rules, backend).retries == 1
    with pytest.raises(VerdictParseError) as err:
        assess_frame(frame, rules, ScriptedBackend.always("The scene looks fine."))
    assert err.value.raw_text == "The scene looks fine."
    frame.image_ref.unlink()
    with pytest.raises(ImageNotFound):
        assess_frame(frame, rules, ScriptedBackend.always("x"))


def test_rules_must_match_frame(frame, rules):
    other = RuleSet(3, rules.rules, (), "B3-2A", "")
    with pytest.raises(ValueError):
        assess_frame(frame, other, ScriptedBackend.always("x"))


reason_text = st.text(alphabet="abcdefghijklmnopqrstuvwxyz ,", min_size=1, max_size=60).map(
    lambda s: (s.strip() or "x").capitalize() + "."
)


@settings(max_examples=500, deadline=None)
@given(
    st.sampled_from(["Safe", "Unsafe"]),
    reason_text,
    st.one_of(st.none(), st.integers(1, 5)),
    st.sampled_from(["plain", "upper", "bracket", "paren"]),
)
def test_verdict_round_trip(label, reason, severity, style):
    shown = {"plain": label, "upper": label.upper(), "bracket": f"[{label}]", "paren": label}[style]
    if style == "paren" and severity is not None:
        text = f"Situation: {shown} ({severity})\nReason for decision: {reason}"
    else:
        text = f"Situation: {shown}\nReason for decision: {reason}"
        if severity is not None:
            text += f"\nSeverity: {severity}"
    assert parse_assessment(text) == (label, reason, severity)


def test_verdict_parser_fuzz():
    rng = random.Random(99)
    base = "Situation: Unsafe\nReason for decision: Cord in water.\nSeverity: 5"
    for n in range(10_000):
        if n % 2:
            text = bytes(rng.randrange(256) for _ in range(rng.randrange(120))).decode("utf-8", "replace")
        else:
            chars = list(base)
            for _ in range(rng.randint(1, 6)):
                pos = rng.randrange(len(chars) + 1)
                if rng.random() < 0.5 and chars:
                    del chars[min(pos, len(chars) - 1)]
                else:
                    chars.insert(pos, rng.choice("SsUu:\n()12345 afeReason"))
            text = "".join(chars)
        try:
            label, reason, severity = parse_assessment(text)
        except VerdictParseError as exc:
            assert exc.kind in ("missing-line", "bad-label")
            continue
        assert label in ("Safe", "Unsafe")
        assert reason.strip()
        assert severity is None or 1 <= severity <= 5
