"""Safety assessment: show the frame and its rule set to the vision model and
read back a strict ``Situation`` / ``Reason for decision`` verdict."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from typing import Any, Mapping

from .errors import VerdictParseError
from .inference import Backend, image_request
from .ingest import Frame
from .report import make_label
from .rulegen import RuleSet, render_rules

SAFE, UNSAFE = "Safe", "Unsafe"
LABELS = (SAFE, UNSAFE)
UNSAFE_THRESHOLD = 4

ASSESSMENT_PROMPT_TEMPLATE = """1. Examine the image and identify any potential safety hazards based on the defined rules.
2. Rate the severity of the hazard on a scale of 1 to 5:
    - 1 = No real hazard or extremely minor risk
    - 2 = Mild risk that does not violate serious safety regulations
    - 3 = Moderate risk that may need attention but is not a major legal breach
    - 4 = Serious hazard posing high risk of harm or a clear legal breach
    - 5 = Extremely serious, life-threatening hazard or glaring violation of the law/regulations

3. If the rating is 4 and 5, label it Unsafe; otherwise, if label is 1-4 it's Safe.


Output Format
Your response must be in this format exactly:
Situation: [Safe or Unsafe]
Reason for decision: [One sentence]

Rules:
{rules_text}
"""

FORMAT_REMINDER = (
    "\n\nIMPORTANT: your previous answer could not be read. Answer with exactly two lines:\n"
    "Situation: Safe or Unsafe\n"
    "Reason for decision: one sentence"
)

_SITUATION_RE = re.compile(r"^[\s*#_]*situation[\s*_]*:(.*)$", re.IGNORECASE | re.MULTILINE)
_REASON_RE = re.compile(r"^[\s*#_]*reason\s+for\s+decision[\s*_]*:(.*)$", re.IGNORECASE | re.MULTILINE)
_SEVERITY_RE = re.compile(
    r"^[\s*#_]*(?:severity|hazard\s+rating|rating)(?:\s+rating)?[\s*_]*[:=][\s*_]*\(?([1-5])\b",
    re.IGNORECASE | re.MULTILINE,
)
_PAREN_DIGIT_RE = re.compile(r"\(\s*([1-5])\s*(?:/\s*5\s*)?\)")


def severity_to_label(severity: int) -> str:
    """Ratings 4 and 5 are Unsafe, 1 to 3 Safe."""
    if not 1 <= int(severity) <= 5:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    return UNSAFE if severity >= UNSAFE_THRESHOLD else SAFE


@dataclass(frozen=True)
class Assessment:
    frame_index: int
    time_label: str
    label: str
    reason: str
    severity: int | None
    rule_set_ref: str
    provenance_label: str
    raw_text: str
    inconsistency_flag: bool = False
    model_id: str = ""
    retries: int = 0
    request_key: str = ""

    def to_record(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "Assessment":
        return cls(**{k: rec[k] for k in cls.__dataclass_fields__ if k in rec})


def build_assessment_prompt(rules: RuleSet) -> str:
    return ASSESSMENT_PROMPT_TEMPLATE.format(rules_text=render_rules(rules.rules))


def _clean_value(value: str) -> str:
    return value.strip(" \t*_[]`'\"").rstrip(".").strip(" \t*_[]`'\"")


def parse_assessment(text: str) -> tuple[str, str, int | None]:
    """Return ``(label, reason, severity or None)`` from a verdict reply."""
    situation = _SITUATION_RE.search(text)
    if situation is None:
        raise VerdictParseError("missing-line", "no 'Situation:' line", text)
    reason = _REASON_RE.search(text)
    if reason is None or not reason.group(1).strip():
        raise VerdictParseError("missing-line", "no 'Reason for decision:' line", text)
    situation_line = situation.group(1)
    # a volunteered "(4)" or "(4/5)" next to the label
    paren = _PAREN_DIGIT_RE.search(situation_line)
    value = _clean_value(_PAREN_DIGIT_RE.sub("", situation_line))
    label = {"safe": SAFE, "unsafe": UNSAFE}.get(value.lower())
    if label is None:
        raise VerdictParseError("bad-label", f"situation {value!r} is not Safe or Unsafe", text)
    severity = None
    m = _SEVERITY_RE.search(text)
    if m:
        severity = int(m.group(1))
    elif paren:
        severity = int(paren.group(1))
    return label, reason.group(1).strip(), severity


def assess_frame(
    frame: Frame,
    rules: RuleSet,
    backend: Backend,
    *,
    model_id: str = "gemma3:12b",
    options: Mapping[str, Any] | None = None,
    retries: int = 1,
) -> Assessment:
    """Ask the vision model to judge ``frame`` against ``rules``.

    The model's Safe/Unsafe word is stored as the label. A volunteered severity
    that disagrees with the label sets ``inconsistency_flag``; it never
    overrides the label.
    """
    if rules.frame_index != frame.index:
        raise ValueError(f"rule set for frame {rules.frame_index} used on frame {frame.index}")
    prompt = build_assessment_prompt(rules)
    attempt = 0
    while True:
        request = image_request(
            model_id, prompt if attempt == 0 else prompt + FORMAT_REMINDER, frame.image_ref, options
        )
        reply = backend.chat(request).text
        try:
            label, reason, severity = parse_assessment(reply)
        except VerdictParseError as exc:
            if attempt >= retries:
                exc.attempts = attempt + 1
                raise
            attempt += 1
            continue
        return Assessment(
            frame_index=frame.index,
            time_label=frame.time_label,
            label=label,
            reason=reason,
            severity=severity,
            rule_set_ref=rules.provenance_label,
            # A = the frame image, B = the rule set
            provenance_label=make_label(frame.index, 3, ["A", "B"]),
            raw_text=reply,
            inconsistency_flag=severity is not None and severity_to_label(severity) != label,
            model_id=model_id,
            retries=attempt,
            request_key=request.key,
        )
