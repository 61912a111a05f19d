"""Rule generation: retrieve regulation chunks for a scene, ask the text model
for two safe and two unsafe rules, and parse the reply strictly."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .errors import EmptyDescription, MissingHeader, RuleParseError, WrongRuleCount
from .inference import Backend, text_request
from .perception import SceneDescription
from .regstore import DEFAULT_K, Chunk, EmbeddingIndex, retrieve
from .report import make_label

DEFAULT_ROLE = "You are an expert safety engineer in construction sites."
SAFE_HEADER = "Rules for Safe Construction Situation:"
UNSAFE_HEADER = "Rules for Unsafe Construction Situation:"
NO_CONTEXT = "(no retrieved regulations)"

RULE_PROMPT_TEMPLATE = """{role}
Below is a description of a scene from a construction site.
Based on standard safety regulations, derive two rules for a
safe situation and two rules for an unsafe situation.
For each rule, start from an abstract principle,
then explain or generalize to concrete objects/activities.
Your rules must be objective, valid and based on regulations.
It should be easy to measure with clear quantified metrics
for effective decision making.

Your response should be formatted:

"Rules for Safe Construction Situation:"
1. ...
2. ...

"Rules for Unsafe Construction Situation:"
1. ...
2. ...



Scene description:
{description}

Safety Regulations:
{context}
"""

FORMAT_REMINDER = (
    "\n\nIMPORTANT: your previous answer could not be read. Reply with exactly two sections, "
    f'headed "{SAFE_HEADER}" and "{UNSAFE_HEADER}", each followed by exactly two numbered '
    "rules written as \"1. ...\" and \"2. ...\". Do not add anything else."
)

POLARITIES = ("safe", "unsafe")

_HEADER_RE = {
    "safe": re.compile(r"rules\s+for\s+safe\s+construction\s+situations?", re.IGNORECASE),
    "unsafe": re.compile(r"rules\s+for\s+unsafe\s+construction\s+situations?", re.IGNORECASE),
}
_ITEM_RE = re.compile(r"^\s*(?:[-*]\s+)?(?:\*\*)?(\d{1,3})[.)](?:\*\*)?(?:\s+(.*))?$")
_HEADER_TAIL = " \t\"'“”*:_#"
_ABBREVIATIONS = ("e.g", "i.e", "etc", "vs", "approx", "ft", "fig", "min", "max", "no")
_BOUNDARY_RE = re.compile(r"[.!?][\"”')\]]*\s+(?=\S)")


@dataclass(frozen=True)
class SafetyRule:
    polarity: str
    ordinal: int
    principle: str
    criterion: str
    item: str = field(default="", compare=False)

    def to_record(self) -> dict[str, Any]:
        return {
            "polarity": self.polarity,
            "ordinal": self.ordinal,
            "principle": self.principle,
            "criterion": self.criterion,
        }


@dataclass(frozen=True)
class RuleSet:
    frame_index: int
    rules: tuple[SafetyRule, ...]
    grounding: tuple[str, ...]
    provenance_label: str
    raw_text: str
    model_id: str = ""
    retries: int = 0
    request_key: str = ""

    @property
    def grounding_clauses(self) -> list[str]:
        seen = []
        for chunk_id in self.grounding:
            clause_id = chunk_id.rsplit("#", 1)[0]
            if clause_id not in seen:
                seen.append(clause_id)
        return seen

    def to_record(self) -> dict[str, Any]:
        return {
            "frame_index": self.frame_index,
            "provenance_label": self.provenance_label,
            "grounding": list(self.grounding),
            "rules": [r.to_record() for r in self.rules],
            "raw_text": self.raw_text,
            "model_id": self.model_id,
            "retries": self.retries,
            "request_key": self.request_key,
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "RuleSet":
        return cls(
            frame_index=rec["frame_index"],
            rules=tuple(
                SafetyRule(r["polarity"], r["ordinal"], r["principle"], r["criterion"]) for r in rec["rules"]
            ),
            grounding=tuple(rec["grounding"]),
            provenance_label=rec["provenance_label"],
            raw_text=rec["raw_text"],
            model_id=rec.get("model_id", ""),
            retries=rec.get("retries", 0),
            request_key=rec.get("request_key", ""),
        )


def format_context(chunks: Sequence[Chunk]) -> str:
    if not chunks:
        return NO_CONTEXT
    return "\n\n".join(f"[{c.clause_id}] {c.text}" for c in chunks)


def build_rule_prompt(description: str, context_chunks: Sequence[Chunk], role: str = DEFAULT_ROLE) -> str:
    if not description or not description.strip():
        raise EmptyDescription("scene description is empty")
    return RULE_PROMPT_TEMPLATE.format(role=role, description=description, context=format_context(context_chunks))


def split_principle(item: str) -> tuple[str, str]:
    """Split a rule at its first sentence boundary into (principle, criterion)."""
    for m in _BOUNDARY_RE.finditer(item):
        head = item[: m.start()]
        last_word = head.rsplit(None, 1)[-1].lower() if head.split() else ""
        if last_word.rstrip(".") in _ABBREVIATIONS or re.fullmatch(r"[a-z]", last_word):
            continue
        principle = item[: m.end()].rstrip()
        criterion = item[m.end() :].strip()
        if criterion:
            return principle, criterion
    return item, item


def _parse_items(section: str) -> list[str]:
    items: list[list[str]] = []
    open_item = False
    for line in section.splitlines():
        m = _ITEM_RE.match(line)
        if m:
            items.append([(m.group(2) or "").strip()])
            open_item = True
        elif not line.strip():
            open_item = False
        elif open_item:
            items[-1].append(line.strip())
    return [" ".join(part for part in parts if part).strip() for parts in items]


def parse_rule_response(text: str) -> list[SafetyRule]:
    """Parse a reply into ``[safe 1, safe 2, unsafe 1, unsafe 2]``.

    Raises :class:`MissingHeader` or :class:`WrongRuleCount`; never returns a
    partial list.
    """
    found = {}
    for polarity in POLARITIES:
        m = _HEADER_RE[polarity].search(text)
        if m is None:
            raise MissingHeader(polarity, raw_text=text)
        found[polarity] = m
    rules = []
    for polarity in POLARITIES:
        start = found[polarity].end()
        later = [m.start() for m in found.values() if m.start() > start]
        end = min(later) if later else len(text)
        section = text[start:end]
        # drop the remainder of the header line (closing quote, colon, markdown)
        first_nl = section.find("\n")
        head, rest = (section, "") if first_nl < 0 else (section[:first_nl], section[first_nl:])
        head = head.strip(_HEADER_TAIL)
        items = _parse_items(head + rest if head else rest)
        if len(items) != 2:
            raise WrongRuleCount(polarity, len(items), raw_text=text)
        for ordinal, item in enumerate(items, 1):
            if not item:
                raise RuleParseError(f"{polarity} rule {ordinal} is empty", raw_text=text)
            principle, criterion = split_principle(item)
            rules.append(SafetyRule(polarity, ordinal, principle, criterion, item))
    return rules


def render_rules(rules: Sequence[SafetyRule]) -> str:
    """Canonical text form; :func:`parse_rule_response` inverts it."""
    lines = []
    for polarity, header in (("safe", SAFE_HEADER), ("unsafe", UNSAFE_HEADER)):
        if lines:
            lines.append("")
        lines.append(header)
        for rule in sorted((r for r in rules if r.polarity == polarity), key=lambda r: r.ordinal):
            body = rule.principle if rule.criterion == rule.principle else f"{rule.principle} {rule.criterion}"
            lines.append(f"{rule.ordinal}. {body}")
    return "\n".join(lines)


def generate_rules(
    description: SceneDescription,
    index: EmbeddingIndex,
    backend: Backend,
    k: int = DEFAULT_K,
    *,
    embedder=None,
    model_id: str = "llama3.3",
    role: str = DEFAULT_ROLE,
    options: Mapping[str, Any] | None = None,
    retries: int = 1,
) -> RuleSet:
    """Retrieve ``k`` chunks for the description, prompt the rules model, parse.

    On a parse failure the prompt is re-sent once with a format reminder. The
    final :class:`RuleParseError` carries the last raw reply.
    """
    embedder = embedder or index.embedder()
    hits = retrieve(index, embedder.embed(description.text), k) if len(index) else []
    context = [h.chunk for h in hits]
    prompt = build_rule_prompt(description.text, context, role)
    attempt = 0
    while True:
        request = text_request(model_id, prompt if attempt == 0 else prompt + FORMAT_REMINDER, options)
        reply = backend.chat(request).text
        try:
            rules = parse_rule_response(reply)
        except RuleParseError as exc:
            if attempt >= retries:
                exc.raw_text = reply
                exc.attempts = attempt + 1
                raise
            attempt += 1
            continue
        return RuleSet(
            frame_index=description.frame_index,
            rules=tuple(rules),
            grounding=tuple(c.chunk_id for c in context),
            # A = the scene description this rule set was derived from
            provenance_label=make_label(description.frame_index, 2, ["A"]),
            raw_text=reply,
            model_id=model_id,
            retries=attempt,
            request_key=request.key,
        )
