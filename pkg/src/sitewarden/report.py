"""Report generation and the provenance ledger.

Provenance labels look like ``B16-3ABC``: frame 16, stage 3 (assessment),
built from upstream artifacts A, B and C. Stages are 1 = scene description,
2 = rule generation, 3 = safety assessment, 4 = report entry. Letters are
given in the order upstream inputs are cited, and each ledger record keeps
the list those letters index into.

Reports come in two modes. ``deterministic`` fills the template from the
assessment timeline alone. ``model`` additionally asks a reasoning model for
the summary and recommendations narrative; findings and the appendix are
still generated from the timeline so every timestamp in them can be checked.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

from .errors import InvalidLabel, InvalidStage, TemplateInvalid, UnsortedTimeline

if TYPE_CHECKING:
    from .assess import Assessment

STAGES = {1: "scene description", 2: "rule generation", 3: "safety assessment", 4: "report entry"}
_LABEL_RE = re.compile(r"^B(\d+)-([1-4])([A-Z]*)$")
_PLACEHOLDER_RE = re.compile(r"\{\{\s*([a-z_]+)\s*\}\}")
_TIME_RE = re.compile(r"\b\d{2}:\d{2}:\d{3}\b")
SECTIONS = ("header", "summary", "findings", "recommendations", "appendix")
NO_FINDINGS = "No unsafe conditions observed."
NO_ASSESSMENTS = "(no assessments)"

DEFAULT_TEMPLATE = """# Construction Site Safety Inspection Report

{{header}}

## 1. Executive Summary

{{summary}}

## 2. Findings

{{findings}}

## 3. Recommendations

{{recommendations}}

## 4. Traceability Appendix

{{appendix}}
"""

REPORT_PROMPT_TEMPLATE = """You are a construction safety engineer preparing a formal site inspection report.
An inspection robot walked the site and each captured frame was assessed as Safe or Unsafe.
The frame-level assessments are listed below in time order.

Write two sections and nothing else:
Summary: one paragraph describing the overall safety status, the recurring hazards, and
how they develop over the observation period.
Recommendations: a numbered list of concrete corrective actions, most urgent first.

Only mention times that appear in the assessments.

Assessments:
{timeline}
"""


# provenance labels

def make_label(frame_index: int, stage: int, refs: Iterable[str] = ()) -> str:
    if stage not in STAGES:
        raise InvalidStage(f"stage must be 1..4, got {stage}")
    if frame_index < 0:
        raise InvalidLabel(f"frame index must be non-negative, got {frame_index}")
    letters = "".join(refs)
    if letters and not re.fullmatch(r"[A-Z]+", letters):
        raise InvalidLabel(f"refs must be letters A-Z, got {letters!r}")
    return f"B{frame_index}-{stage}{letters}"


def parse_label(label: str) -> tuple[int, int, list[str]]:
    m = _LABEL_RE.match(label)
    if not m:
        raise InvalidLabel(f"not a provenance label: {label!r}")
    return int(m.group(1)), int(m.group(2)), list(m.group(3))


def ref_letters(n: int) -> list[str]:
    if n > 26:
        raise InvalidLabel("at most 26 upstream references per artifact")
    return [chr(ord("A") + i) for i in range(n)]


# ledger

def content_sha256(record: Mapping[str, Any]) -> str:
    blob = json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LedgerRecord:
    provenance_label: str
    frame_index: int
    stage: int
    refs: list[str]
    content_sha256: str
    created_at: str
    artifact_file: str
    retries: int = 0

    def to_record(self) -> dict[str, Any]:
        return asdict(self)


class Ledger:
    """Append-only JSONL ledger. One writer at a time; each line is written whole."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._known = {(r.provenance_label, r.content_sha256) for r in self.records()}

    def records(self) -> list[LedgerRecord]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as fh:
            return [LedgerRecord(**json.loads(line)) for line in fh if line.strip()]

    def contains(self, label: str, sha: str) -> bool:
        return (label, sha) in self._known

    def append(
        self,
        label: str,
        refs: Sequence[str],
        content_sha: str,
        artifact_file: str,
        *,
        retries: int = 0,
        created_at: str | None = None,
    ) -> LedgerRecord | None:
        """Append a record unless the same label and content are already recorded."""
        frame_index, stage, letters = parse_label(label)
        if len(letters) != len(refs):
            raise InvalidLabel(f"{label} has {len(letters)} ref letters but {len(refs)} refs")
        with self._lock:
            if (label, content_sha) in self._known:
                return None
            record = LedgerRecord(
                provenance_label=label,
                frame_index=frame_index,
                stage=stage,
                refs=list(refs),
                content_sha256=content_sha,
                created_at=created_at or datetime.now(timezone.utc).isoformat(timespec="seconds"),
                artifact_file=artifact_file,
                retries=retries,
            )
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_record(), ensure_ascii=False) + "\n")
                fh.flush()
            self._known.add((label, content_sha))
            return record


# episodes and timeline

@dataclass(frozen=True)
class HazardEpisode:
    start_label: str
    end_label: str
    frame_indices: tuple[int, ...]
    representative_reason: str

    @property
    def count(self) -> int:
        return len(self.frame_indices)

    @property
    def span(self) -> str:
        if self.start_label == self.end_label:
            return self.start_label
        return f"{self.start_label} to {self.end_label}"


def _check_sorted(timeline: Sequence["Assessment"]) -> None:
    for a, b in zip(timeline, timeline[1:]):
        if b.frame_index <= a.frame_index:
            raise UnsortedTimeline(f"frame {b.frame_index} follows frame {a.frame_index}")


def coalesce_episodes(timeline: Sequence["Assessment"], gap_tolerance: int = 0) -> list[HazardEpisode]:
    """Group Unsafe frames into maximal runs whose index gaps are at most ``gap_tolerance + 1``."""
    if gap_tolerance < 0:
        raise ValueError("gap_tolerance must be non-negative")
    _check_sorted(timeline)
    runs: list[list] = []
    for a in timeline:
        if a.label != "Unsafe":
            continue
        if runs and a.frame_index - runs[-1][-1].frame_index <= gap_tolerance + 1:
            runs[-1].append(a)
        else:
            runs.append([a])
    episodes = []
    for run in runs:
        counts = Counter(a.reason for a in run)
        best = max(counts.values())
        reason = next(a.reason for a in run if counts[a.reason] == best)
        episodes.append(
            HazardEpisode(run[0].time_label, run[-1].time_label, tuple(a.frame_index for a in run), reason)
        )
    return episodes


def summarize_timeline(timeline: Sequence["Assessment"]) -> str:
    _check_sorted(timeline)
    if not timeline:
        return NO_ASSESSMENTS
    return "\n".join(f"At {a.time_label}: {a.label} — {a.reason}" for a in timeline)


# report

@dataclass(frozen=True)
class Finding:
    number: int
    episode: HazardEpisode
    clause_ids: tuple[str, ...]
    evidence: tuple[str, ...]

    def render(self) -> str:
        frames = (
            f"frame {self.episode.frame_indices[0]}"
            if self.episode.count == 1
            else f"frames {self.episode.frame_indices[0]}-{self.episode.frame_indices[-1]}, {self.episode.count} frames"
        )
        lines = [f"{self.number}. **{self.episode.span}** ({frames}): {self.episode.representative_reason}"]
        if self.clause_ids:
            lines.append(f"   - Regulations: {', '.join(self.clause_ids)}")
        lines.append(f"   - Evidence: {', '.join(self.evidence)}")
        return "\n".join(lines)


@dataclass
class SafetyReport:
    header: dict[str, Any]
    summary: str
    findings: list[Finding]
    recommendations: str
    appendix: list[str]
    failures: list[dict[str, Any]] = field(default_factory=list)
    narrative: str | None = None

    def findings_text(self) -> str:
        if not self.findings:
            return NO_FINDINGS
        return "\n".join(f.render() for f in self.findings)

    def header_text(self) -> str:
        lines = []
        for key, value in self.header.items():
            if isinstance(value, Mapping):
                value = ", ".join(f"{k}={v}" for k, v in value.items())
            lines.append(f"- **{key.replace('_', ' ').capitalize()}:** {value}")
        return "\n".join(lines)

    def render(self, template: str = DEFAULT_TEMPLATE) -> str:
        validate_template(template)
        sections = {
            "header": self.header_text(),
            "summary": self.summary,
            "findings": self.findings_text(),
            "recommendations": self.recommendations,
            "appendix": "\n".join(self.appendix) if self.appendix else "(empty)",
        }
        return _PLACEHOLDER_RE.sub(lambda m: sections[m.group(1)], template)

    def entry_labels(self) -> dict[int, str]:
        """Stage-4 label for every frame cited by a finding."""
        return {i: make_label(i, 4, ["A"]) for f in self.findings for i in f.episode.frame_indices}


def validate_template(template: str) -> None:
    names = _PLACEHOLDER_RE.findall(template)
    unknown = sorted(set(names) - set(SECTIONS))
    if unknown:
        raise TemplateInvalid(f"unknown placeholder(s): {', '.join(unknown)}")
    if "findings" not in names:
        raise TemplateInvalid("template must contain {{findings}}")


def load_template(path: str | os.PathLike | None) -> str:
    if path is None:
        return DEFAULT_TEMPLATE
    template = Path(path).read_text(encoding="utf-8")
    validate_template(template)
    return template


def _deterministic_summary(timeline: Sequence["Assessment"], episodes: Sequence[HazardEpisode]) -> str:
    if not timeline:
        return "No frames were assessed."
    unsafe = sum(1 for a in timeline if a.label == "Unsafe")
    text = (
        f"The inspection covered {len(timeline)} assessed frames between {timeline[0].time_label} "
        f"and {timeline[-1].time_label}. {unsafe} frames were assessed Unsafe and "
        f"{len(timeline) - unsafe} Safe."
    )
    if episodes:
        text += f" The Unsafe frames group into {len(episodes)} hazard episode(s), listed under Findings."
    return text


def _deterministic_recommendations(findings: Sequence[Finding]) -> str:
    if not findings:
        return "No corrective actions are required for the observed period."
    lines = []
    for f in findings:
        line = f"{f.number}. Correct the condition recorded at {f.episode.span}: {f.episode.representative_reason}"
        if f.clause_ids:
            line += f" Verify compliance with {', '.join(f.clause_ids)}."
        lines.append(line)
    return "\n".join(lines)


def _appendix(timeline: Sequence["Assessment"], entries: Mapping[int, str], failures) -> list[str]:
    lines = []
    for a in timeline:
        chain = f"{make_label(a.frame_index, 1, ['A'])} -> {a.rule_set_ref} -> {a.provenance_label}"
        if a.frame_index in entries:
            chain += f" -> {entries[a.frame_index]}"
        flag = ", severity/label mismatch" if getattr(a, "inconsistency_flag", False) else ""
        lines.append(f"- {a.time_label} frame {a.frame_index}: {chain} ({a.label}{flag})")
    if failures:
        lines.append("")
        lines.append("Frames that failed and were excluded:")
        for f in failures:
            lines.append(f"- frame {f['frame_index']} stage {f['stage']}: {f['error_type']}: {f['message']}")
    return lines


_THINK_RE = re.compile(r"<think>.*?</think>", re.DOTALL | re.IGNORECASE)
_RECOMMENDATIONS_RE = re.compile(r"^[\s#*]*recommendations?[\s*]*:?[\s*]*$|^[\s#*]*recommendations?[\s*]*:", re.IGNORECASE | re.MULTILINE)
_SUMMARY_HEAD_RE = re.compile(r"^[\s#*]*(?:executive\s+)?summary[\s*]*:?[\s*]*", re.IGNORECASE)


def split_narrative(reply: str) -> tuple[str, str | None]:
    """Split a model reply into (summary, recommendations or None)."""
    text = _THINK_RE.sub("", reply).strip()
    m = _RECOMMENDATIONS_RE.search(text)
    if m is None:
        return _SUMMARY_HEAD_RE.sub("", text, count=1).strip(), None
    summary = _SUMMARY_HEAD_RE.sub("", text[: m.start()], count=1).strip()
    return summary, text[m.end() :].strip() or None


def generate_report(
    timeline: Sequence["Assessment"],
    template: str = DEFAULT_TEMPLATE,
    mode: str = "deterministic",
    backend=None,
    *,
    grounding: Mapping[int, Sequence[str]] | None = None,
    header: Mapping[str, Any] | None = None,
    gap_tolerance: int = 0,
    failures: Sequence[Mapping[str, Any]] = (),
    model_id: str = "deepseek-r1",
    options: Mapping[str, Any] | None = None,
) -> SafetyReport:
    """Build a report from a frame-ordered assessment timeline.

    ``grounding`` maps frame index to the clause ids its rule set was grounded
    in; findings cite the union over the episode's frames.
    """
    validate_template(template)
    if mode not in ("deterministic", "model"):
        raise ValueError(f"unknown report mode {mode!r}")
    _check_sorted(timeline)
    grounding = grounding or {}
    episodes = coalesce_episodes(timeline, gap_tolerance)
    by_index = {a.frame_index: a for a in timeline}
    findings = []
    for n, ep in enumerate(episodes, 1):
        clauses: list[str] = []
        for i in ep.frame_indices:
            for cid in grounding.get(i, ()):
                if cid not in clauses:
                    clauses.append(cid)
        findings.append(Finding(n, ep, tuple(clauses), tuple(by_index[i].provenance_label for i in ep.frame_indices)))

    summary = _deterministic_summary(timeline, episodes)
    recommendations = _deterministic_recommendations(findings)
    narrative = None
    if mode == "model":
        if backend is None:
            raise ValueError("model report mode needs a backend")
        from .inference import text_request

        prompt = REPORT_PROMPT_TEMPLATE.format(timeline=summarize_timeline(timeline))
        narrative = backend.chat(text_request(model_id, prompt, options)).text
        model_summary, model_recs = split_narrative(narrative)
        summary = model_summary or summary
        if model_recs:
            recommendations = model_recs

    report = SafetyReport(
        header=dict(header or {}),
        summary=summary,
        findings=findings,
        recommendations=recommendations,
        appendix=[],
        failures=[dict(f) for f in failures],
        narrative=narrative,
    )
    report.appendix = _appendix(timeline, report.entry_labels(), report.failures)
    return report


def finding_timestamps(report: SafetyReport) -> set[str]:
    return set(_TIME_RE.findall(report.findings_text()))


def check_report(report: SafetyReport, timeline: Sequence["Assessment"], known_clauses: Iterable[str] | None = None) -> list[str]:
    """Problems with a report's factual claims; empty when every claim checks out."""
    problems = []
    labels = {a.time_label for a in timeline}
    for ts in sorted(finding_timestamps(report) - labels):
        problems.append(f"finding cites {ts}, which is not in the timeline")
    if known_clauses is not None:
        known = set(known_clauses)
        for f in report.findings:
            for cid in f.clause_ids:
                if cid not in known:
                    problems.append(f"finding {f.number} cites unknown clause {cid}")
    return problems
