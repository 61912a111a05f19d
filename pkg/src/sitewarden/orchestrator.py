"""Run manager: wires ingest, description, rule generation, assessment and the
report into one resumable run.

A run lives in ``<output_dir>/<run_id>/``::

    config.json  frames/  descriptions.jsonl  rules.jsonl  assessments.jsonl
    report.md  ledger.jsonl  errors.jsonl  run.json

Every stage record carries a ``cache_key`` computed from its inputs (frame
bytes, prompt, model, options and the hashes of upstream records). On a
rerun, records whose key is unchanged are reused instead of calling a model,
so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

from . import assess, perception, rulegen
from .errors import ConfigError, SitewardenError
from .inference import DEFAULT_OPTIONS, LiveBackend, RecordingBackend, ReplayBackend
from .ingest import Frame, copy_frames, extract_frames, ingest_directory
from .regstore import (
    DEFAULT_K,
    DEFAULT_MAX_CHARS,
    DEFAULT_OVERLAP,
    EmbeddingIndex,
    RemoteEmbedder,
    build_index,
    chunk_clauses,
    load_corpus,
)
from .report import (
    Ledger,
    content_sha256,
    generate_report,
    load_template,
    make_label,
    parse_label,
)

logger = logging.getLogger(__name__)

DESCRIPTIONS = "descriptions.jsonl"
RULES = "rules.jsonl"
ASSESSMENTS = "assessments.jsonl"
REPORT = "report.md"
LEDGER = "ledger.jsonl"
ERRORS = "errors.jsonl"
CONFIG = "config.json"
RUN_INFO = "run.json"
STAGE_FILES = {1: DESCRIPTIONS, 2: RULES, 3: ASSESSMENTS}

DEFAULT_MODELS = {"describe": "gemma3:12b", "rules": "llama3.3", "report": "deepseek-r1"}
BUNDLED_CORPUS = Path(__file__).parent / "fixtures" / "corpus.jsonl"
_PATH_FIELDS = ("source", "corpus", "index", "cassette", "report_template")
# fields that change where or how fast a run executes, not what it produces
_NON_SEMANTIC = ("output_dir", "run_id", "max_in_flight", "base_url")


@dataclass
class RunConfig:
    source: str
    output_dir: str = "runs"
    run_id: str | None = None
    rate_hz: Any = 1
    time_separator: str = ":"
    corpus: str | None = None
    index: str | None = None
    embedder: str = "lexical"
    embed_model: str = "nomic-embed-text"
    max_chars: int = DEFAULT_MAX_CHARS
    overlap: int = DEFAULT_OVERLAP
    k: int = DEFAULT_K
    models: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_MODELS))
    backend: str = "live"
    base_url: str | None = None
    cassette: str | None = None
    options: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_OPTIONS))
    description_template: str = perception.DEFAULT_DESCRIPTION_TEMPLATE
    rule_role: str = rulegen.DEFAULT_ROLE
    report_template: str | None = None
    report_mode: str = "deterministic"
    gap_tolerance: int = 0
    retries: int = 1
    max_in_flight: int = 2

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: str | os.PathLike | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown config field(s): {', '.join(unknown)}"])
        values = dict(data)
        if base_dir is not None:
            for name in _PATH_FIELDS:
                if values.get(name) and not os.path.isabs(values[name]):
                    values[name] = os.path.normpath(os.path.join(base_dir, values[name]))
        if "models" in values:
            values["models"] = {**DEFAULT_MODELS, **values["models"]}
        return cls(**values)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        if isinstance(self.rate_hz, Fraction):
            data["rate_hz"] = str(self.rate_hz)
        return data

    def digest(self) -> str:
        semantic = {k: v for k, v in self.to_dict().items() if k not in _NON_SEMANTIC}
        return _sha(semantic)

    def resolved_run_id(self) -> str:
        return self.run_id or f"run-{self.digest()[:12]}"

    def corpus_path(self) -> Path:
        return Path(self.corpus) if self.corpus else BUNDLED_CORPUS


def _sha(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def validate(config: RunConfig) -> list[str]:
    """Every problem with ``config``; an empty list means it is runnable."""
    problems = []
    if not config.source or not Path(config.source).exists():
        problems.append(f"source {config.source!r} does not exist")
    try:
        if Fraction(str(config.rate_hz)) <= 0:
            problems.append("rate_hz must be > 0")
    except (ValueError, ZeroDivisionError):
        problems.append(f"rate_hz {config.rate_hz!r} is not a number")
    if config.time_separator not in (":", "_"):
        problems.append("time_separator must be ':' or '_'")
    if config.index:
        if not Path(config.index).is_file():
            problems.append(f"index file {config.index!r} does not exist")
    elif not config.corpus_path().is_file():
        problems.append(f"corpus {str(config.corpus_path())!r} does not exist")
    if config.embedder not in ("lexical", "remote"):
        problems.append("embedder must be 'lexical' or 'remote'")
    if not isinstance(config.k, int) or config.k < 1:
        problems.append("k must be ≥ 1")
    if config.max_chars < 1:
        problems.append("max_chars must be ≥ 1")
    if not 0 <= config.overlap < config.max_chars:
        problems.append("overlap must satisfy 0 ≤ overlap < max_chars")
    if config.backend not in ("live", "replay", "record"):
        problems.append("backend must be one of live, replay, record")
    if config.backend in ("replay", "record") and not config.cassette:
        problems.append(f"{config.backend} mode needs a cassette path")
    if config.backend == "replay" and config.cassette and not Path(config.cassette).is_file():
        problems.append(f"cassette {config.cassette!r} does not exist")
    if config.backend == "replay" and config.embedder == "remote":
        problems.append("the remote embedder needs a live server and cannot be used in replay mode")
    for role in ("describe", "rules"):
        if not config.models.get(role):
            problems.append(f"model role {role!r} is not set")
    if config.report_mode not in ("deterministic", "model"):
        problems.append("report_mode must be 'deterministic' or 'model'")
    if config.report_mode == "model" and not config.models.get("report"):
        problems.append("model report mode needs the 'report' model role")
    if config.report_template and not Path(config.report_template).is_file():
        problems.append(f"report template {config.report_template!r} does not exist")
    if not config.description_template or not config.description_template.strip():
        problems.append("description_template is empty")
    if config.gap_tolerance < 0:
        problems.append("gap_tolerance must be ≥ 0")
    if config.max_in_flight < 1:
        problems.append("max_in_flight must be ≥ 1")
    if config.retries < 0:
        problems.append("retries must be ≥ 0")
    return problems


@dataclass
class RunArtifacts:
    run_id: str
    run_dir: Path
    frames: list[Frame]
    descriptions: list[perception.SceneDescription]
    rule_sets: list[rulegen.RuleSet]
    assessments: list[assess.Assessment]
    report_path: Path | None
    ledger_path: Path
    errors: list[dict[str, Any]]
    stats: dict[str, dict[str, int]]

    def path(self, name: str) -> Path:
        return self.run_dir / name


def make_backend(config: RunConfig):
    if config.backend == "replay":
        return ReplayBackend(config.cassette)
    live = LiveBackend(config.base_url, max_in_flight=config.max_in_flight)
    if config.backend == "record":
        return RecordingBackend(live, config.cassette)
    return live


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_jsonl_atomic(path: Path, records: list[dict]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _file_sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _record_sha(record: Mapping[str, Any]) -> str:
    return content_sha256({k: v for k, v in record.items() if k != "cache_key"})


class _StageStore:
    """One stage's JSONL file: cached records by key, appended as produced."""

    def __init__(self, path: Path):
        self.path = path
        self.cache = {rec["cache_key"]: rec for rec in _read_jsonl(path) if "cache_key" in rec}
        self.used: dict[int, dict] = {}
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def lookup(self, key: str) -> dict | None:
        with self._lock:
            rec = self.cache.get(key)
            if rec is not None:
                self.hits += 1
            return rec

    def persist(self, record: dict) -> None:
        with self._lock:
            self.misses += 1
            self.cache[record["cache_key"]] = record
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
                fh.flush()

    def mark_used(self, record: dict) -> None:
        with self._lock:
            self.used[record["frame_index"]] = record

    def finalize(self) -> list[dict]:
        records = [self.used[i] for i in sorted(self.used)]
        _write_jsonl_atomic(self.path, records)
        return records


class _OrderedLedger:
    """Buffers ledger appends so records land in (frame_index, stage) order."""

    def __init__(self, ledger: Ledger, frame_order: list[int]):
        self.ledger = ledger
        self.order = frame_order
        self.pos = 0
        self.pending: dict[int, list[tuple]] = {}
        self.done: set[int] = set()
        self._lock = threading.Lock()

    def frame_done(self, frame_index: int, entries: list[tuple]) -> None:
        with self._lock:
            self.pending[frame_index] = entries
            self.done.add(frame_index)
            while self.pos < len(self.order) and self.order[self.pos] in self.done:
                for label, refs, sha, artifact, retries in self.pending.pop(self.order[self.pos]):
                    self.ledger.append(label, refs, sha, artifact, retries=retries)
                self.pos += 1


def _load_frames(config: RunConfig, run_dir: Path) -> list[Frame]:
    frames_dir = run_dir / "frames"
    source = Path(config.source)
    if source.is_dir():
        return copy_frames(ingest_directory(source), frames_dir, config.time_separator)
    return extract_frames(source, Fraction(str(config.rate_hz)), frames_dir, time_sep=config.time_separator)


def _load_index(config: RunConfig) -> tuple[EmbeddingIndex, Any]:
    if config.index:
        index = EmbeddingIndex.load(config.index)
    else:
        chunks = chunk_clauses(load_corpus(config.corpus_path()), config.max_chars, config.overlap)
        embedder = None
        if config.embedder == "remote":
            embedder = RemoteEmbedder(LiveBackend(config.base_url), config.embed_model)
        index = build_index(chunks, embedder)
    if config.embedder == "remote":
        return index, RemoteEmbedder(LiveBackend(config.base_url), config.embed_model, index.dimension)
    return index, index.embedder()


def _index_fingerprint(index: EmbeddingIndex) -> str:
    return _sha({"embedder": index.embedder_id, "params": index.params, "chunks": [asdict(c) for c in index.chunks]})


def run(config: RunConfig, backend=None) -> RunArtifacts:
    """Execute all stages for every frame, then write the report.

    A frame that fails at any stage is recorded in ``errors.jsonl`` and left out
    of the report; the remaining frames still run.
    """
    problems = validate(config)
    if problems:
        raise ConfigError(problems)
    run_id = config.resolved_run_id()
    run_dir = Path(config.output_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    frames = _load_frames(config, run_dir)
    index, embedder = _load_index(config)
    index_fp = _index_fingerprint(index)
    backend = backend if backend is not None else make_backend(config)

    stores = {stage: _StageStore(run_dir / name) for stage, name in STAGE_FILES.items()}
    ledger = Ledger(run_dir / LEDGER)
    ordered = _OrderedLedger(ledger, [f.index for f in frames])
    models = config.models
    options = dict(config.options)
    rule_prompt_fp = _sha([rulegen.RULE_PROMPT_TEMPLATE, config.rule_role, rulegen.FORMAT_REMINDER])
    assess_prompt_fp = _sha([assess.ASSESSMENT_PROMPT_TEMPLATE, assess.FORMAT_REMINDER])
    errors: list[dict[str, Any]] = []
    errors_lock = threading.Lock()

    def process(frame: Frame) -> None:
        entries = []
        stage = 1
        try:
            frame_sha = _file_sha(frame.image_ref)
            frame_ref = f"frame:{frame.image_ref.name}"

            key1 = _sha(["describe", frame_sha, frame.index, frame.time_label,
                         config.description_template, models["describe"], options])
            rec1 = stores[1].lookup(key1)
            if rec1 is None:
                desc = perception.describe_scene(
                    frame, backend, config.description_template, models["describe"], options
                )
                rec1 = {**desc.to_record(), "cache_key": key1}
                stores[1].persist(rec1)
            stores[1].mark_used(rec1)
            desc = perception.SceneDescription.from_record(rec1)
            sha1 = _record_sha(rec1)
            entries.append((desc.provenance_label, [frame_ref], sha1, DESCRIPTIONS, 0))

            stage = 2
            key2 = _sha(["rules", sha1, index_fp, config.k, rule_prompt_fp, models["rules"], options, config.retries])
            rec2 = stores[2].lookup(key2)
            if rec2 is None:
                rules = rulegen.generate_rules(
                    desc, index, backend, config.k, embedder=embedder, model_id=models["rules"],
                    role=config.rule_role, options=options, retries=config.retries,
                )
                rec2 = {**rules.to_record(), "cache_key": key2}
                stores[2].persist(rec2)
            stores[2].mark_used(rec2)
            rules = rulegen.RuleSet.from_record(rec2)
            sha2 = _record_sha(rec2)
            entries.append((rules.provenance_label, [desc.provenance_label], sha2, RULES, rules.retries))

            stage = 3
            key3 = _sha(["assess", frame_sha, sha2, assess_prompt_fp, models["describe"], options, config.retries])
            rec3 = stores[3].lookup(key3)
            if rec3 is None:
                verdict = assess.assess_frame(
                    frame, rules, backend, model_id=models["describe"], options=options, retries=config.retries
                )
                rec3 = {**verdict.to_record(), "cache_key": key3}
                stores[3].persist(rec3)
            stores[3].mark_used(rec3)
            verdict = assess.Assessment.from_record(rec3)
            entries.append(
                (verdict.provenance_label, [frame_ref, rules.provenance_label], _record_sha(rec3), ASSESSMENTS,
                 verdict.retries)
            )
        except Exception as exc:  # one bad frame must not abort the run
            if not isinstance(exc, (SitewardenError, OSError, ValueError)):
                logger.exception("unexpected failure on frame %s", frame.index)
            err = {
                "frame_index": frame.index,
                "time_label": frame.time_label,
                "stage": stage,
                "error_type": type(exc).__name__,
                "message": str(exc),
            }
            raw = getattr(exc, "raw_text", None)
            if raw is not None:
                err["raw_text"] = raw
            with errors_lock:
                errors.append(err)
        finally:
            ordered.frame_done(frame.index, entries)

    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        list(pool.map(process, frames))

    descriptions = [perception.SceneDescription.from_record(r) for r in stores[1].finalize()]
    rule_sets = [rulegen.RuleSet.from_record(r) for r in stores[2].finalize()]
    assessments = [assess.Assessment.from_record(r) for r in stores[3].finalize()]
    errors.sort(key=lambda e: e["frame_index"])
    _write_jsonl_atomic(run_dir / ERRORS, errors)

    recomputed = any(s.misses for s in stores.values())
    report_hit = render_report(run_dir, config=config, backend=backend, ledger=ledger, force=recomputed)
    stats = {name: {"hits": s.hits, "misses": s.misses} for name, s in
             (("describe", stores[1]), ("rules", stores[2]), ("assess", stores[3]))}
    stats["report"] = {"hits": int(report_hit), "misses": int(not report_hit)}
    info = _read_run_info(run_dir)
    info.update({"run_id": run_id, "frames": len(frames), "failed_frames": len(errors), "stats": stats})
    (run_dir / RUN_INFO).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    return RunArtifacts(
        run_id=run_id,
        run_dir=run_dir,
        frames=frames,
        descriptions=descriptions,
        rule_sets=rule_sets,
        assessments=assessments,
        report_path=run_dir / REPORT,
        ledger_path=run_dir / LEDGER,
        errors=errors,
        stats=stats,
    )


def _read_run_info(run_dir: Path) -> dict[str, Any]:
    path = run_dir / RUN_INFO
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {}


def render_report(
    run_dir: str | os.PathLike,
    *,
    config: RunConfig | None = None,
    backend=None,
    ledger: Ledger | None = None,
    mode: str | None = None,
    template_path: str | None = None,
    force: bool = False,
) -> bool:
    """(Re)build ``report.md`` from the run's stage files.

    Returns True when an up-to-date report already existed and was kept.
    """
    run_dir = Path(run_dir)
    if config is None:
        config = RunConfig.from_dict(json.loads((run_dir / CONFIG).read_text(encoding="utf-8")))
    mode = mode or config.report_mode
    template = load_template(template_path or config.report_template)
    assessments = sorted(
        (assess.Assessment.from_record(r) for r in _read_jsonl(run_dir / ASSESSMENTS)),
        key=lambda a: a.frame_index,
    )
    rule_records = _read_jsonl(run_dir / RULES)
    grounding = {r["frame_index"]: rulegen.RuleSet.from_record(r).grounding_clauses for r in rule_records}
    failures = _read_jsonl(run_dir / ERRORS)
    report_model = config.models.get("report") or DEFAULT_MODELS["report"]

    key = _sha([
        "report",
        [_record_sha(r) for r in _read_jsonl(run_dir / ASSESSMENTS)],
        grounding, failures, template, mode, config.gap_tolerance,
        report_model if mode == "model" else None, config.options,
    ])
    info = _read_run_info(run_dir)
    report_path = run_dir / REPORT
    if not force and info.get("report_key") == key and report_path.exists():
        return True

    if mode == "model" and backend is None:
        backend = make_backend(config)
    header = {
        "run_id": config.resolved_run_id(),
        "source": Path(config.source).name,
        "frames_assessed": len(assessments),
        "frames_failed": len(failures),
        "models": {"describe": config.models["describe"], "rules": config.models["rules"],
                   **({"report": report_model} if mode == "model" else {})},
        "report_mode": mode,
    }
    report = generate_report(
        assessments, template, mode, backend,
        grounding=grounding, header=header, gap_tolerance=config.gap_tolerance,
        failures=failures, model_id=report_model, options=config.options,
    )
    report_path.write_text(report.render(template), encoding="utf-8")

    ledger = ledger or Ledger(run_dir / LEDGER)
    by_index = {a.frame_index: a for a in assessments}
    for finding in report.findings:
        for i in finding.episode.frame_indices:
            entry = {"finding": finding.number, "frame_index": i, "text": finding.render()}
            ledger.append(make_label(i, 4, ["A"]), [by_index[i].provenance_label], content_sha256(entry), REPORT)

    info["report_key"] = key
    (run_dir / RUN_INFO).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return False


def verify_ledger(run_dir: str | os.PathLike) -> list[str]:
    """Check that every stage record has a ledger record and refs only point backwards."""
    run_dir = Path(run_dir)
    problems = []
    records = Ledger(run_dir / LEDGER).records()
    by_key = {}
    for r in records:
        by_key.setdefault((r.provenance_label, r.content_sha256), []).append(r)
    labels = {r.provenance_label for r in records}
    for stage, name in STAGE_FILES.items():
        for rec in _read_jsonl(run_dir / name):
            hits = by_key.get((rec["provenance_label"], _record_sha(rec)), [])
            if len(hits) != 1:
                problems.append(f"{name}: {rec['provenance_label']} has {len(hits)} matching ledger records")
    for r in records:
        frame, stage, letters = parse_label(r.provenance_label)
        for ref in r.refs:
            if ref.startswith("frame:"):
                continue
            if ref not in labels:
                problems.append(f"{r.provenance_label} refers to unknown {ref}")
                continue
            ref_frame, ref_stage, _ = parse_label(ref)
            if ref_stage >= stage or (ref_frame != frame and stage != 4):
                problems.append(f"{r.provenance_label} -> {ref} is not a backward edge")
    return problems
