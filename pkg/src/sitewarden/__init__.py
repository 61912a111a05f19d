"""Construction-site safety inspection from robot video.

Frames are described by a vision model, turned into safe/unsafe rules with
retrieved OSHA clauses, assessed frame by frame, and rolled up into a
traceable inspection report. See ``sitewarden.orchestrator.run``.
"""

from .assess import Assessment, assess_frame, parse_assessment
from .evalkit import ConfusionMatrix, aggregate, compute_metrics, tally
from .ingest import Frame, extract_frames, ingest_directory
from .inference import ChatRequest, LiveBackend, RecordingBackend, ReplayBackend, ScriptedBackend
from .orchestrator import RunConfig, run
from .perception import SceneDescription, describe_scene
from .regstore import EmbeddingIndex, build_index, chunk_clauses, load_corpus, retrieve, search
from .report import coalesce_episodes, generate_report
from .rulegen import RuleSet, generate_rules, parse_rule_response

__version__ = "0.1.0"

__all__ = [
    "Assessment", "ChatRequest", "ConfusionMatrix", "EmbeddingIndex", "Frame", "LiveBackend",
    "RecordingBackend", "ReplayBackend", "RuleSet", "RunConfig", "SceneDescription", "ScriptedBackend",
    "aggregate", "assess_frame", "build_index", "chunk_clauses", "coalesce_episodes", "compute_metrics",
    "describe_scene", "extract_frames", "generate_report", "generate_rules", "ingest_directory",
    "load_corpus", "parse_assessment", "parse_rule_response", "retrieve", "run", "search", "tally",
]
