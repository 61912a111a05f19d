"""Scene description: turn each frame into an object-centric text inventory."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Mapping

from .errors import EmptyReply, EmptyTemplate
from .inference import Backend, image_request
from .ingest import Frame
from .report import make_label

DEFAULT_DESCRIPTION_TEMPLATE = (
    "You are looking at a frame captured by an inspection robot on a construction site.\n"
    "Describe the scene as an object-centric inventory. List the objects, activities, and "
    "spatial relationships you can see: workers and what they wear, ladders, machines, "
    "forklifts, stored materials, cords and cables, water on the floor, signs, edges and "
    "openings. For each item state where it is relative to the others.\n"
    "Report only what is visible. Do not judge whether the scene is safe."
)


@dataclass(frozen=True)
class SceneDescription:
    frame_index: int
    time_label: str
    text: str
    provenance_label: str
    model_id: str
    request_key: str = ""

    def to_record(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "SceneDescription":
        return cls(**{k: rec[k] for k in cls.__dataclass_fields__ if k in rec})


def build_description_prompt(template: str = DEFAULT_DESCRIPTION_TEMPLATE) -> str:
    if not template or not template.strip():
        raise EmptyTemplate("description template is empty")
    return template


def describe_scene(
    frame: Frame,
    backend: Backend,
    template: str = DEFAULT_DESCRIPTION_TEMPLATE,
    model_id: str = "gemma3:12b",
    options: Mapping[str, Any] | None = None,
) -> SceneDescription:
    """Ask the vision model for a description of ``frame``; the reply is kept verbatim."""
    prompt = build_description_prompt(template)
    request = image_request(model_id, prompt, frame.image_ref, options)
    response = backend.chat(request)
    if not response.text.strip():
        raise EmptyReply(f"vision model returned an empty description for frame {frame.index}")
    return SceneDescription(
        frame_index=frame.index,
        time_label=frame.time_label,
        text=response.text,
        # A = the frame image itself
        provenance_label=make_label(frame.index, 1, ["A"]),
        model_id=model_id,
        request_key=request.key,
    )
