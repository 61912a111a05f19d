import sys
from pathlib import Path

import cv2
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sitewarden.inference import ScriptedBackend  # noqa: E402

VALID_RULES = """"Rules for Safe Construction Situation:"
1. Walkways must stay clear. No bricks or cords lie across the path.
2. Ladders must be stable. The ladder is tied off at the top.

"Rules for Unsafe Construction Situation:"
1. Unprotected work at height is dangerous. A worker on a ladder has no hard hat.
2. Electricity and water do not mix. A cord runs through standing water.
"""


def write_video(path, seconds, fps=10, size=(64, 48)):
    """Write a solid-colour MJPG video of exactly ``seconds * fps`` frames."""
    n = round(seconds * fps)
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, size)
    assert writer.isOpened()
    for j in range(n):
        image = np.full((size[1], size[0], 3), (j * 7) % 255, dtype=np.uint8)
        writer.write(image)
    writer.release()
    return path


def write_frames(directory, count, step_ms=1000):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        ms = i * step_ms
        label = f"{ms // 60000:02d}:{ms // 1000 % 60:02d}:{ms % 1000:03d}"
        image = np.full((24, 32, 3), (40 + i * 20) % 256, dtype=np.uint8)
        cv2.imwrite(str(directory / f"Frame{i}-{label}.jpg"), image)
    return directory


def pipeline_backend(verdicts=None, fail_frames=()):
    """Scripted backend answering describe / rules / assess / report prompts.

    ``verdicts`` maps a description substring to the assessment reply.
    """
    verdicts = verdicts or {}
    described = {}

    def describe(request):
        image = request.messages[-1].images[0]
        return described.setdefault(image, f"scene number {len(described)} with a ladder and a forklift")

    def assess(request):
        image = request.messages[-1].images[0]
        text = described.get(image, "")
        for needle, reply in verdicts.items():
            if needle in text:
                return reply
        return "Situation: Unsafe\nReason for decision: The worker on the ladder is not wearing a hard hat."

    def rules(request):
        for f in fail_frames:
            if f"scene number {f} " in request.prompt_text():
                return "I cannot help with that."
        return VALID_RULES

    return ScriptedBackend([
        ("Situation: [Safe or Unsafe]", assess),
        ("Rules for Unsafe Construction Situation", rules),
        ("Assessments:", "Summary:\nAll good.\n\nRecommendations:\n1. Keep going."),
        (lambda r: bool(r.messages[-1].images), describe),
    ])


@pytest.fixture
def frames_dir(tmp_path):
    return write_frames(tmp_path / "frames", 3)
