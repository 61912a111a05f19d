"""Bundled test data.

* ``corpus.jsonl``: 20 paraphrased OSHA 1926 clauses, covering every reference
  in the violation catalog plus eight related clauses as distractors.
* ``violations.jsonl``: the 20 designed violations of scenarios A, B and C.
* ``eval/``: truth and prediction files whose tallies reproduce the
  scenario confusion matrices for the framework and the GPT-4o baseline.
* ``replay/``: a 10-frame synthetic frame directory, a cassette recorded from
  a scripted backend, and a replay-mode run config.

The builders in this module regenerate the ``eval/`` and ``replay/`` files
byte for byte; see ``README.md`` for how the counts were derived.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from pathlib import Path

FIXTURES_DIR = Path(__file__).parent
CORPUS_PATH = FIXTURES_DIR / "corpus.jsonl"
VIOLATIONS_PATH = FIXTURES_DIR / "violations.jsonl"
EVAL_DIR = FIXTURES_DIR / "eval"
REPLAY_DIR = FIXTURES_DIR / "replay"

SYSTEMS = ("framework", "baseline")
SYSTEM_NAMES = {"framework": "framework", "baseline": "gpt-4o"}
SCENARIO_RUNS = {"A": (49, 47, 51), "B": (46, 45, 43), "C": (51, 54, 56)}

# (tp, tn, fp, fn). The scenario A framework counts are fixed inputs; the
# others are solved from the target recall values and frame totals.
MATRICES = {
    "framework": {"A": (71, 54, 16, 6), "B": (61, 46, 17, 10), "C": (66, 55, 22, 18)},
    "baseline": {"A": (68, 49, 20, 10), "B": (58, 42, 21, 13), "C": (64, 53, 24, 20)},
}
TARGET_RECALL = {
    "framework": {"A": 92.2, "B": 85.9, "C": 78.6},
    "baseline": {"A": 87.2, "B": 81.7, "C": 76.2},
}
GROUNDING_TOP = 3
GROUNDING_PASS_COUNT = 20


@dataclass(frozen=True)
class ViolationSpec:
    id: str
    category: str
    description: str
    osha_category: str
    osha_refs: tuple[str, ...]


def load_violations(path: str | Path = VIOLATIONS_PATH) -> list[ViolationSpec]:
    with open(path, encoding="utf-8") as fh:
        return [
            ViolationSpec(r["id"], r["category"], r["description"], r["osha_category"], tuple(r["osha_refs"]))
            for r in map(json.loads, filter(str.strip, fh))
        ]


# evaluation fixtures

def _largest_remainder(total: int, weights: tuple[int, ...]) -> list[int]:
    whole = sum(weights)
    quotas = [total * w / whole for w in weights]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def scenario_rows(system: str, scenario: str) -> list[dict]:
    """Frame-level (truth, prediction) rows whose tally equals the scenario matrix.

    Counts are spread over the runs in proportion to run length. Within a run,
    truly unsafe frames come first; outcome order inside each block is a
    seeded shuffle. Only the tallies are meaningful, not the placement.
    """
    tp, tn, fp, fn = MATRICES[system][scenario]
    sizes = SCENARIO_RUNS[scenario]
    unsafe = _largest_remainder(tp + fn, sizes)
    safe = [n - u for n, u in zip(sizes, unsafe)]
    tps = _largest_remainder(tp, tuple(unsafe))
    fps = _largest_remainder(fp, tuple(safe))
    rows = []
    for run, (u, s, t, f) in enumerate(zip(unsafe, safe, tps, fps), 1):
        rng = random.Random(f"{system}-{scenario}-{run}")
        positives = ["Unsafe"] * t + ["Safe"] * (u - t)
        negatives = ["Unsafe"] * f + ["Safe"] * (s - f)
        rng.shuffle(positives)
        rng.shuffle(negatives)
        labels = [("Unsafe", p) for p in positives] + [("Safe", p) for p in negatives]
        for index, (truth, pred) in enumerate(labels):
            rows.append({"scenario": scenario, "run": str(run), "frame_index": index, "truth": truth, "pred": pred})
    return rows


def build_eval_fixtures(out_dir: str | Path = EVAL_DIR) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for system in SYSTEMS:
        truth_lines, pred_lines = [], []
        for scenario in SCENARIO_RUNS:
            for r in scenario_rows(system, scenario):
                key = {"scenario": r["scenario"], "run": r["run"], "frame_index": r["frame_index"]}
                truth_lines.append(json.dumps({**key, "label": r["truth"]}))
                pred_lines.append(json.dumps({**key, "label": r["pred"], "system": SYSTEM_NAMES[system]}))
        for name, lines in ((f"{system}_truth.jsonl", truth_lines), (f"{system}_predictions.jsonl", pred_lines)):
            path = out / name
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(path)
    return written


def truth_path(system: str = "framework") -> Path:
    return EVAL_DIR / f"{system}_truth.jsonl"


def predictions_path(system: str = "framework") -> Path:
    return EVAL_DIR / f"{system}_predictions.jsonl"


def scenario_prediction_fixture(scenario: str, system: str = "framework") -> tuple[dict, dict]:
    """``(truth, predictions)`` for one scenario, keyed by ``(scenario, run, frame_index)``."""
    from ..evalkit import load_predictions, load_truth

    if scenario not in SCENARIO_RUNS:
        raise ValueError(f"scenario must be one of A, B, C, got {scenario!r}")
    truth = {k: v for k, v in load_truth(truth_path(system)).items() if k[0] == scenario}
    preds = load_predictions(predictions_path(system))[SYSTEM_NAMES[system]]
    return truth, {k: v for k, v in preds.items() if k[0] == scenario}


# replay fixture

_SCENES = [
    ("A concrete lab bay. A neat stack of bricks sits against the left wall and a yellow forklift is parked "
     "on the right with its forks lowered to the floor. No workers are visible. A sign on a column reads "
     "'Caution - Hi-vis safety vest required beyond this point'.", "Safe", None,
     "Materials are stacked against the wall and the forklift forks are fully lowered."),
    ("An extension ladder leans against the mast of a yellow forklift. A worker stands on the third rung. "
     "A yellow hard hat and a high-visibility vest lie on the floor next to the ladder foot.", "Unsafe", 5,
     "The worker on the ladder is not wearing a hard hat and the ladder leans on the forklift mast where it can be displaced."),
    ("The same worker is near the top of the extension ladder, which rests against the forklift mast. "
     "The hard hat is still on the floor. The ladder foot is not secured.", "Unsafe", None,
     "The worker on the ladder is not wearing a hard hat and the ladder leans on the forklift mast where it can be displaced."),
    ("A clear, swept walkway with a workbench on the left. A worker wearing a hard hat and a hi-vis vest "
     "carries a toolbox toward the exit.", "Safe", None,
     "The walkway is clear and the worker wears a hard hat and a vest."),
    ("An orange extension cord runs from a wall outlet across the floor and through a puddle of water near a "
     "floor drain. No GFCI device is visible on the cord.", "Unsafe", None,
     "The extension cord runs through standing water without GFCI protection."),
    ("A circular saw is plugged into the orange extension cord lying in the puddle. The cord jacket looks "
     "scuffed where it crosses the wet floor.", "Unsafe", 5,
     "The extension cord runs through standing water without GFCI protection."),
    ("The forklift forks are raised about 1.5 m with a pallet of bricks on them and the operator seat is "
     "empty. Nobody stands under the load.", "Unsafe", 3,
     "A pallet of bricks is left elevated on the forks of an unattended forklift."),
    ("Loose bricks and broken pieces are scattered across the walkway between the forklift and a workbench. "
     "A worker in a hard hat and hi-vis vest steps around them.", "Unsafe", 4,
     "Bricks scattered in the walkway create a trip hazard."),
    ("A material lift table is raised with a worker standing on its platform, reaching up to a ceiling pipe. "
     "Several bricks sit on the platform next to the worker's feet.", "Unsafe", None,
     "A person is being elevated on a material lift table that is not approved for personnel."),
    ("The material lift table is lowered and empty. Bricks are stacked on a pallet against the wall and the "
     "floor around it is clear.", "Safe", 2,
     "The lift is lowered and the bricks are stacked out of the walkway."),
]

_RULE_TEXT = {
    "safe": [
        "Work areas must stay free of hazards that can injure workers. Walkways are clear of bricks, cords and debris for their full width.",
        "Equipment and materials must be stable and secured. Ladders are secured at the top and set at a 4:1 angle, and loads are fully lowered when unattended.",
    ],
    "unsafe": [
        "Workers exposed to falls or overhead hazards without protection are at serious risk. A worker is above 6 ft or on a ladder without a hard hat or fall protection.",
        "Energized equipment in wet locations can electrocute. An extension cord lies in standing water or lacks GFCI protection.",
    ],
}

_CLAUSE_RE = re.compile(r"^\[([^\]]+)\]", re.MULTILINE)


def _rules_reply(prompt: str) -> str:
    clauses = _CLAUSE_RE.findall(prompt.split("Safety Regulations:", 1)[-1])
    cite = f" (see {clauses[0]})" if clauses else ""
    lines = ['"Rules for Safe Construction Situation:"']
    lines += [f"{i}. {t}" for i, t in enumerate(_RULE_TEXT["safe"], 1)]
    lines += ["", '"Rules for Unsafe Construction Situation:"']
    lines += [f"{i}. {t}{cite if i == 1 else ''}" for i, t in enumerate(_RULE_TEXT["unsafe"], 1)]
    return "\n".join(lines)


def _assessment_reply(frame: int) -> str:
    _, label, severity, reason = _SCENES[frame]
    lines = [f"Situation: {label}", f"Reason for decision: {reason}"]
    if severity is not None:
        lines.append(f"Severity: {severity}")
    return "\n".join(lines)


_REPORT_REPLY = (
    "<think>Group the unsafe frames by time and hazard.</think>\n"
    "Summary:\nThe walk recorded ladder misuse without head protection, scattered bricks, a cord in standing "
    "water, an elevated unattended load and a person riding a material lift. Hazards cluster in the first "
    "seven seconds and recur at the lift.\n\n"
    "Recommendations:\n1. Secure the ladder away from the forklift and enforce hard hats.\n"
    "2. Reroute the extension cord out of the water and add GFCI protection.\n"
    "3. Lower the forklift forks and stop using the lift table for personnel."
)


def _synthetic_frame(index: int):
    import numpy as np

    rng = np.random.default_rng(index)
    image = np.zeros((64, 96, 3), dtype=np.uint8)
    image[:] = rng.integers(40, 200, size=3, dtype=np.uint8)
    for _ in range(3):
        x, y = rng.integers(0, 80), rng.integers(0, 48)
        image[y : y + 16, x : x + 16] = rng.integers(0, 255, size=3, dtype=np.uint8)
    return image


def scripted_fixture_backend(frame_paths: list[Path]):
    """Scripted backend answering the replay fixture's requests by content."""
    import hashlib

    from ..inference import ScriptedBackend

    by_digest = {hashlib.sha256(p.read_bytes()).hexdigest(): i for i, p in enumerate(frame_paths)}

    def frame_of(request) -> int:
        images = [img for m in request.messages for img in m.images]
        return by_digest[hashlib.sha256(images[0]).hexdigest()]

    def is_assessment(request) -> bool:
        return "Situation: [Safe or Unsafe]" in request.prompt_text()

    def is_rules(request) -> bool:
        return "Rules for Unsafe Construction Situation" in request.prompt_text()

    def rules_reply(request) -> str:
        prompt = request.prompt_text()
        # frame 5's first answer is malformed to exercise the format-reminder retry
        if _SCENES[5][0] in prompt and "IMPORTANT" not in prompt:
            return "1. Keep cords out of water.\n2. Use GFCI."
        return _rules_reply(prompt)

    return ScriptedBackend([
        (is_assessment, lambda r: _assessment_reply(frame_of(r))),
        (is_rules, rules_reply),
        ("Assessments:", _REPORT_REPLY),
        (lambda r: any(m.images for m in r.messages), lambda r: _SCENES[frame_of(r)][0]),
    ])


REPLAY_CONFIG = {
    "source": "frames",
    "backend": "replay",
    "cassette": "cassette.jsonl",
    "report_mode": "deterministic",
    "max_in_flight": 2,
}


def build_replay_fixture(out_dir: str | Path = REPLAY_DIR, work_dir: str | Path | None = None) -> Path:
    """Write frames, record the cassette through the scripted backend, write the config."""
    import tempfile

    import cv2

    from ..inference import RecordingBackend
    from ..orchestrator import RunConfig, run

    out = Path(out_dir)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(len(_SCENES)):
        path = frames_dir / f"Frame{i}-00:{i:02d}:000.jpg"
        if not path.exists():
            cv2.imwrite(str(path), _synthetic_frame(i))
        paths.append(path)
    cassette = out / "cassette.jsonl"
    if cassette.exists():
        cassette.unlink()
    recorder = RecordingBackend(scripted_fixture_backend(paths), cassette)
    with tempfile.TemporaryDirectory(dir=work_dir) as tmp:
        for mode in ("deterministic", "model"):
            config = RunConfig.from_dict(
                {**REPLAY_CONFIG, "backend": "record", "report_mode": mode, "output_dir": tmp}, base_dir=out
            )
            run(config, backend=recorder)
    # recording order follows thread scheduling; sort so the file is reproducible
    lines = sorted(cassette.read_text(encoding="utf-8").splitlines(), key=lambda l: json.loads(l)["key"])
    cassette.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "config.json").write_text(json.dumps(REPLAY_CONFIG, indent=2) + "\n", encoding="utf-8")
    return out


def replay_config_path() -> Path:
    return REPLAY_DIR / "config.json"
