"""Synthetic shape-world VQA data: scenes, questions, answers, rationales.

A scene is a small set of attributed objects on a 4x4 grid.  Questions,
answers and rationales come from closed grammars, so every labelled sample
can be re-derived from its scene and checked mechanically.  Generation is a
pure function of the config; serialization is line-delimited JSON.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from random import Random

GRID = 4
QUESTION_KINDS = ("COLOR", "SHAPE", "COUNT", "EXIST")

DEFAULT_SHAPES = ("circle", "square", "triangle")
DEFAULT_COLORS = ("red", "blue", "green", "yellow")
DEFAULT_SIZES = ("small", "big")

# lowercase words, single digits, and "?"
_TOKEN_RE = re.compile(r"[a-z]+|[0-9]|\?")

_SCENE_ATTEMPTS = 64


class DatasetError(ValueError):
    """Invalid world config, sample, or dataset file."""


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_labelled: int = 500
    n_unlabelled: int = 2000
    shapes: tuple[str, ...] = DEFAULT_SHAPES
    colors: tuple[str, ...] = DEFAULT_COLORS
    sizes: tuple[str, ...] = DEFAULT_SIZES
    max_objects: int = 3
    question_kinds: tuple[str, ...] = QUESTION_KINDS

    def validate(self) -> "WorldConfig":
        for name in ("shapes", "colors", "sizes"):
            values = getattr(self, name)
            if len(values) == 0:
                raise DatasetError(f"world config field '{name}' must be non-empty")
            if len(set(values)) != len(values):
                raise DatasetError(f"world config field '{name}' contains duplicates")
            for tok in values:
                if not re.fullmatch(r"[a-z]+", tok):
                    raise DatasetError(
                        f"world config field '{name}' has non-lowercase token {tok!r}"
                    )
        if self.max_objects < 1:
            raise DatasetError("world config field 'max_objects' must be >= 1")
        if self.max_objects > GRID * GRID:
            raise DatasetError("world config field 'max_objects' exceeds grid capacity")
        if self.n_labelled < 0 or self.n_unlabelled < 0:
            raise DatasetError("world config sample counts must be non-negative")
        if self.n_labelled + self.n_unlabelled < 1:
            raise DatasetError("world config field 'n_labelled + n_unlabelled' must be >= 1")
        if len(self.question_kinds) == 0:
            raise DatasetError("world config field 'question_kinds' must be non-empty")
        for kind in self.question_kinds:
            if kind not in QUESTION_KINDS:
                raise DatasetError(f"world config field 'question_kinds' has unknown kind {kind!r}")
        return self


@dataclass(frozen=True, order=True)
class SceneObject:
    row: int
    col: int
    shape: str
    color: str
    size: str


@dataclass(frozen=True)
class Scene:
    scene_id: int
    objects: tuple[SceneObject, ...]

    def count(self, shape: str) -> int:
        return sum(1 for o in self.objects if o.shape == shape)

    def with_shape(self, shape: str) -> list[SceneObject]:
        return [o for o in self.objects if o.shape == shape]

    def with_color(self, color: str) -> list[SceneObject]:
        return [o for o in self.objects if o.color == color]


@dataclass(frozen=True)
class Sample:
    sample_id: int
    scene: Scene
    question: tuple[str, ...]
    answer: tuple[str, ...]
    rationale: tuple[str, ...] | None
    labelled: bool


def validate_sample(sample: Sample) -> Sample:
    if len(sample.question) == 0:
        raise DatasetError(f"sample {sample.sample_id}: question is empty")
    if len(sample.answer) == 0:
        raise DatasetError(f"sample {sample.sample_id}: answer is empty")
    if sample.labelled != (sample.rationale is not None):
        raise DatasetError(
            f"sample {sample.sample_id}: labelled flag must match rationale presence"
        )
    if not 1 <= len(sample.scene.objects):
        raise DatasetError(f"sample {sample.sample_id}: scene has no objects")
    positions = [(o.row, o.col) for o in sample.scene.objects]
    if len(set(positions)) != len(positions):
        raise DatasetError(f"sample {sample.sample_id}: scene positions are not distinct")
    for o in sample.scene.objects:
        if not (0 <= o.row < GRID and 0 <= o.col < GRID):
            raise DatasetError(f"sample {sample.sample_id}: object position off-grid")
        for attr in (o.shape, o.color, o.size):
            _check_token(attr, "scene")
    for field_name, tokens in (("question", sample.question), ("answer", sample.answer)):
        for tok in tokens:
            _check_token(tok, field_name)
    if sample.rationale is not None:
        for tok in sample.rationale:
            _check_token(tok, "rationale")
    return sample


def _check_token(tok: str, where: str) -> None:
    if not isinstance(tok, str) or not _TOKEN_RE.fullmatch(tok):
        raise DatasetError(f"unknown token {tok!r} in {where}")


# --- question / rationale grammar ---------------------------------------


def render_question(scene: Scene, kind: str, target) -> tuple[str, ...]:
    """Render one question from the fixed grammar.

    ``target`` is an object index for COLOR/SHAPE, a shape token for COUNT,
    and a (color, shape) pair for EXIST.
    """
    if kind == "COLOR":
        obj = scene.objects[target]
        if len(scene.with_shape(obj.shape)) != 1:
            raise DatasetError(f"ambiguous COLOR target: shape {obj.shape!r} is not unique")
        return ("what", "color", "is", "the", obj.shape, "?")
    if kind == "SHAPE":
        obj = scene.objects[target]
        if len(scene.with_color(obj.color)) != 1:
            raise DatasetError(f"ambiguous SHAPE target: color {obj.color!r} is not unique")
        return ("what", "is", "the", obj.color, "object", "?")
    if kind == "COUNT":
        return ("how", "many", target, "are", "there", "?")
    if kind == "EXIST":
        color, shape = target
        return ("is", "there", "a", color, shape, "?")
    raise DatasetError(f"unknown question kind {kind!r}")


def parse_question(question: tuple[str, ...]) -> tuple[str, tuple[str, ...]]:
    """Inverse of render_question: (kind, grammar slots)."""
    q = tuple(question)
    if len(q) == 6 and q[:4] == ("what", "color", "is", "the") and q[5] == "?":
        return "COLOR", (q[4],)
    if len(q) == 6 and q[:3] == ("what", "is", "the") and q[4:] == ("object", "?"):
        return "SHAPE", (q[3],)
    if len(q) == 6 and q[:2] == ("how", "many") and q[3:] == ("are", "there", "?"):
        return "COUNT", (q[2],)
    if len(q) == 6 and q[:3] == ("is", "there", "a") and q[5] == "?":
        return "EXIST", (q[3], q[4])
    raise DatasetError(f"question does not match the grammar: {' '.join(q)!r}")


def derive_answer(scene: Scene, question: tuple[str, ...]) -> tuple[str, ...]:
    """Re-derive the answer by exhaustive attribute lookup over the scene."""
    kind, slots = parse_question(question)
    if kind == "COLOR":
        matches = scene.with_shape(slots[0])
        if len(matches) != 1:
            raise DatasetError(f"COLOR question is ambiguous for this scene: {slots[0]!r}")
        return (matches[0].color,)
    if kind == "SHAPE":
        matches = scene.with_color(slots[0])
        if len(matches) != 1:
            raise DatasetError(f"SHAPE question is ambiguous for this scene: {slots[0]!r}")
        return (matches[0].shape,)
    if kind == "COUNT":
        return (str(scene.count(slots[0])),)
    color, shape = slots
    present = any(o.color == color and o.shape == shape for o in scene.objects)
    return ("yes" if present else "no",)


def render_rationale(
    scene: Scene, question: tuple[str, ...], answer: tuple[str, ...]
) -> tuple[str, ...]:
    """Render the grammar rationale for a true (scene, question, answer) triple."""
    kind, slots = parse_question(question)
    if kind == "COLOR":
        return ("because", "the", slots[0], "is", answer[0])
    if kind == "SHAPE":
        return ("because", "the", answer[0], "is", slots[0])
    if kind == "COUNT":
        return ("because", "there", "are", answer[0], slots[0])
    color, shape = slots
    if answer[0] == "yes":
        return ("because", "there", "is", "a", color, shape)
    return ("because", "no", "object", "is", "a", color, shape)


# --- generation ----------------------------------------------------------


def _sample_scene(rng: Random, config: WorldConfig, scene_id: int) -> Scene:
    n = rng.randint(1, config.max_objects)
    cells = rng.sample([(r, c) for r in range(GRID) for c in range(GRID)], n)
    objects = [
        SceneObject(
            row=r,
            col=c,
            shape=rng.choice(config.shapes),
            color=rng.choice(config.colors),
            size=rng.choice(config.sizes),
        )
        for r, c in cells
    ]
    return Scene(scene_id=scene_id, objects=tuple(sorted(objects)))


def _question_targets(scene: Scene, kind: str, config: WorldConfig) -> list:
    if kind == "COLOR":
        return [i for i, o in enumerate(scene.objects) if len(scene.with_shape(o.shape)) == 1]
    if kind == "SHAPE":
        return [i for i, o in enumerate(scene.objects) if len(scene.with_color(o.color)) == 1]
    if kind == "COUNT":
        return list(config.shapes)
    return [(c, s) for c in config.colors for s in config.shapes]


def _sample_qa(rng: Random, config: WorldConfig, scene_id: int):
    for _ in range(_SCENE_ATTEMPTS):
        scene = _sample_scene(rng, config, scene_id)
        kinds = list(config.question_kinds)
        rng.shuffle(kinds)
        for kind in kinds:
            targets = _question_targets(scene, kind, config)
            if not targets:
                continue
            target = rng.choice(targets)
            question = render_question(scene, kind, target)
            return scene, question, derive_answer(scene, question)
    raise DatasetError("could not sample a resolvable scene; question_kinds too restrictive")


def generate_dataset(
    config: WorldConfig,
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Generate the three splits (80/10/10 by sample_id), purely from config."""
    config.validate()
    rng = Random(config.seed)
    total = config.n_labelled + config.n_unlabelled
    flags = [True] * config.n_labelled + [False] * config.n_unlabelled
    rng.shuffle(flags)

    splits: tuple[list[Sample], list[Sample], list[Sample]] = ([], [], [])
    for sample_id in range(total):
        scene, question, answer = _sample_qa(rng, config, sample_id)
        labelled = flags[sample_id]
        rationale = render_rationale(scene, question, answer) if labelled else None
        sample = validate_sample(
            Sample(
                sample_id=sample_id,
                scene=scene,
                question=question,
                answer=answer,
                rationale=rationale,
                labelled=labelled,
            )
        )
        bucket = sample_id % 10
        splits[0 if bucket < 8 else (1 if bucket == 8 else 2)].append(sample)
    return splits


# --- serialization -------------------------------------------------------


def _sample_to_record(sample: Sample) -> dict:
    record = {
        "sample_id": sample.sample_id,
        "scene": {
            "scene_id": sample.scene.scene_id,
            "objects": [
                {"shape": o.shape, "color": o.color, "size": o.size, "row": o.row, "col": o.col}
                for o in sample.scene.objects
            ],
        },
        "question": " ".join(sample.question),
        "answer": " ".join(sample.answer),
    }
    if sample.rationale is not None:
        record["rationale"] = " ".join(sample.rationale)
    record["labelled"] = sample.labelled
    return record


def _record_to_sample(record: dict) -> Sample:
    try:
        scene = Scene(
            scene_id=int(record["scene"]["scene_id"]),
            objects=tuple(
                SceneObject(
                    row=int(o["row"]),
                    col=int(o["col"]),
                    shape=o["shape"],
                    color=o["color"],
                    size=o["size"],
                )
                for o in record["scene"]["objects"]
            ),
        )
        sample = Sample(
            sample_id=int(record["sample_id"]),
            scene=scene,
            question=tuple(record["question"].split()),
            answer=tuple(record["answer"].split()),
            rationale=tuple(record["rationale"].split()) if "rationale" in record else None,
            labelled=bool(record["labelled"]),
        )
    except KeyError as exc:
        raise DatasetError(f"record is missing field {exc.args[0]!r}") from exc
    return validate_sample(sample)


def save_dataset(samples: list[Sample], path: str | Path) -> None:
    lines = [json.dumps(_sample_to_record(s), separators=(",", ":")) for s in samples]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_dataset(path: str | Path) -> list[Sample]:
    samples = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: malformed record at line {lineno}: {exc.msg}") from exc
        try:
            samples.append(_record_to_sample(record))
        except DatasetError as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
    return samples
