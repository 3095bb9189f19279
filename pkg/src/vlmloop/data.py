"""Synthetic training/eval data.

Covers the fixed word-level vocabulary, a lattice scene generator whose
questions name the visual cue required to answer them, the caption-to-MCQ
benchmark construction (position markers normalized to a placeholder, then
re-instantiated with four options), and line-delimited dataset files with
base-64 pixel payloads.

The description metric here is a token-F1 overlap proxy and is reported under
its own name (overlap_f1); it is not comparable to judge-based scores.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .rng import Stream
from .vision import ImageGrid

# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------

PAD, EOS, UNK, IMG, IMG_SEP, ANS = "<pad>", "<eos>", "<unk>", "<img>", "<img_sep>", "<ans>"
SPECIALS = [PAD, EOS, UNK, IMG, IMG_SEP, ANS]

COLORS = ["red", "green", "blue", "yellow", "purple", "orange"]
SHAPES = ["square", "circle", "triangle", "diamond"]
LETTERS = ["a", "b", "c", "d"]
DIRECTIONS = ["left", "right", "above", "below"]

JSON_WORDS = ["{", "}", ":", '"action"', '"stay"', '"move_forward"',
              '"rotate_left"', '"rotate_right"']

_PLAIN_WORDS = [
    "what", "color", "is", "the", "shape", "of", "object", "scene", "describe",
    "answer", "with", "one", "letter", "options", "reply", "json", "goal",
    "reach", "and", "?", ".", ",", "person", "doing", "while", "waits",
    "quietly", "for", "turn", "to", "speak", "walks", "up", "interrupt",
    "conversation", "calmly", "signals", "an", "intent", "urgently", "leans",
    "in", "talk", "other", "waiting", "approaches", "desk", "continues",
    "speaking", "interacting", "robot",
]


def build_vocab(size: int = 512) -> list[str]:
    words = SPECIALS + COLORS + SHAPES + LETTERS + DIRECTIONS + JSON_WORDS + _PLAIN_WORDS
    if len(set(words)) != len(words):
        raise DataError("vocabulary contains duplicates")
    if len(words) > size:
        raise DataError(f"base vocabulary ({len(words)}) exceeds size {size}")
    words = words + [f"<res_{i}>" for i in range(size - len(words))]
    return words


VOCAB = build_vocab()
_TOKEN_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID, EOS_ID, UNK_ID = _TOKEN_TO_ID[PAD], _TOKEN_TO_ID[EOS], _TOKEN_TO_ID[UNK]
IMG_ID, IMG_SEP_ID, ANS_ID = _TOKEN_TO_ID[IMG], _TOKEN_TO_ID[IMG_SEP], _TOKEN_TO_ID[ANS]


def tokenize(text: str) -> np.ndarray:
    return np.array([_TOKEN_TO_ID.get(w, UNK_ID) for w in text.split()], dtype=np.int64)


def detokenize(ids, keep_special: bool = False) -> str:
    words = []
    for i in ids:
        w = VOCAB[int(i)] if 0 <= int(i) < len(VOCAB) else UNK
        if not keep_special and w in SPECIALS:
            continue
        words.append(w)
    return " ".join(words)


# --------------------------------------------------------------------------
# lattice scenes
# --------------------------------------------------------------------------

# Channel sums are equal across the palette so total brightness carries no
# color information: shape area stays a color-invariant feature.
COLOR_RGB = {
    "red": (235, 10, 10), "green": (10, 235, 10), "blue": (10, 10, 235),
    "yellow": (125, 125, 5), "purple": (125, 5, 125), "orange": (165, 85, 5),
}


@dataclass(frozen=True)
class SceneSpec:
    rows: int = 3
    cols: int = 4
    cell_px: int = 12
    min_extra: int = 2
    max_extra: int = 4


DEFAULT_SCENE = SceneSpec()


@dataclass
class Sample:
    image: ImageGrid
    query: str
    label: str
    task: str  # vqa | mcq | describe | navigate
    meta: dict = field(default_factory=dict)


def draw_shape(pixels: np.ndarray, y0: int, x0: int, size: int, shape: str,
               rgb: tuple[int, int, int]) -> None:
    """Rasterize one shape into a size x size cell at (y0, x0)."""
    color = np.array(rgb, dtype=np.float32) / np.float32(255.0)
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = size / 2.0 - 1.5
    if shape == "square":
        m = (np.abs(yy - c) <= r) & (np.abs(xx - c) <= r)
    elif shape == "circle":
        m = (yy - c) ** 2 + (xx - c) ** 2 <= r * r
    elif shape == "triangle":
        m = (yy >= c - r) & (yy <= c + r) & (np.abs(xx - c) <= (yy - (c - r)) / 2.0)
    elif shape == "diamond":
        m = np.abs(yy - c) + np.abs(xx - c) <= r
    else:
        raise DataError(f"unknown shape {shape!r}")
    pixels[y0:y0 + size, x0:x0 + size][m] = color


def _render(objects: list[tuple[int, int, str, str]], spec: SceneSpec) -> ImageGrid:
    """objects: (row, col, shape, color) on the lattice."""
    h, w = spec.rows * spec.cell_px, spec.cols * spec.cell_px
    pixels = np.zeros((h, w, 3), dtype=np.float32)
    for r, c, shape, color in objects:
        draw_shape(pixels, r * spec.cell_px, c * spec.cell_px, spec.cell_px,
                   shape, COLOR_RGB[color])
    return ImageGrid(pixels)


def _place_extras(rng, spec: SceneSpec, taken: set[tuple[int, int]],
                  banned_shapes: set[str], banned_colors: set[str],
                  count: int) -> list[tuple[int, int, str, str]]:
    cells = [(r, c) for r in range(spec.rows) for c in range(spec.cols)
             if (r, c) not in taken]
    if count > len(cells):
        raise DataError("scene spec has no room for the requested objects")
    pick = rng.choice(len(cells), size=count, replace=False)
    shapes = [s for s in SHAPES if s not in banned_shapes]
    colors = [c for c in COLORS if c not in banned_colors]
    out = []
    for i in pick:
        r, c = cells[int(i)]
        out.append((r, c, shapes[int(rng.integers(len(shapes)))],
                    colors[int(rng.integers(len(colors)))]))
    return out


def gen_scene(stream: Stream, kind: str = "vqa_color",
              spec: SceneSpec = DEFAULT_SCENE) -> Sample:
    """One rendered scene plus a question answerable from its pixels.

    Kinds: vqa_color ("what color is the <shape>"), vqa_relation ("... the
    shape <direction> of the <shape>"), vqa_shape ("what shape is the <color>
    object"), mcq (vqa_color with four lettered options), describe
    (row-major object listing).  Answer attributes are drawn uniformly, so
    answer frequencies are uniform by construction.  Unsatisfiable draws
    retry on the next substream.
    """
    for attempt in range(64):
        rng = stream.child(f"try{attempt}").generator()
        sample = _gen_scene_once(rng, kind, spec)
        if sample is not None:
            return sample
    raise DataError(f"could not satisfy scene spec for kind {kind!r}")


def _gen_scene_once(rng, kind: str, spec: SceneSpec) -> Sample | None:
    n_extra = int(rng.integers(spec.min_extra, spec.max_extra + 1))

    if kind in ("vqa_color", "mcq", "describe"):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        cell = (int(rng.integers(spec.rows)), int(rng.integers(spec.cols)))
        objects = [(cell[0], cell[1], shape, color)]
        objects += _place_extras(rng, spec, {cell}, {shape}, set(), n_extra)
        img = _render(objects, spec)
        scene_meta = {"objects": [list(o) for o in objects], "target": 0}
        if kind == "vqa_color":
            return Sample(img, f"what color is the {shape}", color, "vqa",
                          {"shape": shape, "attr": "color", **scene_meta})
        if kind == "mcq":
            others = [c for c in COLORS if c != color]
            pick = rng.choice(len(others), size=3, replace=False)
            distractors = [others[int(i)] for i in pick]
            slot = int(rng.integers(4))
            options = distractors[:slot] + [color] + distractors[slot:]
            opts = " ".join(f"{l} {o}" for l, o in zip(LETTERS, options))
            query = (f"what color is the {shape} ? options : {opts} . "
                     f"answer with one letter")
            return Sample(img, query, LETTERS[slot], "mcq",
                          {"correct_index": slot, "options": options,
                           "attr": "option_color", **scene_meta})
        listing = " and ".join(f"a {c} {s}" for _, _, s, c in sorted(objects))
        return Sample(img, "describe the scene", f"{listing} .", "describe",
                      {"count": len(objects), **scene_meta})

    if kind == "vqa_shape":
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        cell = (int(rng.integers(spec.rows)), int(rng.integers(spec.cols)))
        objects = [(cell[0], cell[1], shape, color)]
        objects += _place_extras(rng, spec, {cell}, set(), {color}, n_extra)
        img = _render(objects, spec)
        return Sample(img, f"what shape is the {color} object", shape, "vqa",
                      {"color": color, "attr": "shape",
                       "objects": [list(o) for o in objects], "target": 0})

    if kind == "vqa_relation":
        anchor_shape = SHAPES[int(rng.integers(len(SHAPES)))]
        target_color = COLORS[int(rng.integers(len(COLORS)))]
        direction = DIRECTIONS[int(rng.integers(len(DIRECTIONS)))]
        dr, dc = {"left": (0, -1), "right": (0, 1),
                  "above": (-1, 0), "below": (1, 0)}[direction]
        ar = int(rng.integers(spec.rows))
        ac = int(rng.integers(spec.cols))
        tr, tc = ar + dr, ac + dc
        if not (0 <= tr < spec.rows and 0 <= tc < spec.cols):
            return None
        shape_choices = [s for s in SHAPES if s != anchor_shape]
        target_shape = shape_choices[int(rng.integers(len(shape_choices)))]
        anchor_color = COLORS[int(rng.integers(len(COLORS)))]
        objects = [(ar, ac, anchor_shape, anchor_color),
                   (tr, tc, target_shape, target_color)]
        objects += _place_extras(rng, spec, {(ar, ac), (tr, tc)},
                                 {anchor_shape}, set(), n_extra)
        img = _render(objects, spec)
        query = f"what color is the shape {direction} of the {anchor_shape}"
        return Sample(img, query, target_color, "vqa",
                      {"direction": direction, "anchor": anchor_shape,
                       "attr": "color", "objects": [list(o) for o in objects],
                       "target": 1})

    raise DataError(f"unknown scene kind {kind!r}")


def override_sample(sample: Sample, stream: Stream,
                    spec: SceneSpec = DEFAULT_SCENE) -> Sample | None:
    """A refined twin of the sample: the queried attribute of the target
    object is changed and the label follows the change.  Used to pretrain
    second-image precedence: when two image blocks disagree about the query,
    the later (refined) one answers.  Returns None for tasks without a
    single queried attribute."""
    attr = sample.meta.get("attr")
    if attr is None or "objects" not in sample.meta:
        return None
    rng = stream.child("override").generator()
    objects = [tuple(o) for o in sample.meta["objects"]]
    ti = sample.meta["target"]
    r, c, shape, color = objects[ti]

    if attr == "color":
        choices = [x for x in COLORS if x != color]
        new_color = choices[int(rng.integers(len(choices)))]
        objects[ti] = (r, c, shape, new_color)
        label = new_color
    elif attr == "shape":
        choices = [x for x in SHAPES if x != shape]
        new_shape = choices[int(rng.integers(len(choices)))]
        objects[ti] = (r, c, new_shape, color)
        label = new_shape
    elif attr == "option_color":
        options = sample.meta["options"]
        slots = [i for i, o in enumerate(options) if o != color]
        slot = slots[int(rng.integers(len(slots)))]
        objects[ti] = (r, c, shape, options[slot])
        label = LETTERS[slot]
    else:
        return None
    return Sample(_render(objects, spec), sample.query, label, sample.task,
                  {**sample.meta, "objects": [list(o) for o in objects],
                   "override_of": sample.label})


# --------------------------------------------------------------------------
# caption -> MCQ construction
# --------------------------------------------------------------------------

POSITIONS = ("left", "right")
POS_PLACEHOLDER = "{POS}"

BEHAVIOR_TEMPLATES = [
    "the {POS} person waits quietly for a turn to speak",
    "the {POS} person walks up to interrupt the conversation",
    "the {POS} person calmly signals an intent to speak",
    "the {POS} person urgently signals an intent to speak",
    "the {POS} person leans in to talk while the other waits",
    "the {POS} person approaches the desk and waits",
]

INACTIVE_TEMPLATE = "the {POS} person continues speaking with the robot"


@dataclass(frozen=True)
class CaptionRecord:
    event_id: int
    position: str  # side of the intervening person
    text: str


@dataclass(frozen=True)
class McqItem:
    question: str
    options: tuple[str, str, str, str]
    correct_index: int
    source_caption: int
    target_person: str  # inactive | intervening

    def validate(self) -> None:
        if len(set(self.options)) != 4:
            raise DataError(f"options not pairwise distinct: {self.options}")
        if not 0 <= self.correct_index < 4:
            raise DataError(f"correct index out of range: {self.correct_index}")
        if any(POS_PLACEHOLDER in o for o in self.options) or POS_PLACEHOLDER in self.question:
            raise DataError("unresolved position placeholder in item")
        if self.target_person not in ("inactive", "intervening"):
            raise DataError(f"bad target person {self.target_person!r}")


def gen_captions(stream: Stream, n_events: int) -> list[CaptionRecord]:
    """Synthetic annotated events: one behavior caption per event, each
    mentioning the side of the person acting."""
    rng = stream.child("captions").generator()
    out = []
    for i in range(n_events):
        tpl = BEHAVIOR_TEMPLATES[int(rng.integers(len(BEHAVIOR_TEMPLATES)))]
        pos = POSITIONS[int(rng.integers(2))]
        out.append(CaptionRecord(event_id=i, position=pos,
                                 text=tpl.replace(POS_PLACEHOLDER, pos)))
    return out


def normalize_caption(text: str) -> str:
    words = [POS_PLACEHOLDER if w in POSITIONS else w for w in text.split()]
    return " ".join(words)


def _instantiate(template: str, pos: str) -> str:
    return template.replace(POS_PLACEHOLDER, pos)


def build_mcq(captions: list[CaptionRecord], stream: Stream) -> list[McqItem]:
    """Two four-option questions per annotated event: one about the person
    acting (correct answer = its own normalized caption, re-instantiated) and
    one about the person already engaged.  Distractors are drawn without
    replacement from the normalized template pool, instantiated at the
    question's own position; the correct slot is uniform.
    """
    templates: list[str] = []
    for cap in captions:
        t = normalize_caption(cap.text)
        if t not in templates:
            templates.append(t)
    pool = list(templates)
    if INACTIVE_TEMPLATE not in pool:
        pool.append(INACTIVE_TEMPLATE)
    if len(pool) < 4:
        raise DataError(f"need >= 4 distinct caption templates, found {len(pool)}")

    rng = stream.child("mcq").generator()
    items: list[McqItem] = []
    for cap in captions:
        own = normalize_caption(cap.text)
        other_pos = "right" if cap.position == "left" else "left"
        for target, pos, correct_tpl in (
            ("intervening", cap.position, own),
            ("inactive", other_pos, INACTIVE_TEMPLATE),
        ):
            candidates = [t for t in pool if t != correct_tpl]
            pick = rng.choice(len(candidates), size=3, replace=False)
            distractors = [_instantiate(candidates[int(i)], pos) for i in pick]
            slot = int(rng.integers(4))
            options = distractors[:slot] + [_instantiate(correct_tpl, pos)] + distractors[slot:]
            item = McqItem(
                question=f"what is the {pos} person doing",
                options=tuple(options),
                correct_index=slot,
                source_caption=cap.event_id,
                target_person=target,
            )
            item.validate()
            items.append(item)
    return items


def mcq_query(item: McqItem) -> str:
    opts = " ".join(f"{l} {o}" for l, o in zip(LETTERS, item.options))
    return f"{item.question} ? options : {opts} . answer with one letter"


def mcq_image(item: McqItem, stream: Stream) -> ImageGrid:
    """Schematic frame for an MCQ item: a desk robot in the middle, one
    person marker on each side, the asked-about side highlighted."""
    spec = DEFAULT_SCENE
    pixels = np.zeros((spec.rows * spec.cell_px, spec.cols * spec.cell_px, 3),
                      dtype=np.float32)
    draw_shape(pixels, spec.cell_px, spec.cell_px, spec.cell_px, "square", (128, 128, 128))
    asked_left = item.question.split()[3] == "left" if len(item.question.split()) > 3 else True
    left_rgb = COLOR_RGB["yellow"] if asked_left else COLOR_RGB["blue"]
    right_rgb = COLOR_RGB["blue"] if asked_left else COLOR_RGB["yellow"]
    draw_shape(pixels, spec.cell_px, 0, spec.cell_px, "triangle", left_rgb)
    draw_shape(pixels, spec.cell_px, (spec.cols - 1) * spec.cell_px, spec.cell_px,
               "triangle", right_rgb)
    return ImageGrid(pixels)


def score_mcq(generated: str, item: McqItem) -> bool:
    """Parse the first option letter in the generation; unparseable counts
    as incorrect, never as an error."""
    for w in generated.split():
        if w in LETTERS:
            return LETTERS.index(w) == item.correct_index
    return False


def overlap_score(generated: str, reference: str) -> float:
    """Token-level F1 after lowercasing (multiset overlap)."""
    ref = reference.lower().split()
    if not ref:
        raise ContractError("overlap_score needs a nonempty reference")
    gen = generated.lower().split()
    if not gen:
        return 0.0
    ref_counts: dict[str, int] = {}
    for w in ref:
        ref_counts[w] = ref_counts.get(w, 0) + 1
    overlap = 0
    for w in gen:
        if ref_counts.get(w, 0) > 0:
            ref_counts[w] -= 1
            overlap += 1
    if overlap == 0:
        return 0.0
    precision = overlap / len(gen)
    recall = overlap / len(ref)
    return 2.0 * precision * recall / (precision + recall)


# --------------------------------------------------------------------------
# line-delimited files
# --------------------------------------------------------------------------

DATASET_HEADER = {"format": "vlmloop-dataset", "version": 1}
CAPTIONS_HEADER = {"format": "vlmloop-captions", "version": 1}
MCQ_HEADER = {"format": "vlmloop-mcq", "version": 1}


def _encode_pixels(img: ImageGrid) -> dict:
    u8 = np.round(img.pixels * 255.0).astype(np.uint8)
    return {"h": img.height, "w": img.width, "c": img.channels,
            "pixels": base64.b64encode(u8.tobytes()).decode("ascii")}


def _decode_pixels(rec: dict) -> ImageGrid:
    raw = base64.b64decode(rec["pixels"])
    u8 = np.frombuffer(raw, dtype=np.uint8).reshape(rec["h"], rec["w"], rec["c"])
    return ImageGrid(u8.astype(np.float32) / np.float32(255.0))


def _check_header(line: str, expected: dict, path) -> None:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: bad header line: {e}") from e
    if header != expected:
        raise DataError(f"{path}: header {header} != expected {expected}")


def write_samples(path: str | Path, samples: list[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(DATASET_HEADER) + "\n")
        for s in samples:
            rec = {"task": s.task, "query": s.query, "label": s.label,
                   "meta": s.meta, **_encode_pixels(s.image)}
            f.write(json.dumps(rec) + "\n")


def read_samples(path: str | Path) -> list[Sample]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty dataset file")
    _check_header(lines[0], DATASET_HEADER, path)
    out = []
    for line in lines[1:]:
        rec = json.loads(line)
        out.append(Sample(_decode_pixels(rec), rec["query"], rec["label"],
                          rec["task"], rec.get("meta", {})))
    return out


def write_captions(path: str | Path, captions: list[CaptionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(CAPTIONS_HEADER) + "\n")
        for c in captions:
            f.write(json.dumps({"event_id": c.event_id, "position": c.position,
                                "text": c.text}) + "\n")


def read_captions(path: str | Path) -> list[CaptionRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty captions file")
    _check_header(lines[0], CAPTIONS_HEADER, path)
    return [CaptionRecord(rec["event_id"], rec["position"], rec["text"])
            for rec in map(json.loads, lines[1:])]


def write_mcq(path: str | Path, items: list[McqItem]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(MCQ_HEADER) + "\n")
        for it in items:
            f.write(json.dumps({
                "question": it.question, "options": list(it.options),
                "correct_index": it.correct_index,
                "source_caption": it.source_caption,
                "target_person": it.target_person}) + "\n")


def read_mcq(path: str | Path) -> list[McqItem]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty mcq file")
    _check_header(lines[0], MCQ_HEADER, path)
    items = []
    for rec in map(json.loads, lines[1:]):
        item = McqItem(rec["question"], tuple(rec["options"]), rec["correct_index"],
                       rec["source_caption"], rec["target_person"])
        item.validate()
        items.append(item)
    return items
