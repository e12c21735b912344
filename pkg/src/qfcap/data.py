"""Procedural video/ASR/caption world, the closed-vocabulary tokenizer, and dataset files.

A scene is a single coloured shape drifting across a black canvas. A third
of the scenes also carry a spoken topic that only the ASR text reveals; the
captions of those scenes mention the topic, so captioning them well needs
the ASR branch.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, IntegrityError, UnknownWordError

FORMAT = "qfcap-synth"
FORMAT_VERSION = 1
NONE_ASR = "none."

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)

COLORS = {
    "red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0), "purple": (0.6, 0.0, 0.8), "orange": (1.0, 0.5, 0.0),
    "white": (1.0, 1.0, 1.0), "cyan": (0.0, 1.0, 1.0),
}
SHAPES = ("square", "circle", "triangle", "cross", "diamond", "ring")
SIZES = {"small": 2.0, "big": 3.0}
MOTIONS = ("left", "right", "up", "down", "still")
TOPICS = ("cooking", "music", "football", "weather", "travel", "science", "history", "painting",
          "gardening", "fishing", "dancing", "chess", "cars", "animals", "space")

SUBJECTS = ("a {size} {color} {shape}", "a {color} {shape}", "the {color} {shape}",
            "one {size} {color} {shape}", "the {size} {color} {shape}")
MOVING = ("moves {dir}", "slides {dir}", "goes {dir}", "is moving {dir}", "travels {dir}")
STILL = ("stays still", "does not move", "remains still", "is not moving", "stays in place")
TOPIC_SUFFIX = ("while someone talks about {topic}", "as a person speaks about {topic}",
                "in a video about {topic}")
ASR_TEMPLATES = ("today we talk about {topic}", "welcome to my show about {topic}",
                 "i really love {topic} and want to share it", "this video is all about {topic}",
                 "let me tell you something about {topic}")
SUMMARY_INTRO = "there is a {size} {color} {shape} on a black background."
SUMMARY_MOTION = ("it {motion} across the frame.", "the {shape} {motion}.")
SUMMARY_SPEECH = ("someone is talking about {topic}.", "the speech is about {topic}.")
SUMMARY_SILENT = ("there is no useful speech.", "nobody says anything useful.")
SUMMARY_EXTRA = ("the {shape} is {color}.", "the {shape} is {size}.", "the background is black.",
                 "nothing else happens in the video.")


@dataclass(frozen=True)
class WorldSpec:
    colors: tuple = tuple(COLORS)
    shapes: tuple = SHAPES
    sizes: tuple = tuple(SIZES)
    motions: tuple = MOTIONS
    topics: tuple = TOPICS
    frames: int = 4
    channels: int = 3
    height: int = 16
    width: int = 16
    informative_rate: float = 1.0 / 3.0
    captions_per_item: int = 5
    summaries_per_item: int = 5

    def template_texts(self) -> list[str]:
        """Every fixed string the generator can emit; source of the closed vocabulary."""
        return list(SUBJECTS + MOVING + STILL + TOPIC_SUFFIX + ASR_TEMPLATES + SUMMARY_MOTION
                    + SUMMARY_SPEECH + SUMMARY_SILENT + SUMMARY_EXTRA + (SUMMARY_INTRO, NONE_ASR))

    def vocabulary(self) -> list[str]:
        words: set[str] = set(self.colors) | set(self.shapes) | set(self.sizes) | set(self.topics)
        words |= {m for m in self.motions}
        for text in self.template_texts():
            for w in _split_words(text):
                if not (w.startswith("{") and w.endswith("}")):
                    words.add(w)
        return list(SPECIALS) + sorted(words)


def _split_words(text: str) -> list[str]:
    out = []
    for w in text.split():
        if len(w) > 1 and w.endswith("."):
            out.extend((w[:-1], "."))
        else:
            out.append(w)
    return out


class Tokenizer:
    """Word-level tokenizer over a closed vocabulary.

    ``tokenize`` never adds begin/end markers: the empty string maps to an
    empty id list, and callers that need ``<bos>``/``<eos>`` (the language
    model) add them explicitly. A word glued to a trailing full stop is
    split into two tokens and re-glued on detokenize, so canonical text
    (single spaces, stops only at word ends) round-trips exactly.
    """

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ContractError("duplicate words in vocabulary")
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]

    @classmethod
    def from_world(cls, world: WorldSpec | None = None) -> "Tokenizer":
        return cls((world or WorldSpec()).vocabulary())

    def __len__(self):
        return len(self.words)

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (self.pad_id, self.bos_id, self.eos_id)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for w in _split_words(text):
            if w in SPECIALS or w not in self.index:
                raise UnknownWordError(w)
            ids.append(self.index[w])
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        words = [self.words[int(i)] for i in ids if int(i) not in self.special_ids]
        return " ".join(words).replace(" .", ".")

    def words_of(self, text: str) -> list[str]:
        self.tokenize(text)
        return _split_words(text)


# ---------------------------------------------------------------------------
# scenes and rendering
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    color: str
    shape: str
    size: str
    motion: str
    start: tuple[float, float]
    end: tuple[float, float]
    topic: str | None = None

    @property
    def informative(self) -> bool:
        return self.topic is not None

    def centers(self, F: int) -> np.ndarray:
        """(F, 2) object centres (x, y) at uniformly spaced timesteps."""
        u = np.linspace(0.0, 1.0, F) if F > 1 else np.zeros(1)
        start, end = np.asarray(self.start), np.asarray(self.end)
        return start[None, :] + u[:, None] * (end - start)[None, :]

    def visual_words(self) -> set[str]:
        return {self.color, self.shape, self.size, self.motion}


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    if shape == "square":
        return np.maximum(ax, ay) <= r
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "diamond":
        return ax + ay <= r
    if shape == "cross":
        t = r / 3.0
        return ((ax <= t) & (ay <= r)) | ((ay <= t) & (ax <= r))
    if shape == "ring":
        m = np.maximum(ax, ay)
        return (m <= r) & (m >= r - 1.0)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (ax <= (dy + r) / 2.0)
    raise ContractError(f"unknown shape {shape!r}")


def render_frames(scene: Scene, F: int, height: int = 16, width: int = 16) -> np.ndarray:
    """Rasterise ``scene`` at F timesteps into a float64 (F, 3, H, W) array."""
    if F < 1:
        raise DegenerateInputError("need at least one frame")
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    rgb = np.asarray(COLORS[scene.color])
    r = SIZES[scene.size]
    frames = np.zeros((F, 3, height, width))
    for t, (cx, cy) in enumerate(scene.centers(F)):
        mask = _shape_mask(scene.shape, xs - cx, ys - cy, r)
        frames[t] = rgb[:, None, None] * mask[None]
    return frames


def _sample_scene(rng: np.random.Generator, world: WorldSpec, informative: bool) -> Scene:
    color = world.colors[rng.integers(len(world.colors))]
    shape = world.shapes[rng.integers(len(world.shapes))]
    size = world.sizes[rng.integers(len(world.sizes))]
    motion = world.motions[rng.integers(len(world.motions))]
    r = SIZES[size]
    lo, hi = r + 0.5, world.width - r - 0.5
    lo_y, hi_y = r + 0.5, world.height - r - 0.5
    x0 = float(rng.uniform(lo, hi))
    y0 = float(rng.uniform(lo_y, hi_y))
    jitter = float(rng.uniform(0.0, 1.0))
    if motion == "right":
        start, end = (lo + jitter, y0), (hi - jitter, y0)
    elif motion == "left":
        start, end = (hi - jitter, y0), (lo + jitter, y0)
    elif motion == "down":
        start, end = (x0, lo_y + jitter), (x0, hi_y - jitter)
    elif motion == "up":
        start, end = (x0, hi_y - jitter), (x0, lo_y + jitter)
    else:
        start = end = (x0, y0)
    topic = world.topics[rng.integers(len(world.topics))] if informative else None
    return Scene(color, shape, size, motion, (round(start[0], 4), round(start[1], 4)),
                 (round(end[0], 4), round(end[1], 4)), topic)


def _motion_phrase(template: str, motion: str) -> str:
    return template.format(dir=motion)


def make_captions(scene: Scene, rng: np.random.Generator, count: int = 5) -> list[str]:
    phrases = STILL if scene.motion == "still" else MOVING
    combos = [(s, m) for s in range(len(SUBJECTS)) for m in range(len(phrases))]
    picks = rng.choice(len(combos), size=count, replace=False)
    out = []
    for k in picks:
        s, m = combos[k]
        subject = SUBJECTS[s].format(size=scene.size, color=scene.color, shape=scene.shape)
        text = f"{subject} {_motion_phrase(phrases[m], scene.motion)}"
        if scene.topic is not None:
            suffix = TOPIC_SUFFIX[rng.integers(len(TOPIC_SUFFIX))]
            text += " " + suffix.format(topic=scene.topic)
        out.append(text)
    return out


def make_summaries(scene: Scene, rng: np.random.Generator, count: int = 5) -> list[str]:
    out = []
    for _ in range(count):
        intro = SUMMARY_INTRO.format(size=scene.size, color=scene.color, shape=scene.shape)
        phrases = STILL if scene.motion == "still" else MOVING
        motion = _motion_phrase(phrases[rng.integers(len(phrases))], scene.motion)
        tmpl = SUMMARY_MOTION[rng.integers(len(SUMMARY_MOTION))]
        motion_sent = tmpl.format(motion=motion, shape=scene.shape)
        if scene.topic is not None:
            speech = SUMMARY_SPEECH[rng.integers(len(SUMMARY_SPEECH))].format(topic=scene.topic)
        else:
            speech = SUMMARY_SILENT[rng.integers(len(SUMMARY_SILENT))]
        n_extra = int(rng.integers(0, 3))
        extras = [SUMMARY_EXTRA[i].format(shape=scene.shape, color=scene.color, size=scene.size)
                  for i in sorted(rng.choice(len(SUMMARY_EXTRA), size=n_extra, replace=False))]
        body = [motion_sent, speech] + extras
        order = rng.permutation(len(body))
        out.append(" ".join([intro] + [body[i] for i in order]))
    return out


def make_asr(scene: Scene, rng: np.random.Generator) -> str:
    if scene.topic is None:
        return NONE_ASR
    return ASR_TEMPLATES[rng.integers(len(ASR_TEMPLATES))].format(topic=scene.topic)


# ---------------------------------------------------------------------------
# samples and dataset files
# ---------------------------------------------------------------------------

@dataclass
class VideoSample:
    id: str
    scene: Scene
    asr: str
    captions: list[str]
    summaries: list[str]
    frame_shape: tuple[int, int, int, int] = (4, 3, 16, 16)
    _frames: np.ndarray | None = field(default=None, repr=False)

    @property
    def informative(self) -> bool:
        return self.scene.informative

    @property
    def frames(self) -> np.ndarray:
        if self._frames is None:
            F, _, H, W = self.frame_shape
            self._frames = render_frames(self.scene, F, H, W)
        return self._frames

    def references(self, target: str = "captions") -> list[str]:
        return self.captions if target == "captions" else self.summaries

    def with_asr(self, asr: str) -> "VideoSample":
        return VideoSample(self.id, self.scene, asr, self.captions, self.summaries,
                           self.frame_shape, self._frames)

    def to_json(self, expand: bool = False) -> dict:
        return {
            "id": self.id,
            "scene": asdict(self.scene),
            "asr": self.asr,
            "asr_informative": self.informative,
            "captions": self.captions,
            "summaries": self.summaries,
            "frames": self.frames.tolist() if expand else None,
        }

    @classmethod
    def from_json(cls, obj: dict, frame_shape=(4, 3, 16, 16)) -> "VideoSample":
        sc = dict(obj["scene"])
        sc["start"], sc["end"] = tuple(sc["start"]), tuple(sc["end"])
        frames = obj.get("frames")
        arr = np.asarray(frames, dtype=np.float64) if frames is not None else None
        if arr is not None:
            frame_shape = arr.shape
        return cls(obj["id"], Scene(**sc), obj["asr"], list(obj["captions"]),
                   list(obj.get("summaries", [])), tuple(frame_shape), arr)


def generate_item(seed: int, index: int, world: WorldSpec) -> VideoSample:
    """Item ``index`` of dataset ``seed``; independent of every other item."""
    rng = np.random.default_rng([seed, index])
    informative = bool(rng.random() < world.informative_rate)
    scene = _sample_scene(rng, world, informative)
    return VideoSample(
        id=f"{seed}-{index:06d}",
        scene=scene,
        asr=make_asr(scene, rng),
        captions=make_captions(scene, rng, world.captions_per_item),
        summaries=make_summaries(scene, rng, world.summaries_per_item),
        frame_shape=(world.frames, world.channels, world.height, world.width),
    )


SPLITS = ("pretrain", "finetune", "test")


def split_counts(n_items: int, ratios: Sequence[float]) -> list[int]:
    ratios = [float(r) for r in ratios]
    if len(ratios) != len(SPLITS) or any(r < 0 or not np.isfinite(r) for r in ratios) \
            or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios must be {len(SPLITS)} non-negative numbers summing to 1, got {ratios}")
    counts = [int(np.floor(r * n_items)) for r in ratios]
    counts[0] += n_items - sum(counts)
    return counts


def generate_items(seed: int, n_items: int, world: WorldSpec | None = None) -> list[VideoSample]:
    if n_items < 1:
        raise DegenerateInputError("n_items must be at least 1")
    world = world or WorldSpec()
    return [generate_item(seed, i, world) for i in range(n_items)]


def generate_dataset(seed: int, n_items: int, out_dir: str | os.PathLike,
                     ratios: Sequence[float] = (0.8, 0.1, 0.1), world: WorldSpec | None = None,
                     expand: bool = False) -> dict[str, Path]:
    """Write ``<out_dir>/<split>.jsonl`` for each split; returns the paths."""
    world = world or WorldSpec()
    counts = split_counts(n_items, ratios)
    items = generate_items(seed, n_items, world)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    start = 0
    for split, count in zip(SPLITS, counts):
        path = out / f"{split}.jsonl"
        header = {"format": FORMAT, "version": FORMAT_VERSION, "seed": seed, "split": split,
                  "n_items": count, "frame_shape": [world.frames, world.channels, world.height, world.width],
                  "ratios": list(ratios)}
        write_jsonl(path, header, items[start:start + count], expand)
        paths[split] = path
        start += count
    return paths


def write_jsonl(path, header: dict, items: Sequence[VideoSample], expand: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for item in items:
            fh.write(json.dumps(item.to_json(expand), sort_keys=True) + "\n")


def load_jsonl(path) -> tuple[dict, list[VideoSample]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise IntegrityError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT:
        raise IntegrityError(f"{path}: not a {FORMAT} file")
    if header.get("version") != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported version {header.get('version')}")
    shape = tuple(header.get("frame_shape", (4, 3, 16, 16)))
    items = [VideoSample.from_json(json.loads(ln), shape) for ln in lines[1:]]
    if len(items) != header.get("n_items", len(items)):
        raise IntegrityError(f"{path}: header promises {header['n_items']} items, found {len(items)}")
    return header, items


def load_items(path) -> list[VideoSample]:
    """Load a dataset file, or a bare JSON object / JSON-lines file of items without header."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read().strip()
    if not text:
        raise IntegrityError(f"{path}: empty file")
    first = json.loads(text.splitlines()[0]) if "\n" in text else json.loads(text)
    if isinstance(first, dict) and first.get("format") == FORMAT:
        return load_jsonl(path)[1]
    if "\n" not in text:
        objs = first if isinstance(first, list) else [first]
    else:
        objs = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
    return [VideoSample.from_json(o) for o in objs]


def sentence_corpus(items: Sequence[VideoSample], target: str = "captions",
                    limit: int | None = None) -> list[str]:
    """Distinct reference sentences in first-seen order (the text auto-encoder corpus)."""
    seen: dict[str, None] = {}
    for item in items:
        for s in item.references(target):
            seen.setdefault(s, None)
            if limit is not None and len(seen) >= limit:
                return list(seen)
    return list(seen)
