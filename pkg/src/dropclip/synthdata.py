"""Procedural video-text corpus: moving colored shapes with templated captions.

Every sample is a pure function of (manifest seed, index), so datasets are
never persisted; regenerating any split is bit-identical. Clips are hard
edged rasterizations (no anti-aliasing) with integer per-frame motion, so
pixel values are exactly 0 or 1 per channel.

Two caption styles exist. ``motion`` pairs a moving clip with
"a {color} {shape} moving {direction}" (or "... not moving"). ``static``
replicates a single frame and captions position instead, which puts every
vocabulary word, including the direction words, into the text corpus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kvformat import dump_kv, load_kv, require_keys
from .rng import stream_rng

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
DIRECTIONS = ("left", "right", "up", "down")
MOTIONS = DIRECTIONS + ("none",)

_COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}

# id 0..3 are reserved specials; words get 4..N-1 in sorted order
PAD_ID, BOS_ID, EOS_ID, MASK_ID = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<mask>")

WORDS = tuple(sorted({
    "a", "not", "moving", "on", "the", "side",
    *COLORS, *SHAPES, *DIRECTIONS,
    # question and answer words for the QA tasks
    "what", "color", "is", "it", "which", "direction", "shape", "still",
}))

VOCAB = SPECIALS + WORDS
VOCAB_SIZE = len(VOCAB)
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

ANSWER_VOCAB = COLORS + SHAPES + DIRECTIONS + ("still",)

QUESTION_TYPES = ("color", "shape", "direction")
_QUESTION_TEXT = {
    "color": "what color is the shape",
    "shape": "what shape is it",
    "direction": "which direction is it moving",
}

DEFAULT_RESOLUTION = 32
DEFAULT_FRAMES = 8
DEFAULT_MAX_TEXT_LEN = 12
_SPEEDS = (1, 2, 3)


class VocabError(ValueError):
    """A word outside the closed-world vocabulary."""


class ManifestError(ValueError):
    """Invalid or inconsistent dataset manifest."""


# ---------------------------------------------------------------------------
# scenes and rendering

@dataclass(frozen=True)
class VideoClip:
    """Rendered frames (T, H, W, 3), float32 values in [0, 1]."""
    frames: np.ndarray

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[3] != 3 or f.shape[0] < 1:
            raise ValueError(f"clip shape {f.shape} is not (T, H, W, 3)")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    motion: str          # one of MOTIONS; "none" for static content
    x: int               # start center, pixels
    y: int
    speed: int           # pixels per frame, 0 iff motion == "none"
    side: str = ""       # static style only: which side the shape sits on


_MOTION_DXY = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1), "none": (0, 0)}


def shape_radius(resolution: int) -> int:
    return max(2, resolution // 6)


def _shape_mask(shape: str, xx, yy, cx: int, cy: int, r: int):
    if shape == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "triangle":
        return (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) * 2 <= (yy - cy + r))
    raise ValueError(f"unknown shape {shape!r}")


def render_clip(spec: SceneSpec, resolution: int, frames: int) -> np.ndarray:
    """Rasterize a scene to (frames, H, W, 3) float32 in {0, 1}."""
    h = w = resolution
    r = shape_radius(resolution)
    rgb = np.array(_COLOR_RGB[spec.color], dtype=np.float32)
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = _MOTION_DXY[spec.motion]
    clip = np.zeros((frames, h, w, 3), dtype=np.float32)
    if spec.motion == "none":
        frame = np.zeros((h, w, 3), dtype=np.float32)
        frame[_shape_mask(spec.shape, xx, yy, spec.x, spec.y, r)] = rgb
        for t in range(frames):
            clip[t] = frame
        return clip
    for t in range(frames):
        cx = spec.x + t * spec.speed * dx
        cy = spec.y + t * spec.speed * dy
        clip[t][_shape_mask(spec.shape, xx, yy, cx, cy, r)] = rgb
    return clip


def _sample_scene(rng: np.random.Generator, resolution: int, frames: int, style: str) -> SceneSpec:
    r = shape_radius(resolution)
    lo, hi = r, resolution - 1 - r
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = COLORS[rng.integers(len(COLORS))]
    if style == "static":
        if rng.random() < 0.2:
            x = int(rng.integers(lo, hi + 1))
            y = int(rng.integers(lo, hi + 1))
            return SceneSpec(shape, color, "none", x, y, 0)
        side = DIRECTIONS[rng.integers(len(DIRECTIONS))]
        mid = resolution // 2
        x_rng = {"left": (lo, mid - 2), "right": (mid + 1, hi)}.get(side, (lo, hi))
        y_rng = {"up": (lo, mid - 2), "down": (mid + 1, hi)}.get(side, (lo, hi))
        x = int(rng.integers(x_rng[0], x_rng[1] + 1))
        y = int(rng.integers(y_rng[0], y_rng[1] + 1))
        return SceneSpec(shape, color, "none", x, y, 0, side=side)
    motion = MOTIONS[rng.integers(len(MOTIONS))]
    if motion == "none":
        x = int(rng.integers(lo, hi + 1))
        y = int(rng.integers(lo, hi + 1))
        return SceneSpec(shape, color, "none", x, y, 0)
    for _ in range(64):
        speed = int(_SPEEDS[rng.integers(len(_SPEEDS))])
        travel = (frames - 1) * speed
        dx, dy = _MOTION_DXY[motion]
        # start range keeping the whole trajectory inside the frame
        x_lo, x_hi = (lo + travel, hi) if dx < 0 else (lo, hi - travel * dx)
        y_lo, y_hi = (lo + travel, hi) if dy < 0 else (lo, hi - travel * dy)
        if x_lo > x_hi or y_lo > y_hi:
            continue  # infeasible at this speed, resample
        x = int(rng.integers(x_lo, x_hi + 1))
        y = int(rng.integers(y_lo, y_hi + 1))
        return SceneSpec(shape, color, motion, x, y, speed)
    raise ManifestError(f"no feasible trajectory at resolution {resolution}, frames {frames}")


def caption_for(spec: SceneSpec, style: str) -> str:
    if style == "static":
        if spec.side:
            return f"a {spec.color} {spec.shape} on the {spec.side} side"
        return f"a {spec.color} {spec.shape} not moving"
    if spec.motion == "none":
        return f"a {spec.color} {spec.shape} not moving"
    return f"a {spec.color} {spec.shape} moving {spec.motion}"


# ---------------------------------------------------------------------------
# tokenizer

@dataclass(frozen=True)
class TokenizedText:
    """A fixed-length padded id row: BOS, words, EOS, PAD fill."""
    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        if ids.ndim != 1 or len(ids) < 2 or ids[0] != BOS_ID:
            raise VocabError(f"token row must start with bos, got {ids!r}")
        if ids.min() < 0 or ids.max() >= VOCAB_SIZE:
            raise VocabError("token id out of vocabulary range")
        eos = np.flatnonzero(ids == EOS_ID)
        if len(eos) != 1:
            raise VocabError(f"expected exactly one eos, found {len(eos)}")
        if (ids[eos[0] + 1:] != PAD_ID).any():
            raise VocabError("non-pad tokens after eos")
        if (ids == MASK_ID).any():
            raise VocabError("mask token present in raw text")


def tokenize(text: str, max_len: int = DEFAULT_MAX_TEXT_LEN) -> TokenizedText:
    """Lowercase whitespace tokenization into a fixed-length padded id row."""
    words = text.lower().split()
    ids = [BOS_ID]
    for w in words:
        if w not in _WORD_TO_ID or w in SPECIALS:
            raise VocabError(f"word {w!r} not in vocabulary")
        ids.append(_WORD_TO_ID[w])
    ids.append(EOS_ID)
    if len(ids) > max_len:
        raise VocabError(f"text needs {len(ids)} tokens, max is {max_len}: {text!r}")
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return TokenizedText(ids=np.array(ids, dtype=np.int64))


def detokenize(tokens) -> str:
    ids = tokens.ids if isinstance(tokens, TokenizedText) else tokens
    words = []
    for i in np.asarray(ids).tolist():
        if i == BOS_ID or i == PAD_ID:
            continue
        if i == EOS_ID:
            break
        if not 0 <= i < VOCAB_SIZE:
            raise VocabError(f"token id {i} out of range")
        words.append(VOCAB[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# manifests and sample generation

@dataclass(frozen=True)
class DatasetManifest:
    split: str
    seed: int
    count: int
    resolution: int = DEFAULT_RESOLUTION
    frames: int = DEFAULT_FRAMES
    caption_style: str = "motion"   # "static" for the stage-0 corpus
    vocab: tuple = VOCAB

    def __post_init__(self):
        if self.caption_style not in ("static", "motion"):
            raise ManifestError(f"unknown caption style {self.caption_style!r}")
        if self.count < 0 or self.frames < 1:
            raise ManifestError("count must be >= 0 and frames >= 1")


def write_manifest(manifest: DatasetManifest, path) -> None:
    dump_kv(path, "MANIFEST", {
        "split": manifest.split,
        "seed": str(manifest.seed),
        "count": str(manifest.count),
        "resolution": str(manifest.resolution),
        "frames": str(manifest.frames),
        "caption_style": manifest.caption_style,
        "vocab": " ".join(manifest.vocab),
    })


def read_manifest(path) -> DatasetManifest:
    pairs = load_kv(path, "MANIFEST")
    require_keys(pairs, ["split", "seed", "count", "resolution", "frames",
                         "caption_style", "vocab"], path)
    return DatasetManifest(
        split=pairs["split"],
        seed=int(pairs["seed"]),
        count=int(pairs["count"]),
        resolution=int(pairs["resolution"]),
        frames=int(pairs["frames"]),
        caption_style=pairs["caption_style"],
        vocab=tuple(pairs["vocab"].split()),
    )


def gen_scene(manifest: DatasetManifest, index: int) -> SceneSpec:
    if not 0 <= index < manifest.count:
        raise IndexError(f"sample index {index} out of range for count {manifest.count}")
    rng = stream_rng(manifest.seed, "synthdata-sample", index)
    return _sample_scene(rng, manifest.resolution, manifest.frames, manifest.caption_style)


def gen_sample(manifest: DatasetManifest, index: int) -> tuple[VideoClip, str]:
    """Deterministic (clip, caption) for one sample index."""
    spec = gen_scene(manifest, index)
    clip = render_clip(spec, manifest.resolution, manifest.frames)
    return VideoClip(frames=clip), caption_for(spec, manifest.caption_style)


def gen_batch(manifest: DatasetManifest, indices, max_text_len: int = DEFAULT_MAX_TEXT_LEN):
    """Stack samples: (B, T, H, W, 3) float32 clips and (B, L) token ids."""
    clips, ids = [], []
    for i in indices:
        clip, caption = gen_sample(manifest, int(i))
        clips.append(clip.frames)
        ids.append(tokenize(caption, max_text_len).ids)
    return np.stack(clips), np.stack(ids)


SPLIT_SEED_OFFSETS = {"train": 0, "val": 1, "test": 2}


def make_manifest(split: str, base_seed: int, count: int,
                  caption_style: str = "motion", resolution: int = DEFAULT_RESOLUTION,
                  frames: int = DEFAULT_FRAMES) -> DatasetManifest:
    """Manifest with the split-seed convention train/val/test = seed+0/1/2."""
    if split not in SPLIT_SEED_OFFSETS:
        raise ManifestError(f"unknown split {split!r}")
    return DatasetManifest(split=split, seed=base_seed + SPLIT_SEED_OFFSETS[split],
                           count=count, resolution=resolution, frames=frames,
                           caption_style=caption_style)


def dump_captions(manifest: DatasetManifest, path, limit: int | None = None) -> int:
    """Write one caption per line for inspection; returns line count."""
    n = manifest.count if limit is None else min(limit, manifest.count)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(n):
            spec = gen_scene(manifest, i)
            fh.write(caption_for(spec, manifest.caption_style) + "\n")
    return n


# ---------------------------------------------------------------------------
# question answering

def qa_for_scene(spec: SceneSpec, question_type: str) -> tuple[str, str]:
    """(question text, answer word) for a scene."""
    if question_type not in QUESTION_TYPES:
        raise ValueError(f"unknown question type {question_type!r}")
    question = _QUESTION_TEXT[question_type]
    if question_type == "color":
        answer = spec.color
    elif question_type == "shape":
        answer = spec.shape
    else:
        answer = spec.motion if spec.motion != "none" else "still"
    return question, answer
