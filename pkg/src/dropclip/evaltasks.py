"""Downstream evaluation: retrieval, multiple choice, prompted classification,
the VQA feature modes and probe head, masked-token prediction accuracy, and
the drop-ratio efficiency benchmark.

Evaluation always encodes the full video (keep-everything mask, no RNG) and
unmasked text. Ranking is pessimistic about ties: every candidate scoring at
least as high as the ground truth counts ahead of it.

Report helpers format numbers with fixed precision so identical inputs give
byte-identical report files.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor, add, backward, concat, gelu, log_softmax, \
    matmul, mean_axis, scale, select_positions
from .rng import RngStreams, stream_rng
from .masking import full_mask, keep_count
from .params import ParamTree
from .model import (ModelConfig, VisionFeatures, cross_decode, encode_text,
                    encode_video_clips, init_params)
from .objectives import TrainConfig
from .synthdata import (ANSWER_VOCAB, EOS_ID, QUESTION_TYPES, VOCAB,
                        DatasetManifest, caption_for, gen_sample, gen_scene,
                        qa_for_scene, render_clip, tokenize)
from .masking import SPECIAL_ID_LIMIT
from .trainer import AdamState, adam_update, assemble_batch, train_step

VQA_MODES = ("alignment", "fusion", "combined")


# ---------------------------------------------------------------------------
# retrieval metrics

@dataclass(frozen=True)
class SimilarityMatrix:
    """Query-by-candidate scores with the correct column per query."""
    scores: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        gt = np.asarray(self.gt, dtype=np.int64)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "gt", gt)
        if scores.ndim != 2 or scores.shape[0] < 1:
            raise ValueError(f"need a 2-d score matrix, got shape {scores.shape}")
        if not np.isfinite(scores).all():
            raise ValueError("similarity scores must be finite")
        if gt.shape != (scores.shape[0],):
            raise ValueError(f"ground truth shape {gt.shape} does not match "
                             f"{scores.shape[0]} queries")
        if gt.min() < 0 or gt.max() >= scores.shape[1]:
            raise ValueError("ground-truth column out of range")


@dataclass(frozen=True)
class RetrievalResult:
    r1: float    # percentages
    r5: float
    r10: float
    mdr: float   # median rank, 1-based; mean of middle two for even counts
    ranks: np.ndarray


def ranks_of(sim: SimilarityMatrix) -> np.ndarray:
    """1-based rank per query; candidates tying the ground truth count ahead."""
    gt_scores = sim.scores[np.arange(sim.scores.shape[0]), sim.gt]
    return (sim.scores >= gt_scores[:, None]).sum(axis=1).astype(np.int64)


def retrieval_eval(sim: SimilarityMatrix) -> RetrievalResult:
    ranks = ranks_of(sim)
    n = len(ranks)
    pct = lambda k: 100.0 * int((ranks <= k).sum()) / n
    return RetrievalResult(r1=pct(1), r5=pct(5), r10=pct(10),
                           mdr=float(np.median(ranks)), ranks=ranks)


# ---------------------------------------------------------------------------
# full-video encoding (no dropping, no RNG)

def _clip_array(clip) -> np.ndarray:
    return clip.frames if hasattr(clip, "frames") else np.asarray(clip)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def encode_videos_full(tree: ParamTree, cfg: ModelConfig,
                       clips: np.ndarray) -> VisionFeatures:
    masks = [full_mask(cfg.n_patches)] * clips.shape[0]
    return encode_video_clips(tree, cfg, clips.astype(np.float32), masks)


def embed_texts(tree: ParamTree, cfg: ModelConfig, texts: list[str]) -> np.ndarray:
    ids = np.stack([tokenize(t, cfg.max_text_len).ids for t in texts])
    return _unit(encode_text(tree, cfg, ids).pooled.data)


def encode_pairs(tree: ParamTree, cfg: ModelConfig, manifest: DatasetManifest,
                 count: int, chunk: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm embeddings of the manifest's first ``count`` (video, caption)
    pairs, encoded without dropping."""
    vid, txt = [], []
    for lo in range(0, count, chunk):
        idx = range(lo, min(lo + chunk, count))
        pairs = [gen_sample(manifest, i) for i in idx]
        clips = np.stack([c.frames for c, _ in pairs])
        vid.append(encode_videos_full(tree, cfg, clips).pooled.data)
        ids = np.stack([tokenize(cap, cfg.max_text_len).ids for _, cap in pairs])
        txt.append(encode_text(tree, cfg, ids).pooled.data)
    return _unit(np.concatenate(vid)), _unit(np.concatenate(txt))


def retrieval_from_manifest(tree: ParamTree, cfg: ModelConfig,
                            manifest: DatasetManifest,
                            count: int) -> dict[str, RetrievalResult]:
    """Both retrieval directions over aligned pairs; 'v2t' rows are videos,
    't2v' rows are texts."""
    v, t = encode_pairs(tree, cfg, manifest, count)
    gt = np.arange(count)
    return {"v2t": retrieval_eval(SimilarityMatrix(v @ t.T, gt)),
            "t2v": retrieval_eval(SimilarityMatrix(t @ v.T, gt))}


# ---------------------------------------------------------------------------
# zero-shot choice tasks

def multiple_choice(tree: ParamTree, cfg: ModelConfig, clip,
                    captions: list[str]) -> int:
    """Index of the caption most cosine-similar to the video; ties -> lowest."""
    if len(captions) < 2:
        raise ValueError(f"need at least 2 candidate captions, got {len(captions)}")
    v = _unit(encode_videos_full(tree, cfg, _clip_array(clip)[None]).pooled.data)
    sims = (v @ embed_texts(tree, cfg, captions).T)[0]
    return int(np.argmax(sims))


def zero_shot_classify(tree: ParamTree, cfg: ModelConfig, clip,
                       class_names: list[str], templates: list[str]) -> int:
    """Argmax class by mean similarity over prompted templates."""
    if not templates:
        raise ValueError("need at least one prompt template")
    for t in templates:
        if "{}" not in t:
            raise ValueError(f"template {t!r} has no {{}} placeholder")
    v = _unit(encode_videos_full(tree, cfg, _clip_array(clip)[None]).pooled.data)
    prompts = [t.format(name) for name in class_names for t in templates]
    sims = (v @ embed_texts(tree, cfg, prompts).T)[0]
    per_class = sims.reshape(len(class_names), len(templates)).mean(axis=1)
    return int(np.argmax(per_class))


@dataclass(frozen=True)
class McResult:
    accuracy: float
    n: int


def direction_mc_eval(tree: ParamTree, cfg: ModelConfig,
                      manifest: DatasetManifest, count: int,
                      directions: tuple[str, ...] = ("left", "right"),
                      chunk: int = 16) -> McResult:
    """Zero-shot choice among direction captions on clips that move in one of
    ``directions``; scans the manifest until ``count`` such clips are used."""
    cand_specs: list = []
    correct: list[int] = []
    index = 0
    while len(cand_specs) < count:
        if index >= manifest.count:
            raise ValueError(f"manifest has fewer than {count} clips moving in "
                             f"{directions}")
        spec = gen_scene(manifest, index)
        index += 1
        if spec.motion not in directions:
            continue
        cand_specs.append(spec)
        correct.append(directions.index(spec.motion))
    texts = {}
    hits = 0
    for lo in range(0, count, chunk):
        specs = cand_specs[lo:lo + chunk]
        clips = np.stack([render_clip(s, manifest.resolution, manifest.frames)
                          for s in specs])
        v = _unit(encode_videos_full(tree, cfg, clips).pooled.data)
        for j, spec in enumerate(specs):
            caps = [caption_for(dataclasses.replace(spec, motion=d),
                                manifest.caption_style) for d in directions]
            key = tuple(caps)
            if key not in texts:
                texts[key] = embed_texts(tree, cfg, caps)
            sims = v[j] @ texts[key].T
            if int(np.argmax(sims)) == correct[lo + j]:
                hits += 1
    return McResult(accuracy=100.0 * hits / count, n=count)


# ---------------------------------------------------------------------------
# VQA features and probe head

def vqa_feature_batch(tree: ParamTree, cfg: ModelConfig, mode: str,
                      clips: np.ndarray, questions: list[str]) -> np.ndarray:
    """(B, F) feature rows; F = 2P, D_dec, or 2P + D_dec by mode."""
    if mode not in VQA_MODES:
        raise ValueError(f"mode must be one of {VQA_MODES}, got {mode!r}")
    ids = np.stack([tokenize(q, cfg.max_text_len).ids for q in questions])
    vis = encode_videos_full(tree, cfg, clips)
    txt = encode_text(tree, cfg, ids)
    parts = []
    if mode in ("alignment", "combined"):
        parts.append(np.concatenate([vis.pooled.data, txt.pooled.data], axis=1))
    if mode in ("fusion", "combined"):
        if "decoder.in.w" not in tree:
            raise ValueError("fusion features need a decoder, but this "
                             "checkpoint was trained without one")
        _, hidden = cross_decode(tree, cfg, txt, vis, return_hidden=True)
        eos_pos = np.argmax(ids == EOS_ID, axis=1)
        parts.append(hidden.data[np.arange(ids.shape[0]), eos_pos])
    return np.concatenate(parts, axis=1)


def vqa_features(tree: ParamTree, cfg: ModelConfig, mode: str, clip,
                 question: str) -> np.ndarray:
    return vqa_feature_batch(tree, cfg, mode, _clip_array(clip)[None],
                             [question])[0]


def make_qa_set(manifest: DatasetManifest, count: int,
                start: int = 0) -> list[tuple]:
    """(clip, question, answer, question type) tuples, cycling the types."""
    out = []
    for i in range(start, start + count):
        spec = gen_scene(manifest, i)
        qtype = QUESTION_TYPES[i % len(QUESTION_TYPES)]
        question, answer = qa_for_scene(spec, qtype)
        clip = render_clip(spec, manifest.resolution, manifest.frames)
        out.append((clip, question, answer, qtype))
    return out


@dataclass(frozen=True)
class VqaResult:
    mode: str
    accuracy: float                  # top-1 percentage on the test set
    per_type: dict[str, float]
    n_train: int
    n_test: int


def _extract_features(tree, cfg, mode, qa_set, chunk=16) -> np.ndarray:
    rows = []
    for lo in range(0, len(qa_set), chunk):
        part = qa_set[lo:lo + chunk]
        clips = np.stack([c for c, _, _, _ in part])
        rows.append(vqa_feature_batch(tree, cfg, mode, clips,
                                      [q for _, q, _, _ in part]))
    return np.concatenate(rows)


def _answer_ids(qa_set) -> np.ndarray:
    ids = []
    for _, _, answer, _ in qa_set:
        if answer not in ANSWER_VOCAB:
            raise ValueError(f"answer {answer!r} outside the answer vocabulary")
        ids.append(ANSWER_VOCAB.index(answer))
    return np.array(ids, dtype=np.int64)


def vqa_train_eval(tree: ParamTree, cfg: ModelConfig, mode: str,
                   train_set: list, test_set: list, seed: int = 0,
                   epochs: int = 300, lr: float = 1e-2,
                   hidden: int = 64) -> VqaResult:
    """Train a 2-layer MLP over frozen-backbone features, report test top-1.

    Features are standardized with train-split statistics so the three modes
    compete on content, not scale.
    """
    feats_tr = _extract_features(tree, cfg, mode, train_set)
    feats_te = _extract_features(tree, cfg, mode, test_set)
    y_tr, y_te = _answer_ids(train_set), _answer_ids(test_set)
    mu = feats_tr.mean(axis=0)
    sd = np.maximum(feats_tr.std(axis=0), 1e-6)
    x_tr = ((feats_tr - mu) / sd).astype(np.float32)
    x_te = ((feats_te - mu) / sd).astype(np.float32)

    f = x_tr.shape[1]
    rng = stream_rng(seed, "vqa-head")
    head = ParamTree()
    head.add("fc1.w", Tensor((rng.standard_normal((f, hidden)) / np.sqrt(f))
                             .astype(np.float32), requires_grad=True))
    head.add("fc1.b", Tensor(np.zeros(hidden, np.float32), requires_grad=True))
    head.add("fc2.w", Tensor((rng.standard_normal((hidden, len(ANSWER_VOCAB)))
                              / np.sqrt(hidden)).astype(np.float32),
                             requires_grad=True))
    head.add("fc2.b", Tensor(np.zeros(len(ANSWER_VOCAB), np.float32),
                             requires_grad=True))
    opt = AdamState(head)
    adam_cfg = TrainConfig(steps=max(epochs, 2), warmup=0, lr=lr,
                           weight_decay=0.0)

    def logits_of(x: np.ndarray) -> Tensor:
        h = gelu(add(matmul(Tensor(x), head["fc1.w"]), head["fc1.b"]))
        return add(matmul(h, head["fc2.w"]), head["fc2.b"])

    for _ in range(epochs):
        with Tape() as tape:
            logp = log_softmax(logits_of(x_tr), axis=-1)
            loss = scale(mean_axis(select_positions(logp, y_tr)), -1.0)
            head.zero_grads()
            backward(loss, tape)
        adam_update(head, opt, lr, adam_cfg)

    pred = np.argmax(logits_of(x_te).data, axis=1)
    per_type = {}
    for qtype in QUESTION_TYPES:
        sel = np.array([qt == qtype for _, _, _, qt in test_set])
        if sel.any():
            per_type[qtype] = float(100.0 * (pred[sel] == y_te[sel]).mean())
    return VqaResult(mode=mode, accuracy=float(100.0 * (pred == y_te).mean()),
                     per_type=per_type, n_train=len(train_set),
                     n_test=len(test_set))


# ---------------------------------------------------------------------------
# masked-token prediction accuracy

@dataclass(frozen=True)
class MlmResult:
    accuracy: float          # percentage over all masked positions
    prior_accuracy: float    # always predicting the most frequent train token
    n_positions: int
    prior_token: str


def _tile_vision(vis: VisionFeatures, k: int) -> VisionFeatures:
    return VisionFeatures(tokens=concat([vis.tokens] * k, axis=0),
                          pooled=concat([vis.pooled] * k, axis=0),
                          kept=np.repeat(vis.kept, k, axis=0))


def mlm_accuracy(tree: ParamTree, cfg: ModelConfig, manifest: DatasetManifest,
                 count: int, prior_manifest: DatasetManifest,
                 prior_count: int) -> MlmResult:
    """Mask each word position of ``count`` held-out captions in turn and
    score the decoder's argmax against the original token."""
    from .masking import MASK_ID  # re-exported id of the mask token

    freq = np.zeros(len(VOCAB), dtype=np.int64)
    for i in range(prior_count):
        spec = gen_scene(prior_manifest, i)
        ids = tokenize(caption_for(spec, prior_manifest.caption_style),
                       cfg.max_text_len).ids
        for t in ids[ids >= SPECIAL_ID_LIMIT]:
            freq[t] += 1
    prior_id = int(np.argmax(freq))

    hits = prior_hits = total = 0
    for i in range(count):
        clip, caption = gen_sample(manifest, i)
        ids = tokenize(caption, cfg.max_text_len).ids
        positions = np.flatnonzero(ids >= SPECIAL_ID_LIMIT)
        rows = np.tile(ids, (len(positions), 1))
        rows[np.arange(len(positions)), positions] = MASK_ID
        vis = _tile_vision(encode_videos_full(tree, cfg, clip.frames[None]),
                           len(positions))
        txt = encode_text(tree, cfg, rows)
        logits = cross_decode(tree, cfg, txt, vis).data
        pred = np.argmax(logits[np.arange(len(positions)), positions], axis=1)
        hits += int((pred == ids[positions]).sum())
        prior_hits += int((ids[positions] == prior_id).sum())
        total += len(positions)
    return MlmResult(accuracy=100.0 * hits / total,
                     prior_accuracy=100.0 * prior_hits / total,
                     n_positions=total, prior_token=VOCAB[prior_id])


# ---------------------------------------------------------------------------
# efficiency benchmark

@dataclass(frozen=True)
class BenchRow:
    ratio: float
    kept_tokens: int       # kept patch tokens per clip (floor rule)
    mean_step_s: float
    peak_scalars: int      # peak live activation scalars, forward + backward


def bench_drop(mcfg: ModelConfig, tcfg: TrainConfig,
               manifest: DatasetManifest, ratios: list[float],
               steps: int = 3) -> list[BenchRow]:
    """Fixed-step training micro-benchmark per drop ratio, identical seeds.

    Batches come from the data-order stream of the same seed, so every ratio
    trains on identical data; one untimed warmup step precedes timing, and
    activation accounting runs on a separate memory-tracked step.
    """
    if len(ratios) < 2 or not any(r == 0.0 for r in ratios):
        raise ValueError("need at least two ratios including the 0.0 baseline")
    rows = []
    for ratio in ratios:
        cfg_r = dataclasses.replace(tcfg, drop_ratio=ratio)
        tree = init_params(mcfg, cfg_r.seed)
        opt = AdamState(tree)
        rngs = RngStreams(cfg_r.seed)
        batches = [assemble_batch(manifest, mcfg, cfg_r.batch_size, rngs, s)
                   for s in range(steps + 2)]
        train_step(tree, opt, batches[0], mcfg, cfg_r, rngs, 0)  # warmup
        t0 = time.perf_counter()
        for s in range(1, steps + 1):
            train_step(tree, opt, batches[s], mcfg, cfg_r, rngs, s)
        mean_s = (time.perf_counter() - t0) / steps
        with Tape(track_memory=True) as tape:
            train_step(tree, opt, batches[steps + 1], mcfg, cfg_r, rngs,
                       steps + 1)
        rows.append(BenchRow(ratio=ratio,
                             kept_tokens=keep_count(mcfg.n_patches, ratio),
                             mean_step_s=mean_s,
                             peak_scalars=tape.peak_scalars))
    return rows


# ---------------------------------------------------------------------------
# report formatting

def fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def format_table(headers: list[str], rows: list[list]) -> str:
    cells = [[fmt(c) for c in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    def line(parts):
        return "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()
    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(r) for r in cells)
    return "\n".join(out) + "\n"


def record_lines(record_type: str, rows: list[dict]) -> str:
    """One machine-readable line per row: ``<type> key=value ...``."""
    lines = []
    for row in rows:
        parts = [record_type] + [f"{k}={fmt(v)}" for k, v in row.items()]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"
