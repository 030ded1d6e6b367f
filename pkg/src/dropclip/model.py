"""Dual-encoder video-text model with a cross-attention text decoder.

Vision side: surviving patches (after dropping) are embedded, get the
spatial position of their original grid slot added, and run through a
spatial transformer in which attention never crosses frame boundaries; a
shared learned CLS token per frame collects each frame representation.
Pooling averages the per-frame CLS features. In temporal mode each token
then gets the temporal position of its original frame added — the spatial
tower is frame-blocked, so a per-frame constant added earlier would be
washed out inside it — and a learnable video classification token attends
over the tagged tokens of all frames, its result joining the pooled feature
through a zero-initialized output projection. The temporal heads carry a
learned per-frame logit bias, initialized so paired heads prefer opposite
halves of the clip; together with value slices that start identical within
a pair, the output projection can express late-minus-early feature changes
as a plain linear readout instead of having to discover frame selectivity
from a uniform softmax. The tagged tokens are also what the decoder
cross-attends over, which is how masked-word prediction can see time at
all. At initialization both backbone modes compute exactly the same pooled
function because only that output projection is new to the pooled path,
and it starts at zero.

Text side: a bidirectional pre-LN transformer over padded token rows; PAD
positions are excluded from attention keys, and the sequence embedding is
read at the first EOS position.

The decoder projects text token features into its own width, runs
self-attention over text and cross-attention with video tokens as keys and
values (cross-attention output projections start at zero), and a two-layer
MLP maps each position to vocabulary logits.

Positional information survives patch dropping because each kept patch looks
up the positional entries of its original grid slot, not of its position in
the packed sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .kvformat import dump_kv, load_kv, require_keys
from .params import CkptError, ParamTree, load_arrays, save_arrays
from .rng import stream_rng
from .synthdata import EOS_ID, PAD_ID, VOCAB_SIZE, DEFAULT_MAX_TEXT_LEN
from .tensor import (Tensor, add, concat, gather_rows, gelu, layer_norm, matmul,
                     mean_axis, reshape, scale, select_positions, slice_axis,
                     softmax, transpose)

TEMPORAL_MODES = ("temporal", "frame_avg")


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 32
    patch: int = 8
    frames: int = 8
    dim: int = 64
    vision_layers: int = 4
    vision_heads: int = 4
    text_layers: int = 2
    text_heads: int = 4
    decoder_layers: int = 4
    decoder_dim: int = 64
    decoder_heads: int = 4
    proj_dim: int = 32
    vocab_size: int = VOCAB_SIZE
    max_text_len: int = DEFAULT_MAX_TEXT_LEN
    temporal_mode: str = "temporal"
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.resolution % self.patch != 0:
            raise ValueError(f"resolution {self.resolution} not divisible by patch {self.patch}")
        for dim, heads, what in ((self.dim, self.vision_heads, "vision"),
                                 (self.dim, self.text_heads, "text"),
                                 (self.decoder_dim, self.decoder_heads, "decoder")):
            if dim % heads != 0:
                raise ValueError(f"{what}: dim {dim} not divisible by {heads} heads")
        if self.decoder_layers < 0:
            raise ValueError("decoder_layers must be >= 0 (0 = no decoder)")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ValueError(f"temporal_mode must be one of {TEMPORAL_MODES}")
        if self.max_text_len < 3:
            raise ValueError("max_text_len must fit at least bos, one word, eos")
        if self.frames < 1 or self.vocab_size < 5 or self.proj_dim < 1:
            raise ValueError("frames, vocab_size and proj_dim must be positive")

    @property
    def patches_per_frame(self) -> int:
        return (self.resolution // self.patch) ** 2

    @property
    def n_patches(self) -> int:
        return self.patches_per_frame * self.frames

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3


@dataclass
class VisionFeatures:
    tokens: Tensor      # (B, 1 + kept, dim); video classification token at index 0
    pooled: Tensor      # (B, proj_dim), unnormalized
    kept: np.ndarray    # (B, m) original patch indices, ascending per row


@dataclass
class TextFeatures:
    tokens: Tensor      # (B, L, dim)
    pooled: Tensor      # (B, proj_dim), unnormalized, read at first EOS
    ids: np.ndarray     # (B, L) the input token ids


def patchify(clip: np.ndarray, patch: int) -> np.ndarray:
    """(T, H, W, 3) -> (T * ppf, patch*patch*3), frame-major then row-major."""
    t, h, w, c = clip.shape
    if h % patch or w % patch:
        raise ValueError(f"clip {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = clip.reshape(t, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(t * gh * gw, patch * patch * c))


# ---------------------------------------------------------------------------
# parameter template and initialization

INIT_STD = 0.02
LOGIT_SCALE_INIT = math.log(1.0 / 0.07)


def param_template(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter the config implies."""
    d, dd, v = cfg.dim, cfg.decoder_dim, cfg.vocab_size
    spec: dict[str, tuple] = {}

    def linear(prefix, d_in, d_out):
        spec[prefix + ".w"] = (d_in, d_out)
        spec[prefix + ".b"] = (d_out,)

    def ln(prefix, dim):
        spec[prefix + ".g"] = (dim,)
        spec[prefix + ".b"] = (dim,)

    def block(prefix, dim):
        ln(prefix + ".ln1", dim)
        for part in ("q", "k", "v", "out"):
            linear(f"{prefix}.attn.{part}", dim, dim)
        ln(prefix + ".ln2", dim)
        linear(prefix + ".mlp.fc1", dim, dim * cfg.mlp_ratio)
        linear(prefix + ".mlp.fc2", dim * cfg.mlp_ratio, dim)

    linear("vision.patch_embed", cfg.patch_dim, d)
    spec["vision.cls"] = (1, d)
    spec["vision.pos_spatial"] = (cfg.patches_per_frame + 1, d)
    for i in range(cfg.vision_layers):
        block(f"vision.blocks.{i}", d)
    if cfg.temporal_mode == "temporal":
        spec["vision.video_cls"] = (1, d)
        spec["vision.pos_temporal"] = (cfg.frames, d)
        spec["vision.temporal.frame_bias"] = (cfg.vision_heads, cfg.frames)
        for part in ("q", "k", "v", "out"):
            linear(f"vision.temporal.{part}", d, d)
    ln("vision.ln_post", d)
    spec["vision.proj"] = (d, cfg.proj_dim)

    spec["text.tok_embed"] = (v, d)
    spec["text.pos"] = (cfg.max_text_len, d)
    for i in range(cfg.text_layers):
        block(f"text.blocks.{i}", d)
    ln("text.ln_final", d)
    spec["text.proj"] = (d, cfg.proj_dim)

    if cfg.decoder_layers > 0:   # 0 = decoder ablated away entirely
        linear("decoder.in", d, dd)
        for i in range(cfg.decoder_layers):
            prefix = f"decoder.blocks.{i}"
            block(prefix, dd)
            ln(prefix + ".ln3", dd)
            linear(f"{prefix}.cross.q", dd, dd)
            linear(f"{prefix}.cross.k", d, dd)
            linear(f"{prefix}.cross.v", d, dd)
            linear(f"{prefix}.cross.out", dd, dd)
        ln("decoder.ln_out", dd)
        linear("decoder.head.fc1", dd, dd)
        linear("decoder.head.fc2", dd, v)

    spec["logit_scale"] = ()
    return spec


# zero-initialized so the new modules contribute nothing at step 0
ZERO_INIT_NAMES = ("vision.temporal.out.w",)
ZERO_INIT_SUFFIXES = (".cross.out.w",)

# unit-scale init: these sit next to residual-stream token features of O(1)
# norm, so at the usual 0.02 scale the frame tag (and the video token's
# attention query) would be invisible for most of a desk-scale run; the zero
# out-projection already guarantees neither affects the pooled output at init
UNIT_INIT_NAMES = ("vision.video_cls", "vision.pos_temporal")


def frame_bias_init(heads: int, frames: int, dtype=np.float32) -> np.ndarray:
    """Opposing early/late attention preferences for the temporal heads.

    A fresh softmax attends near-uniformly over every frame, which is exactly
    a frame average, so the gradient toward frame-selective heads is tiny and
    changes over time stay invisible for a whole desk-scale run. Seeding each
    head with a signed late/early-half logit step (paired heads get opposite
    signs, successive pairs get a sharper step) means the output projection
    can read differences between late and early frames from the first step.
    The projection starts at zero, so none of this moves the initial output.
    """
    half = np.where(np.arange(frames) >= frames / 2, 1.0, -1.0)
    if frames == 1:
        half[:] = 0.0
    gains = np.array([(2.0 + 2.0 * (h // 2)) * (1.0 if h % 2 == 0 else -1.0)
                      for h in range(heads)])
    return (gains[:, None] * half[None, :]).astype(dtype)


def _paired_head_value_init(rng, d: int, heads: int, dtype) -> np.ndarray:
    """Value projection whose per-head column slices repeat in pairs, so two
    heads with opposing frame preferences emit comparable features and their
    difference is available to the output projection as a plain linear map."""
    dh = d // heads
    blocks = [rng.standard_normal((d, dh)) * INIT_STD
              for _ in range((heads + 1) // 2)]
    cols = [blocks[h // 2] for h in range(heads)]
    return np.concatenate(cols, axis=1).astype(dtype)


def _init_value(name: str, shape: tuple, seed: int, dtype,
                vision_heads: int | None = None) -> np.ndarray:
    if name == "logit_scale":
        return np.asarray(LOGIT_SCALE_INIT, dtype=dtype)
    if name == "vision.temporal.frame_bias":
        return frame_bias_init(shape[0], shape[1], dtype)
    if name.endswith(".b"):    # every bias and layer-norm shift
        return np.zeros(shape, dtype=dtype)
    if name.endswith(".g"):    # layer-norm gain
        return np.ones(shape, dtype=dtype)
    if name in ZERO_INIT_NAMES or any(name.endswith(s) for s in ZERO_INIT_SUFFIXES):
        return np.zeros(shape, dtype=dtype)
    rng = stream_rng(seed, "init:" + name)
    if name == "vision.temporal.v.w" and vision_heads is not None:
        return _paired_head_value_init(rng, shape[0], vision_heads, dtype)
    std = 1.0 if name in UNIT_INIT_NAMES else INIT_STD
    return (rng.standard_normal(shape) * std).astype(dtype)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamTree:
    """Build the parameter tree; every array is keyed by its own name, so a
    value never depends on creation order or on which other parameters exist."""
    tree = ParamTree()
    for name, shape in param_template(cfg).items():
        tree.add(name, Tensor(_init_value(name, shape, seed, dtype,
                                          vision_heads=cfg.vision_heads),
                              requires_grad=True))
    return tree


def set_text_frozen(tree: ParamTree, frozen: bool = True) -> None:
    """Freeze or unfreeze the whole text encoder (embeddings through proj)."""
    tree.frozen_prefixes = ("text",) if frozen else ()
    for name, t in tree.items():
        if name.startswith("text."):
            t.requires_grad = not frozen


def save_checkpoint(tree: ParamTree, path) -> None:
    save_arrays(path, tree.arrays())


def load_checkpoint(path, cfg: ModelConfig | None = None) -> ParamTree:
    """Read a checkpoint into a fresh tree; with a config, validate names/shapes."""
    arrays = load_arrays(path)
    if cfg is not None:
        template = param_template(cfg)
        if set(arrays) != set(template):
            missing = sorted(set(template) - set(arrays))
            extra = sorted(set(arrays) - set(template))
            raise CkptError(f"{path}: names differ from config: missing {missing}, "
                            f"unexpected {extra}")
        for name, shape in template.items():
            if arrays[name].shape != shape:
                raise CkptError(f"{path}: {name} has shape {arrays[name].shape}, "
                                f"config implies {shape}")
    tree = ParamTree()
    for name in sorted(arrays):
        tree.add(name, Tensor(arrays[name].copy(), requires_grad=True))
    return tree


def save_model_config(cfg: ModelConfig, path) -> None:
    dump_kv(path, "MODELCFG", {f.name: str(getattr(cfg, f.name)) for f in fields(cfg)})


def load_model_config(path) -> ModelConfig:
    pairs = load_kv(path, "MODELCFG")
    names = [f.name for f in fields(ModelConfig)]
    require_keys(pairs, names, path)
    kwargs = {}
    for f in fields(ModelConfig):
        raw = pairs[f.name]
        kwargs[f.name] = raw if f.type == "str" else int(raw)
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# transformer pieces

def _linear(p: ParamTree, prefix: str, x: Tensor) -> Tensor:
    return add(matmul(x, p[prefix + ".w"]), p[prefix + ".b"])


def _ln(p: ParamTree, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, p[prefix + ".g"], p[prefix + ".b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    return transpose(reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def _join_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def _attention(p: ParamTree, prefix: str, xq: Tensor, xkv: Tensor,
               heads: int, mask, logit_bias: Tensor | None = None) -> Tensor:
    """Multi-head attention; mask is a boolean keep-mask broadcastable to
    (B, heads, Lq, Lk), or None for full attention. logit_bias, if given,
    is added to the pre-softmax scores with the same broadcasting."""
    q = _split_heads(_linear(p, prefix + ".q", xq), heads)
    k = _split_heads(_linear(p, prefix + ".k", xkv), heads)
    v = _split_heads(_linear(p, prefix + ".v", xkv), heads)
    dh = q.shape[-1]
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if logit_bias is not None:
        scores = add(scores, logit_bias)
    attn = softmax(scores, axis=-1, mask=mask)
    return _linear(p, prefix + ".out", _join_heads(matmul(attn, v)))


def _mlp(p: ParamTree, prefix: str, x: Tensor) -> Tensor:
    return _linear(p, prefix + ".fc2", gelu(_linear(p, prefix + ".fc1", x)))


def _encoder_block(p: ParamTree, prefix: str, x: Tensor, heads: int, mask) -> Tensor:
    h = _ln(p, prefix + ".ln1", x)
    x = add(x, _attention(p, prefix + ".attn", h, h, heads, mask))
    return add(x, _mlp(p, prefix + ".mlp", _ln(p, prefix + ".ln2", x)))


# ---------------------------------------------------------------------------
# encoders

def _canonical_kept(tokens: np.ndarray, kept: np.ndarray, n: int):
    """Sort index records ascending and reorder token rows to match."""
    if kept.ndim != 2 or tokens.shape[:2] != kept.shape:
        raise ValueError(f"tokens {tokens.shape} do not pair with records {kept.shape}")
    if kept.shape[1] == 0:
        raise ValueError("empty kept set")
    if kept.min() < 0 or kept.max() >= n:
        raise ValueError(f"kept index out of range for {n} patches")
    order = np.argsort(kept, axis=1, kind="stable")
    rows = np.arange(kept.shape[0])[:, None]
    kept = kept[rows, order]
    if (np.diff(kept, axis=1) == 0).any():
        raise ValueError("duplicate kept indices")
    return tokens[rows, order], kept


def encode_video(p: ParamTree, cfg: ModelConfig, tokens: np.ndarray,
                 kept: np.ndarray) -> VisionFeatures:
    """Encode kept patch tokens (B, m, patch_dim) with index records (B, m).

    Output depends only on (row values, index records), not on storage order:
    rows are canonicalized to ascending index order first.
    """
    tokens = np.asarray(tokens)
    kept = np.asarray(kept, dtype=np.int64)
    if tokens.ndim != 3 or tokens.shape[2] != cfg.patch_dim:
        raise ValueError(f"patch tokens {tokens.shape} do not match patch dim "
                         f"{cfg.patch_dim}")
    tokens, kept = _canonical_kept(tokens, kept, cfg.n_patches)
    b, m = kept.shape
    t, ppf = cfg.frames, cfg.patches_per_frame
    dtype = p["vision.patch_embed.w"].dtype

    frame_of_kept = kept // ppf
    x = _linear(p, "vision.patch_embed", Tensor(tokens.astype(dtype)))
    x = add(x, gather_rows(p["vision.pos_spatial"], kept % ppf + 1))
    zeros_bt = np.zeros((b, t), dtype=np.int64)
    cls = gather_rows(p["vision.cls"], zeros_bt)
    cls = add(cls, gather_rows(p["vision.pos_spatial"], zeros_bt))

    seq = concat([cls, x], axis=1)                     # (b, t + m, d)
    frame_of = np.concatenate([np.broadcast_to(np.arange(t), (b, t)), frame_of_kept],
                              axis=1)
    same_frame = frame_of[:, None, :, None] == frame_of[:, None, None, :]
    for i in range(cfg.vision_layers):
        seq = _encoder_block(p, f"vision.blocks.{i}", seq, cfg.vision_heads, same_frame)

    frame_cls = slice_axis(seq, 1, 0, t)               # (b, t, d)
    patch_tok = slice_axis(seq, 1, t, t + m)           # (b, m, d)
    video_cls = mean_axis(frame_cls, axis=1, keepdims=True)   # (b, 1, d)

    if cfg.temporal_mode == "temporal":
        patch_tok = add(patch_tok, gather_rows(p["vision.pos_temporal"],
                                               frame_of_kept))
        query = gather_rows(p["vision.video_cls"], np.zeros((b, 1), dtype=np.int64))
        per_tok = gather_rows(transpose(p["vision.temporal.frame_bias"], (1, 0)),
                              frame_of_kept)              # (b, m, heads)
        bias = reshape(transpose(per_tok, (0, 2, 1)),
                       (b, cfg.vision_heads, 1, m))
        attended = _attention(p, "vision.temporal", query, patch_tok,
                              cfg.vision_heads, None, logit_bias=bias)
        video_cls = add(video_cls, attended)

    tokens_out = concat([video_cls, patch_tok], axis=1)
    pooled = matmul(_ln(p, "vision.ln_post", reshape(video_cls, (b, cfg.dim))),
                    p["vision.proj"])
    return VisionFeatures(tokens=tokens_out, pooled=pooled, kept=kept)


def encode_video_clips(p: ParamTree, cfg: ModelConfig, clips: np.ndarray,
                       masks) -> VisionFeatures:
    """Convenience: patchify a clip batch and drop per-clip before encoding."""
    from .masking import apply_drop
    if clips.shape[1:] != (cfg.frames, cfg.resolution, cfg.resolution, 3):
        raise ValueError(f"clip batch shape {clips.shape} does not match config")
    if len(masks) != clips.shape[0]:
        raise ValueError(f"{clips.shape[0]} clips but {len(masks)} drop masks")
    counts = {len(m.kept) for m in masks}
    if len(counts) != 1:
        raise ValueError(f"masks keep differing patch counts: {sorted(counts)}")
    rows, recs = [], []
    for clip, mask in zip(clips, masks):
        r, k = apply_drop(patchify(clip, cfg.patch), mask)
        rows.append(r)
        recs.append(k)
    return encode_video(p, cfg, np.stack(rows), np.stack(recs))


def encode_text(p: ParamTree, cfg: ModelConfig, ids: np.ndarray) -> TextFeatures:
    """Encode padded token rows; every row must contain an EOS token."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] > cfg.max_text_len:
        raise ValueError(f"ids shape {ids.shape} incompatible with max_text_len "
                         f"{cfg.max_text_len}")
    if not (ids == EOS_ID).any(axis=1).all():
        raise ValueError("a text row has no eos token")
    x = gather_rows(p["text.tok_embed"], ids)
    x = add(x, slice_axis(p["text.pos"], 0, 0, ids.shape[1]))
    key_ok = (ids != PAD_ID)[:, None, None, :]
    for i in range(cfg.text_layers):
        x = _encoder_block(p, f"text.blocks.{i}", x, cfg.text_heads, key_ok)
    tokens = _ln(p, "text.ln_final", x)
    eos_pos = np.argmax(ids == EOS_ID, axis=1)
    pooled = matmul(select_positions(tokens, eos_pos), p["text.proj"])
    return TextFeatures(tokens=tokens, pooled=pooled, ids=ids)


def cross_decode(p: ParamTree, cfg: ModelConfig, text: TextFeatures,
                 vision: VisionFeatures, return_hidden: bool = False):
    """Vocabulary logits (B, L, V) from text queries over video tokens.

    With ``return_hidden`` also returns the final pre-head features (B, L,
    decoder_dim) used by the fusion feature mode.
    """
    if cfg.decoder_layers == 0 or "decoder.in.w" not in p:
        raise ValueError("model has no decoder")
    if text.tokens.shape[0] != vision.tokens.shape[0]:
        raise ValueError("text and vision batches differ")
    x = _linear(p, "decoder.in", text.tokens)
    self_mask = (text.ids != PAD_ID)[:, None, None, :]
    for i in range(cfg.decoder_layers):
        prefix = f"decoder.blocks.{i}"
        h = _ln(p, prefix + ".ln1", x)
        x = add(x, _attention(p, prefix + ".attn", h, h, cfg.decoder_heads, self_mask))
        x = add(x, _attention(p, prefix + ".cross", _ln(p, prefix + ".ln2", x),
                              vision.tokens, cfg.decoder_heads, None))
        x = add(x, _mlp(p, prefix + ".mlp", _ln(p, prefix + ".ln3", x)))
    hidden = _ln(p, "decoder.ln_out", x)
    logits = _linear(p, "decoder.head.fc2", gelu(_linear(p, "decoder.head.fc1", hidden)))
    return (logits, hidden) if return_hidden else logits
