"""Encoders and decoder: the init-time mode equivalence, invariances that
define the token/index contract, and checkpoint plumbing."""

import dataclasses

import numpy as np
import pytest

from dropclip.model import (ModelConfig, ZERO_INIT_NAMES, cross_decode,
                            encode_text, encode_video, encode_video_clips,
                            init_params, load_checkpoint, load_model_config,
                            param_template, patchify, save_checkpoint,
                            save_model_config, set_text_frozen)
from dropclip.masking import full_mask, sample_drop_mask
from dropclip.params import CkptError
from dropclip.rng import stream_rng
from dropclip.synthdata import EOS_ID, PAD_ID, tokenize


def _clips(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, cfg.frames, cfg.resolution, cfg.resolution, 3)) \
              .astype(np.float32)


# ---------------------------------------------------------------------------
# config and template

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(resolution=30, patch=8)
    with pytest.raises(ValueError):
        ModelConfig(dim=30, vision_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(temporal_mode="both")
    with pytest.raises(ValueError):
        ModelConfig(decoder_layers=-1)
    with pytest.raises(ValueError):
        ModelConfig(max_text_len=2)


def test_patchify_counts_and_layout():
    cfg = ModelConfig(resolution=32, patch=8, frames=8)
    assert cfg.n_patches == 128 and cfg.patches_per_frame == 16
    clip = np.arange(8 * 32 * 32 * 3, dtype=np.float32).reshape(8, 32, 32, 3)
    rows = patchify(clip, 8)
    assert rows.shape == (128, 8 * 8 * 3)
    # first patch row is the top-left 8x8 block of frame 0
    assert (rows[0].reshape(8, 8, 3) == clip[0, :8, :8]).all()
    # patch 16 starts frame 1
    assert (rows[16].reshape(8, 8, 3) == clip[1, :8, :8]).all()
    with pytest.raises(ValueError):
        patchify(clip[:, :30], 8)


def test_template_modes(tiny_cfg):
    names = set(param_template(tiny_cfg))
    assert "vision.temporal.q.w" in names and "vision.pos_temporal" in names
    frame_avg = dataclasses.replace(tiny_cfg, temporal_mode="frame_avg")
    fa_names = set(param_template(frame_avg))
    assert not any(n.startswith("vision.temporal") for n in fa_names)
    assert "vision.pos_temporal" not in fa_names and "vision.video_cls" not in fa_names
    no_dec = dataclasses.replace(tiny_cfg, decoder_layers=0)
    assert not any(n.startswith("decoder.") for n in param_template(no_dec))


def test_init_deterministic_and_zero_rules(tiny_cfg):
    a = init_params(tiny_cfg, seed=5)
    b = init_params(tiny_cfg, seed=5)
    for name, t in a.items():
        assert (t.data == b[name].data).all()
    for name in ZERO_INIT_NAMES:
        assert (a[name].data == 0).all()
    assert (a["decoder.blocks.0.cross.out.w"].data == 0).all()
    assert (a["vision.blocks.0.attn.out.w"].data != 0).any()
    assert (a["vision.ln_post.g"].data == 1).all()
    assert (a["vision.ln_post.b"].data == 0).all()
    c = init_params(tiny_cfg, seed=6)
    assert (a["vision.proj"].data != c["vision.proj"].data).any()


def test_init_value_independent_of_other_params(tiny_cfg):
    # the same name gets the same values even under a different config
    bigger = dataclasses.replace(tiny_cfg, vision_layers=2)
    a = init_params(tiny_cfg, seed=5)
    b = init_params(bigger, seed=5)
    assert (a["vision.proj"].data == b["vision.proj"].data).all()


# ---------------------------------------------------------------------------
# vision encoder contracts

def test_zero_init_mode_equivalence(tiny_cfg, tiny_tree):
    frame_avg = dataclasses.replace(tiny_cfg, temporal_mode="frame_avg")
    tree_f = init_params(frame_avg, seed=7)
    clips = _clips(tiny_cfg, 6)
    masks = [full_mask(tiny_cfg.n_patches)] * 6
    pooled_t = encode_video_clips(tiny_tree, tiny_cfg, clips, masks).pooled.data
    pooled_f = encode_video_clips(tree_f, frame_avg, clips, masks).pooled.data
    assert np.abs(pooled_t - pooled_f).max() < 1e-6


def test_storage_order_invariance(tiny_cfg, tiny_tree):
    clips = _clips(tiny_cfg, 2)
    rows = np.stack([patchify(c, tiny_cfg.patch) for c in clips])
    kept = np.stack([sample_drop_mask(tiny_cfg.n_patches, 0.5,
                                      stream_rng(i, "patch-drop")).kept
                     for i in range(2)])
    base = encode_video(tiny_tree, tiny_cfg,
                        rows[np.arange(2)[:, None], kept], kept)
    perm = np.stack([np.random.default_rng(9 + i).permutation(kept.shape[1])
                     for i in range(2)])
    rows_p = rows[np.arange(2)[:, None], kept][np.arange(2)[:, None], perm]
    kept_p = kept[np.arange(2)[:, None], perm]
    shuffled = encode_video(tiny_tree, tiny_cfg, rows_p, kept_p)
    assert (base.pooled.data == shuffled.pooled.data).all()
    assert (base.tokens.data == shuffled.tokens.data).all()
    assert (base.kept == shuffled.kept).all()


def test_frame_avg_is_frame_permutation_invariant(tiny_cfg):
    frame_avg = dataclasses.replace(tiny_cfg, temporal_mode="frame_avg")
    tree = init_params(frame_avg, seed=1)
    clip = _clips(tiny_cfg, 1)[0]
    flipped = clip[::-1].copy()
    a = encode_video_clips(tree, frame_avg, clip[None],
                           [full_mask(tiny_cfg.n_patches)]).pooled.data
    b = encode_video_clips(tree, frame_avg, flipped[None],
                           [full_mask(tiny_cfg.n_patches)]).pooled.data
    assert (a == b).all()


def test_temporal_mode_sees_frame_order_once_trained(tiny_cfg, tiny_tree):
    # break the zero residual by hand: a trained temporal block reacts to
    # frame permutation while frame_avg cannot
    rng = np.random.default_rng(0)
    tiny_tree["vision.temporal.out.w"].data = \
        rng.standard_normal(tiny_tree["vision.temporal.out.w"].data.shape) \
           .astype(np.float32)
    clip = _clips(tiny_cfg, 1)[0]
    a = encode_video_clips(tiny_tree, tiny_cfg, clip[None],
                           [full_mask(tiny_cfg.n_patches)]).pooled.data
    b = encode_video_clips(tiny_tree, tiny_cfg, clip[::-1].copy()[None],
                           [full_mask(tiny_cfg.n_patches)]).pooled.data
    assert np.abs(a - b).max() > 1e-6


def test_encode_video_errors(tiny_cfg, tiny_tree):
    rows = np.zeros((1, 3, tiny_cfg.patch_dim), dtype=np.float32)
    with pytest.raises(ValueError):
        encode_video(tiny_tree, tiny_cfg, rows, np.array([[0, 0, 1]]))
    with pytest.raises(ValueError):
        encode_video(tiny_tree, tiny_cfg, rows, np.array([[0, 1, 99]]))
    with pytest.raises(ValueError):
        encode_video(tiny_tree, tiny_cfg, rows[:, :0], np.zeros((1, 0), np.int64))
    with pytest.raises(ValueError):
        encode_video_clips(tiny_tree, tiny_cfg, _clips(tiny_cfg, 2),
                           [full_mask(tiny_cfg.n_patches)])


def test_full_mask_matches_manual_full_encode(tiny_cfg, tiny_tree):
    clip = _clips(tiny_cfg, 1)[0]
    via_clips = encode_video_clips(tiny_tree, tiny_cfg, clip[None],
                                   [full_mask(tiny_cfg.n_patches)])
    rows = patchify(clip, tiny_cfg.patch)[None]
    kept = np.arange(tiny_cfg.n_patches)[None]
    direct = encode_video(tiny_tree, tiny_cfg, rows, kept)
    assert (via_clips.pooled.data == direct.pooled.data).all()


# ---------------------------------------------------------------------------
# text encoder contracts

def test_pad_tail_and_eos_pooling(tiny_cfg, tiny_tree):
    short = tokenize("a red square", max_len=8).ids
    long = tokenize("a red square", max_len=12).ids
    a = encode_text(tiny_tree, tiny_cfg, short[None]).pooled.data
    b = encode_text(tiny_tree, tiny_cfg, long[None]).pooled.data
    assert np.allclose(a, b, atol=1e-6)


def test_identical_rows_identical_features(tiny_cfg, tiny_tree):
    ids = np.stack([tokenize("a blue circle moving up").ids] * 2)
    out = encode_text(tiny_tree, tiny_cfg, ids).pooled.data
    assert (out[0] == out[1]).all()


def test_text_errors(tiny_cfg, tiny_tree):
    no_eos = np.full((1, 6), PAD_ID, dtype=np.int64)
    with pytest.raises(ValueError):
        encode_text(tiny_tree, tiny_cfg, no_eos)
    too_long = np.zeros((1, tiny_cfg.max_text_len + 1), dtype=np.int64)
    with pytest.raises(ValueError):
        encode_text(tiny_tree, tiny_cfg, too_long)


def test_set_text_frozen(tiny_tree):
    set_text_frozen(tiny_tree, True)
    assert not tiny_tree["text.proj"].requires_grad
    assert tiny_tree.is_frozen("text.tok_embed")
    assert tiny_tree["vision.proj"].requires_grad
    set_text_frozen(tiny_tree, False)
    assert tiny_tree["text.proj"].requires_grad


# ---------------------------------------------------------------------------
# decoder

def test_decoder_shapes_and_text_only_path(tiny_cfg, tiny_tree):
    ids = np.stack([tokenize("a red square moving left").ids] * 2)
    txt = encode_text(tiny_tree, tiny_cfg, ids)
    vis = encode_video_clips(tiny_tree, tiny_cfg, _clips(tiny_cfg, 2),
                             [full_mask(tiny_cfg.n_patches)] * 2)
    logits = cross_decode(tiny_tree, tiny_cfg, txt, vis)
    assert logits.shape == (2, ids.shape[1], tiny_cfg.vocab_size)
    zeroed = dataclasses.replace(vis, tokens=type(vis.tokens)(
        np.zeros_like(vis.tokens.data)))
    logits0 = cross_decode(tiny_tree, tiny_cfg, txt, zeroed)
    assert np.isfinite(logits0.data).all()
    _, hidden = cross_decode(tiny_tree, tiny_cfg, txt, vis, return_hidden=True)
    assert hidden.shape == (2, ids.shape[1], tiny_cfg.decoder_dim)


def test_decoder_requires_decoder_params(tiny_cfg, tiny_tree):
    no_dec = dataclasses.replace(tiny_cfg, decoder_layers=0)
    tree = init_params(no_dec, seed=0)
    ids = tokenize("a red square").ids[None]
    txt = encode_text(tree, no_dec, ids)
    vis = encode_video_clips(tree, no_dec, _clips(no_dec, 1),
                             [full_mask(no_dec.n_patches)])
    with pytest.raises(ValueError):
        cross_decode(tree, no_dec, txt, vis)


def test_decoder_batch_mismatch(tiny_cfg, tiny_tree):
    txt = encode_text(tiny_tree, tiny_cfg, tokenize("a red square").ids[None])
    vis = encode_video_clips(tiny_tree, tiny_cfg, _clips(tiny_cfg, 2),
                             [full_mask(tiny_cfg.n_patches)] * 2)
    with pytest.raises(ValueError):
        cross_decode(tiny_tree, tiny_cfg, txt, vis)


# ---------------------------------------------------------------------------
# checkpoints and config files

def test_checkpoint_round_trip_and_validation(tiny_cfg, tiny_tree, tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_tree, p)
    again = load_checkpoint(p, tiny_cfg)
    for name, t in tiny_tree.items():
        assert (again[name].data == t.data).all()
    wrong = dataclasses.replace(tiny_cfg, dim=16)
    with pytest.raises(CkptError):
        load_checkpoint(p, wrong)
    frame_avg = dataclasses.replace(tiny_cfg, temporal_mode="frame_avg")
    with pytest.raises(CkptError):
        load_checkpoint(p, frame_avg)


def test_model_config_round_trip(tiny_cfg, tmp_path):
    p = tmp_path / "model.cfg"
    save_model_config(tiny_cfg, p)
    assert load_model_config(p) == tiny_cfg
