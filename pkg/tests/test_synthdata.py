"""Procedural corpus: deterministic regeneration, motion that actually moves
the right way (checked against pixel centroids), and the closed tokenizer."""

import numpy as np
import pytest

from dropclip.synthdata import (BOS_ID, COLORS, DIRECTIONS, EOS_ID, MASK_ID,
                                PAD_ID, QUESTION_TYPES, SHAPES, VOCAB,
                                VOCAB_SIZE, DatasetManifest, ManifestError,
                                SceneSpec, TokenizedText, VocabError,
                                caption_for, detokenize, dump_captions,
                                gen_batch, gen_sample, gen_scene,
                                make_manifest, qa_for_scene, read_manifest,
                                render_clip, tokenize, write_manifest)


def _centroid(frame):
    ys, xs, _ = np.nonzero(frame)
    return xs.mean(), ys.mean()


# ---------------------------------------------------------------------------
# rendering

def test_render_is_binary_and_right_color():
    spec = SceneSpec("square", "yellow", "none", 16, 16, 0)
    clip = render_clip(spec, 32, 4)
    assert clip.shape == (4, 32, 32, 3)
    assert set(np.unique(clip)) <= {0.0, 1.0}
    lit = clip[0][clip[0].any(axis=-1)]
    assert (lit == [1.0, 1.0, 0.0]).all()   # yellow = red + green


@pytest.mark.parametrize("direction,axis,sign", [
    ("left", 0, -1), ("right", 0, 1), ("up", 1, -1), ("down", 1, 1)])
def test_motion_moves_centroid(direction, axis, sign):
    spec = SceneSpec("circle", "red", direction, 16, 16, 2)
    clip = render_clip(spec, 32, 4)
    cents = [_centroid(f)[axis] for f in clip]
    deltas = np.diff(cents)
    assert (np.sign(deltas) == sign).all()
    assert np.allclose(np.abs(deltas), 2.0, atol=0.3)   # speed in px/frame


def test_static_clip_frames_identical():
    clip = render_clip(SceneSpec("triangle", "blue", "none", 10, 12, 0), 32, 6)
    assert (clip == clip[0]).all()


def test_shapes_render_distinctly():
    frames = {s: render_clip(SceneSpec(s, "red", "none", 16, 16, 0), 32, 1)[0]
              for s in SHAPES}
    assert not (frames["square"] == frames["circle"]).all()
    assert not (frames["square"] == frames["triangle"]).all()


# ---------------------------------------------------------------------------
# tokenizer

def test_tokenize_round_trip_all_template_captions():
    for color in COLORS:
        for shape in SHAPES:
            for motion in DIRECTIONS + ("none",):
                text = caption_for(SceneSpec(shape, color, motion, 0, 0, 0),
                                   "motion")
                assert detokenize(tokenize(text)) == text


def test_tokenize_layout():
    t = tokenize("a red square moving left", max_len=12)
    ids = t.ids
    assert ids.shape == (12,)
    assert ids[0] == BOS_ID and ids[6] == EOS_ID and (ids[7:] == PAD_ID).all()


def test_tokenize_rejects_unknown_and_overflow():
    with pytest.raises(VocabError):
        tokenize("a purple square")
    with pytest.raises(VocabError):
        tokenize("a red square moving left", max_len=4)


def test_tokenized_text_validation():
    ok = tokenize("a red square")
    TokenizedText(ids=ok.ids)
    bad = ok.ids.copy()
    bad[0] = PAD_ID
    with pytest.raises(VocabError):
        TokenizedText(ids=bad)           # must start with bos
    bad = ok.ids.copy()
    bad[2] = MASK_ID
    with pytest.raises(VocabError):
        TokenizedText(ids=bad)           # raw text never contains mask
    bad = ok.ids.copy()
    bad[-1] = EOS_ID
    with pytest.raises(VocabError):
        TokenizedText(ids=bad)           # a second eos


def test_question_words_never_in_captions():
    question_words = {"what", "color", "is", "it", "which", "direction",
                      "shape", "still"}
    mf = DatasetManifest(split="t", seed=5, count=200)
    for i in range(mf.count):
        caption = caption_for(gen_scene(mf, i), "motion")
        assert not question_words & set(caption.split())


# ---------------------------------------------------------------------------
# manifests and samples

def test_gen_sample_deterministic():
    mf = DatasetManifest(split="train", seed=3, count=10)
    c1, t1 = gen_sample(mf, 4)
    c2, t2 = gen_sample(mf, 4)
    assert (c1.frames == c2.frames).all() and t1 == t2


def test_different_indices_and_seeds_vary():
    mf = DatasetManifest(split="train", seed=3, count=10)
    caps = {gen_sample(mf, i)[1] for i in range(10)}
    assert len(caps) > 1
    mf2 = DatasetManifest(split="train", seed=4, count=10)
    assert any(gen_sample(mf, i)[1] != gen_sample(mf2, i)[1] for i in range(10))


def test_caption_matches_rendered_scene():
    mf = DatasetManifest(split="train", seed=9, count=50)
    for i in range(50):
        spec = gen_scene(mf, i)
        caption = caption_for(spec, "motion")
        assert spec.color in caption and spec.shape in caption
        if spec.motion == "none":
            assert "not moving" in caption
        else:
            assert f"moving {spec.motion}" in caption


def test_static_style_keeps_trajectory_inside_and_sides_honest():
    mf = DatasetManifest(split="train", seed=2, count=100, caption_style="static")
    for i in range(100):
        spec = gen_scene(mf, i)
        frame = render_clip(spec, mf.resolution, 1)[0]
        x, _ = _centroid(frame)
        if spec.side == "left":
            assert x < mf.resolution / 2
        elif spec.side == "right":
            assert x > mf.resolution / 2


def test_moving_shape_stays_in_frame():
    mf = DatasetManifest(split="train", seed=13, count=100)
    for i in range(100):
        clip, _ = gen_sample(mf, i)
        # every frame keeps the full shape visible: pixel count is constant
        counts = [int(f.any(axis=-1).sum()) for f in clip.frames]
        assert len(set(counts)) == 1 and counts[0] > 0


def test_manifest_round_trip(tmp_path):
    mf = make_manifest("val", base_seed=100, count=7, caption_style="static",
                       resolution=16, frames=4)
    assert mf.seed == 101   # split offset convention
    p = tmp_path / "m.mf"
    write_manifest(mf, p)
    assert read_manifest(p) == mf


def test_manifest_validation():
    with pytest.raises(ManifestError):
        DatasetManifest(split="x", seed=0, count=1, caption_style="poetry")
    with pytest.raises(ManifestError):
        DatasetManifest(split="x", seed=0, count=-1)
    with pytest.raises(ManifestError):
        make_manifest("dev", base_seed=0, count=1)
    mf = DatasetManifest(split="x", seed=0, count=3)
    with pytest.raises(IndexError):
        gen_scene(mf, 3)


def test_gen_batch_shapes():
    mf = DatasetManifest(split="train", seed=3, count=10, resolution=16, frames=2)
    clips, ids = gen_batch(mf, [0, 5, 9], max_text_len=12)
    assert clips.shape == (3, 2, 16, 16, 3) and clips.dtype == np.float32
    assert ids.shape == (3, 12) and ids.dtype == np.int64


def test_dump_captions(tmp_path):
    mf = DatasetManifest(split="train", seed=3, count=10)
    p = tmp_path / "caps.txt"
    assert dump_captions(mf, p, limit=4) == 4
    assert len(p.read_text().splitlines()) == 4


def test_qa_answers_follow_scene():
    spec = SceneSpec("circle", "green", "up", 10, 20, 1)
    assert qa_for_scene(spec, "color") == ("what color is the shape", "green")
    assert qa_for_scene(spec, "shape")[1] == "circle"
    assert qa_for_scene(spec, "direction")[1] == "up"
    still = SceneSpec("circle", "green", "none", 10, 20, 0)
    assert qa_for_scene(still, "direction")[1] == "still"
    with pytest.raises(ValueError):
        qa_for_scene(spec, "speed")
    for qtype in QUESTION_TYPES:
        q, _ = qa_for_scene(spec, qtype)
        tokenize(q)   # questions stay inside the vocabulary


def test_vocab_is_closed_and_stable():
    assert VOCAB_SIZE == len(VOCAB) == len(set(VOCAB))
    assert VOCAB[:4] == ("<pad>", "<bos>", "<eos>", "<mask>")
