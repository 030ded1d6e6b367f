import re

import numpy as np
import pytest

from dropclip.model import init_params, set_text_frozen, load_model_config
from dropclip.objectives import TrainConfig
from dropclip.params import arrays_digest, load_arrays
from dropclip.rng import RngStreams
from dropclip.trainer import (LOGIT_SCALE_MAX, AdamState, adam_update,
                              assemble_batch, load_state, load_train_config,
                              run_training, save_state, save_train_config,
                              train_step)
from dropclip.wiseft import classic_wise_ft


def small_tcfg(**kw):
    base = dict(steps=4, batch_size=4, lr=1e-3, warmup=1, drop_ratio=0.5,
                mask_ratio=0.25, epoch_steps=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def run_steps(tree, mcfg, tcfg, manifest, n_steps):
    rngs = RngStreams(tcfg.seed)
    opt = AdamState(tree)
    lbs = []
    for step in range(n_steps):
        batch = assemble_batch(manifest, mcfg, tcfg.batch_size, rngs, step)
        _, lb = train_step(tree, opt, batch, mcfg, tcfg, rngs, step)
        lbs.append(lb)
    return opt, lbs


def test_train_step_deterministic(tiny_cfg, tiny_manifest):
    tcfg = small_tcfg()
    digests = []
    for _ in range(2):
        tree = init_params(tiny_cfg, 7)
        run_steps(tree, tiny_cfg, tcfg, tiny_manifest, 3)
        digests.append(arrays_digest(tree.arrays()))
    assert digests[0] == digests[1]


def test_train_step_updates_params(tiny_cfg, tiny_manifest):
    tree = init_params(tiny_cfg, 7)
    before = arrays_digest(tree.arrays())
    _, lbs = run_steps(tree, tiny_cfg, small_tcfg(), tiny_manifest, 2)
    assert arrays_digest(tree.arrays()) != before
    for lb in lbs:
        assert np.isfinite(lb.total)
        assert lb.total == pytest.approx(lb.l_con + lb.l_mask)


def test_frozen_text_bit_identical(tiny_cfg, tiny_manifest):
    tree = init_params(tiny_cfg, 7)
    set_text_frozen(tree)
    text_before = {n: a.copy() for n, a in tree.arrays().items()
                   if n.startswith("text.")}
    opt, _ = run_steps(tree, tiny_cfg, small_tcfg(freeze_text=True),
                       tiny_manifest, 3)
    for n, a in text_before.items():
        assert (tree[n].data == a).all(), n
        assert n not in opt.m
    # the rest did move
    assert not (tree["vision.proj"].data
                == init_params(tiny_cfg, 7)["vision.proj"].data).all()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises(tiny_cfg, tiny_manifest):
    tree = init_params(tiny_cfg, 7)
    tree["vision.proj"].data[:] = np.inf
    rngs = RngStreams(5)
    opt = AdamState(tree)
    batch = assemble_batch(tiny_manifest, tiny_cfg, 4, rngs, 0)
    with pytest.raises(FloatingPointError):
        train_step(tree, opt, batch, tiny_cfg, small_tcfg(), rngs, 0)


def test_adam_decay_applies_without_grads(tiny_cfg):
    tcfg = small_tcfg(weight_decay=0.2)
    tree = init_params(tiny_cfg, 7)
    tree.zero_grads()  # every grad is None
    w_before = tree["vision.proj"].data.copy()
    opt = AdamState(tree)
    adam_update(tree, opt, 1e-2, tcfg)
    # zero moments -> zero Adam step, only the decoupled decay moves weights
    np.testing.assert_allclose(tree["vision.proj"].data,
                               w_before * (1.0 - 1e-2 * 0.2), rtol=1e-6)
    assert opt.t == 1


def test_logit_scale_clipped(tiny_cfg):
    tree = init_params(tiny_cfg, 7)
    tree["logit_scale"].data = np.float32(10.0)
    tree.zero_grads()
    adam_update(tree, AdamState(tree), 1e-3, small_tcfg())
    assert tree["logit_scale"].data <= LOGIT_SCALE_MAX + 1e-7


def test_state_roundtrip(tiny_cfg, tiny_manifest, tmp_path):
    tree = init_params(tiny_cfg, 7)
    opt, _ = run_steps(tree, tiny_cfg, small_tcfg(), tiny_manifest, 2)
    save_state(tmp_path / "state.ckpt", tree, opt, 2)

    tree2 = init_params(tiny_cfg, 99)
    opt2 = AdamState(tree2)
    step = load_state(tmp_path / "state.ckpt", tree2, opt2)
    assert step == 2
    assert arrays_digest(tree2.arrays()) == arrays_digest(tree.arrays())
    assert opt2.t == opt.t
    for n in opt.m:
        assert (opt2.m[n] == opt.m[n]).all()
        assert (opt2.v[n] == opt.v[n]).all()


def test_state_must_cover_trainables(tiny_cfg, tiny_manifest, tmp_path):
    tree = init_params(tiny_cfg, 7)
    set_text_frozen(tree)
    save_state(tmp_path / "state.ckpt", tree, AdamState(tree), 0)
    full = init_params(tiny_cfg, 7)  # nothing frozen -> more trainables
    with pytest.raises(ValueError, match="trainable"):
        load_state(tmp_path / "state.ckpt", full, AdamState(full))


def test_assemble_batch_deterministic(tiny_cfg, tiny_manifest):
    a = assemble_batch(tiny_manifest, tiny_cfg, 6, RngStreams(3), 5)
    b = assemble_batch(tiny_manifest, tiny_cfg, 6, RngStreams(3), 5)
    for (ca, ta), (cb, tb) in zip(a, b):
        assert (ca.frames == cb.frames).all()
        assert (ta.ids == tb.ids).all()
    c = assemble_batch(tiny_manifest, tiny_cfg, 6, RngStreams(3), 6)
    assert any((ta.ids != tc.ids).any() for (_, ta), (_, tc) in zip(a, c))


def test_assemble_batch_needs_enough_samples(tiny_cfg, tiny_manifest):
    with pytest.raises(ValueError, match="batch"):
        assemble_batch(tiny_manifest, tiny_cfg, tiny_manifest.count + 1,
                       RngStreams(3), 0)


def test_train_config_roundtrip(tmp_path):
    cfg = small_tcfg(freeze_text=True, wise_enabled=True, lr=2.5e-4)
    save_train_config(cfg, tmp_path / "train.cfg")
    assert load_train_config(tmp_path / "train.cfg") == cfg


def test_run_training_artifacts(tiny_cfg, tiny_manifest, tmp_path):
    tcfg = small_tcfg()
    series = run_training(tiny_cfg, tcfg, tiny_manifest, tmp_path)
    assert len(series) == 3  # init + one per epoch
    for name in ("ckpt_0.ckpt", "ckpt_1.ckpt", "ckpt_2.ckpt", "final.ckpt",
                 "state.ckpt", "model.cfg", "train.cfg", "metrics.txt"):
        assert (tmp_path / name).exists(), name
    lines = (tmp_path / "metrics.txt").read_text().splitlines()
    assert len(lines) == tcfg.steps
    pat = re.compile(r"^step=(\d+) lr=[0-9.e+-]+ l_con=[0-9.e+-]+ "
                     r"l_mask=[0-9.e+-]+$")
    for i, line in enumerate(lines):
        m = pat.match(line)
        assert m and int(m.group(1)) == i, line
    assert load_model_config(tmp_path / "model.cfg") == tiny_cfg
    assert (arrays_digest(load_arrays(tmp_path / "final.ckpt"))
            == arrays_digest(series.get(2)))


def test_run_training_resume_bitwise(tiny_cfg, tiny_manifest, tmp_path):
    tcfg = small_tcfg()
    run_training(tiny_cfg, tcfg, tiny_manifest, tmp_path / "straight")
    run_training(tiny_cfg, tcfg, tiny_manifest, tmp_path / "split",
                 stop_after_epochs=1)
    assert not (tmp_path / "split" / "final.ckpt").exists()
    run_training(tiny_cfg, tcfg, tiny_manifest, tmp_path / "split",
                 resume=True)
    a = load_arrays(tmp_path / "straight" / "final.ckpt")
    b = load_arrays(tmp_path / "split" / "final.ckpt")
    assert arrays_digest(a) == arrays_digest(b)
    assert ((tmp_path / "straight" / "metrics.txt").read_text()
            == (tmp_path / "split" / "metrics.txt").read_text())


def test_run_training_subset_init(tiny_cfg, tiny_manifest, tmp_path):
    # warm-start from a partial checkpoint: covered names are taken over,
    # everything else keeps the fresh init
    donor = init_params(tiny_cfg, 123)
    init = {"vision.proj": donor["vision.proj"].data}
    series = run_training(tiny_cfg, small_tcfg(), tiny_manifest,
                          tmp_path, init_arrays=init)
    start = series.get(0)
    assert (start["vision.proj"] == init["vision.proj"]).all()
    fresh = init_params(tiny_cfg, small_tcfg().seed)
    assert (start["text.tok_embed"] == fresh["text.tok_embed"].data).all()


def test_run_training_wise_final_is_average(tiny_cfg, tiny_manifest, tmp_path):
    # k=2, l=2 fires once, at the very end, over snapshots {0, 2}; the raw
    # theta_2 comes from a twin run without the ensemble (same seed and data,
    # so the trajectories agree until the firing point)
    run_training(tiny_cfg, small_tcfg(wise_enabled=True, wise_k=2, wise_l=2),
                 tiny_manifest, tmp_path / "wise")
    run_training(tiny_cfg, small_tcfg(), tiny_manifest, tmp_path / "plain")
    assert (arrays_digest(load_arrays(tmp_path / "wise" / "ckpt_1.ckpt"))
            == arrays_digest(load_arrays(tmp_path / "plain" / "ckpt_1.ckpt")))
    avg = classic_wise_ft(load_arrays(tmp_path / "plain" / "ckpt_0.ckpt"),
                          load_arrays(tmp_path / "plain" / "ckpt_2.ckpt"), 0.5)
    final = load_arrays(tmp_path / "wise" / "final.ckpt")
    assert arrays_digest(final) == arrays_digest(avg)
    # the stored ckpt_2 of the wise run is the already-averaged one
    assert (arrays_digest(load_arrays(tmp_path / "wise" / "ckpt_2.ckpt"))
            == arrays_digest(avg))


def test_run_training_no_mlm_without_decoder(tiny_manifest, tiny_cfg, tmp_path):
    import dataclasses
    cfg = dataclasses.replace(tiny_cfg, decoder_layers=0)
    with pytest.raises(ValueError, match="decoder"):
        run_training(cfg, small_tcfg(), tiny_manifest, tmp_path)
    # contrastive-only training is fine without one
    tcfg = small_tcfg(lam=0.0, steps=2, epoch_steps=2)
    run_training(cfg, tcfg, tiny_manifest, tmp_path / "con")
    line = (tmp_path / "con" / "metrics.txt").read_text().splitlines()[0]
    assert "l_mask=0" in line


def test_run_training_validations(tiny_cfg, tiny_manifest, tmp_path):
    import dataclasses
    with pytest.raises(ValueError, match="divisible"):
        run_training(tiny_cfg, small_tcfg(steps=5), tiny_manifest, tmp_path)
    bad_geom = dataclasses.replace(tiny_cfg, frames=4)
    with pytest.raises(ValueError, match="geometry"):
        run_training(bad_geom, small_tcfg(), tiny_manifest, tmp_path)
    bad_vocab = dataclasses.replace(tiny_cfg, vocab_size=tiny_cfg.vocab_size + 3)
    with pytest.raises(ValueError, match="vocab"):
        run_training(bad_vocab, small_tcfg(), tiny_manifest, tmp_path)


def test_resume_rejects_changed_config(tiny_cfg, tiny_manifest, tmp_path):
    run_training(tiny_cfg, small_tcfg(), tiny_manifest, tmp_path,
                 stop_after_epochs=1)
    with pytest.raises(ValueError, match="config"):
        run_training(tiny_cfg, small_tcfg(lr=9e-4), tiny_manifest, tmp_path,
                     resume=True)
