"""Deterministic training loop for the joint contrastive + masked-LM objective.

One step: drop patches per sample, mask text per sample, encode both sides,
contrastive loss on the pooled pair, decoder cross-entropy on the masked
positions, one decoupled-weight-decay Adam update on the trainable entries.
The text encoder is frozen during post-pretraining; with lam=0 or mask
ratio 0 the decoder path is skipped entirely and training is pure
contrastive.

All randomness is drawn from named streams keyed by (step, sample slot), so
a run is a pure function of (seed, config, manifest): any step can be
replayed in isolation and a resumed run continues bitwise-identically. The
run directory holds per-epoch snapshots ckpt_<n>.ckpt (theta_0 = init), the
resumable state.ckpt (params + Adam moments + step), metrics.txt, and the
resolved model/train configs.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from .tensor import Tape, active_tape, add, backward, scale
from .rng import RngStreams
from .masking import mask_text, sample_drop_mask
from .params import ParamTree, load_arrays, save_arrays
from .model import (ModelConfig, cross_decode, encode_text, encode_video_clips,
                    init_params, load_model_config, save_model_config,
                    set_text_frozen)
from .objectives import (LossBreakdown, TrainConfig, embed_pair, info_nce,
                         lr_at, mlm_loss)
from .synthdata import DatasetManifest, gen_sample, tokenize
from .wiseft import CheckpointSeries, WiseFtSchedule, wise_ft_online

LOGIT_SCALE_MIN = math.log(0.01)   # tau <= 100
LOGIT_SCALE_MAX = math.log(100.0)  # tau >= 0.01


class AdamState:
    """First/second moments for the trainable entries, plus the step count."""

    def __init__(self, tree: ParamTree):
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in tree.trainable_items()}
        self.v = {n: np.zeros_like(p.data) for n, p in tree.trainable_items()}


def adam_update(tree: ParamTree, opt: AdamState, lr: float,
                cfg: TrainConfig) -> None:
    """Adam with decoupled weight decay; a missing grad counts as zero, so
    unused trainable entries still shrink by lr*wd each step."""
    opt.t += 1
    b1c = 1.0 - cfg.beta1 ** opt.t
    b2c = 1.0 - cfg.beta2 ** opt.t
    for name, p in tree.trainable_items():
        m, v = opt.m[name], opt.v[name]
        if p.grad is not None:
            g = p.grad
            m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        else:
            m[...] = cfg.beta1 * m
            v[...] = cfg.beta2 * v
        upd = (m / b1c) / (np.sqrt(v / b2c) + cfg.eps)
        p.data = p.data - lr * upd - (lr * cfg.weight_decay) * p.data
    if "logit_scale" in tree:
        s = tree["logit_scale"]
        s.data = np.clip(s.data, LOGIT_SCALE_MIN, LOGIT_SCALE_MAX)


def _losses(tree: ParamTree, batch, mcfg: ModelConfig, tcfg: TrainConfig,
            rngs: RngStreams, step: int, tape: Tape) -> LossBreakdown:
    clips = np.stack([c.frames for c, _ in batch]).astype(np.float32)
    masks = [sample_drop_mask(mcfg.n_patches, tcfg.drop_ratio,
                              rngs.derive("patch-drop", step, i))
             for i in range(len(batch))]
    if tcfg.mlm_enabled:
        masked = [mask_text(t.ids, tcfg.mask_ratio,
                            rngs.derive("text-mask", step, i))
                  for i, (_, t) in enumerate(batch)]
        ids = np.stack([m.ids for m in masked])
    else:
        masked = None
        ids = np.stack([t.ids for _, t in batch])

    vis = encode_video_clips(tree, mcfg, clips, masks)
    txt = encode_text(tree, mcfg, ids)
    l_con = info_nce(embed_pair(vis.pooled, txt.pooled, tree["logit_scale"]))
    if masked is not None:
        logits = cross_decode(tree, mcfg, txt, vis)
        l_mask = mlm_loss(logits, [m.positions for m in masked],
                          [m.targets for m in masked])
        total = add(l_con, scale(l_mask, tcfg.lam))
        l_mask_v = l_mask.item()
    else:
        total = l_con
        l_mask_v = 0.0
    lb = LossBreakdown(l_con=l_con.item(), l_mask=l_mask_v,
                       total=l_con.item() + tcfg.lam * l_mask_v)
    if not math.isfinite(lb.total):
        raise FloatingPointError(
            f"non-finite loss at step {step}: l_con={lb.l_con} "
            f"l_mask={lb.l_mask}")
    tree.zero_grads()
    backward(total, tape)
    return lb


def train_step(tree: ParamTree, opt: AdamState, batch, mcfg: ModelConfig,
               tcfg: TrainConfig, rngs: RngStreams,
               step: int) -> tuple[ParamTree, LossBreakdown]:
    """One optimizer step on a batch of (VideoClip, TokenizedText) pairs.

    Reuses an already-active Tape when one is open (the benchmark wraps calls
    in a memory-tracking tape); otherwise opens its own.
    """
    tape = active_tape()
    if tape is None:
        with Tape() as tape:
            lb = _losses(tree, batch, mcfg, tcfg, rngs, step, tape)
    else:
        lb = _losses(tree, batch, mcfg, tcfg, rngs, step, tape)
    adam_update(tree, opt, lr_at(step, tcfg), tcfg)
    return tree, lb


def assemble_batch(manifest: DatasetManifest, mcfg: ModelConfig,
                   batch_size: int, rngs: RngStreams, step: int) -> list:
    """The step's (VideoClip, TokenizedText) pairs, drawn without replacement
    from the manifest by the data-order stream."""
    if manifest.count < batch_size:
        raise ValueError(f"manifest holds {manifest.count} samples, need a "
                         f"batch of {batch_size}")
    order = rngs.derive("data-order", step)
    picks = order.choice(manifest.count, size=batch_size, replace=False)
    batch = []
    for di in picks:
        clip, caption = gen_sample(manifest, int(di))
        batch.append((clip, tokenize(caption, max_len=mcfg.max_text_len)))
    return batch


def save_state(path, tree: ParamTree, opt: AdamState, step: int) -> None:
    arrays = {"param." + n: a for n, a in tree.arrays().items()}
    for n, a in opt.m.items():
        arrays["adam.m." + n] = a
    for n, a in opt.v.items():
        arrays["adam.v." + n] = a
    arrays["adam.t"] = np.array(opt.t, dtype=np.int64)
    arrays["step"] = np.array(step, dtype=np.int64)
    save_arrays(path, arrays)


def load_state(path, tree: ParamTree, opt: AdamState) -> int:
    """Restore params and optimizer moments in place; returns the step."""
    arrays = load_arrays(path)
    tree.load_arrays({n[len("param."):]: a for n, a in arrays.items()
                      if n.startswith("param.")})
    saved_m = {n[len("adam.m."):] for n in arrays if n.startswith("adam.m.")}
    if saved_m != set(opt.m):
        raise ValueError("optimizer state does not cover the trainable entries")
    for n in opt.m:
        opt.m[n][...] = arrays["adam.m." + n]
        opt.v[n][...] = arrays["adam.v." + n]
    opt.t = int(arrays["adam.t"])
    return int(arrays["step"])


_TRAINCFG_KIND = "TRAINCFG"


def save_train_config(cfg: TrainConfig, path) -> None:
    from .kvformat import dump_kv
    vals = {}
    for k, val in dataclasses.asdict(cfg).items():
        vals[k] = ("true" if val else "false") if isinstance(val, bool) else repr(val)
    dump_kv(path, _TRAINCFG_KIND, vals)


def load_train_config(path) -> TrainConfig:
    from .kvformat import load_kv, require_keys
    kv = load_kv(path, _TRAINCFG_KIND, 1)
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    require_keys(kv, fields, path)
    out = {}
    for name, f in fields.items():
        kind = type(f.default)
        out[name] = kv[name] == "true" if kind is bool else kind(kv[name])
    return TrainConfig(**out)


def run_training(mcfg: ModelConfig, tcfg: TrainConfig,
                 manifest: DatasetManifest, out_dir,
                 init_arrays: dict | None = None, resume: bool = False,
                 stop_after_epochs: int | None = None) -> CheckpointSeries:
    """Train for tcfg.steps, snapshotting every tcfg.epoch_steps.

    init_arrays may cover a subset of the parameter names (a stage-0
    checkpoint has no temporal entries); the rest keep their fresh init.
    ``stop_after_epochs`` ends the call early at an epoch boundary; a later
    call with resume=True continues from state.ckpt as if never interrupted.
    """
    if tcfg.steps % tcfg.epoch_steps != 0:
        raise ValueError(f"steps {tcfg.steps} not divisible by epoch_steps "
                         f"{tcfg.epoch_steps}")
    if manifest.resolution != mcfg.resolution or manifest.frames != mcfg.frames:
        raise ValueError(f"manifest geometry {manifest.resolution}x"
                         f"{manifest.frames}f does not match model config")
    if len(manifest.vocab) != mcfg.vocab_size:
        raise ValueError(f"manifest vocab size {len(manifest.vocab)} != model "
                         f"vocab_size {mcfg.vocab_size}")
    if tcfg.mlm_enabled and mcfg.decoder_layers == 0:
        raise ValueError("masked-LM training needs a decoder "
                         "(decoder_layers > 0)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume:
        if load_model_config(out / "model.cfg") != mcfg:
            raise ValueError("resume with a different model config")
        if load_train_config(out / "train.cfg") != tcfg:
            raise ValueError("resume with a different train config")
    else:
        save_model_config(mcfg, out / "model.cfg")
        save_train_config(tcfg, out / "train.cfg")

    rngs = RngStreams(tcfg.seed)
    tree = init_params(mcfg, tcfg.seed)
    if tcfg.freeze_text:
        set_text_frozen(tree)
    opt = AdamState(tree)
    series = CheckpointSeries()

    if resume:
        start = load_state(out / "state.ckpt", tree, opt)
        if start % tcfg.epoch_steps != 0:
            raise ValueError(f"saved step {start} is not an epoch boundary")
        for n in range(start // tcfg.epoch_steps + 1):
            series.append(load_arrays(out / f"ckpt_{n}.ckpt"))
    else:
        if init_arrays is not None:
            tree.load_arrays(init_arrays, subset=True)
        start = 0
        series.append(tree.arrays())
        save_arrays(out / "ckpt_0.ckpt", series.get(0))
        save_state(out / "state.ckpt", tree, opt, 0)

    sched = (WiseFtSchedule(tcfg.wise_k, tcfg.wise_l)
             if tcfg.wise_enabled else None)
    epochs_done = 0
    with open(out / "metrics.txt", "a" if resume else "w") as mf:
        for step in range(start, tcfg.steps):
            batch = assemble_batch(manifest, mcfg, tcfg.batch_size, rngs, step)
            _, lb = train_step(tree, opt, batch, mcfg, tcfg, rngs, step)
            mf.write(f"step={step} lr={lr_at(step, tcfg):.8g} "
                     f"l_con={lb.l_con:.8g} l_mask={lb.l_mask:.8g}\n")
            if (step + 1) % tcfg.epoch_steps == 0:
                n = (step + 1) // tcfg.epoch_steps
                series.append(tree.arrays())
                if sched is not None:
                    theta = wise_ft_online(series, sched, n)
                    if sched.due(n):
                        tree.load_arrays(theta)
                save_arrays(out / f"ckpt_{n}.ckpt", series.get(n))
                save_state(out / "state.ckpt", tree, opt, step + 1)
                mf.flush()
                epochs_done += 1
                if stop_after_epochs is not None and epochs_done >= stop_after_epochs:
                    break
    if len(series) == tcfg.steps // tcfg.epoch_steps + 1:
        save_arrays(out / "final.ckpt", tree.arrays())
    return series
