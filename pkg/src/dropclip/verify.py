"""Built-in self checks behind ``dropclip verify``.

Five fast check groups guard the properties everything else leans on:
gradient oracles against central differences, masking count/uniformity
contracts, the ensembling hand-trace fixtures, retrieval-metric equality with
a brute-force sort, and the init-time equivalence of the two backbone modes.
A sixth group re-hashes a golden checkpoint committed with the package, so
serialization drift or a corrupted install shows up as a named failure.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, add, reshape, slice_axis
from .gradcheck import grad_check
from .masking import full_mask, keep_count, mask_count, sample_drop_mask
from .params import arrays_digest, load_arrays
from .model import (ModelConfig, cross_decode, encode_text, encode_video,
                    encode_video_clips, init_params, param_template, patchify)
from .objectives import embed_pair, info_nce, mlm_loss
from .wiseft import (CheckpointSeries, WiseFtSchedule, alg1_indices,
                     classic_wise_ft, ensemble, wise_ft_online)
from .evaltasks import SimilarityMatrix, retrieval_eval
from .synthdata import BOS_ID, EOS_ID, MASK_ID, VOCAB_SIZE

GROUPS = ("gradcheck", "masking", "wiseft", "retrieval", "zeroinit", "golden")

GOLDEN_CONFIG = ModelConfig(resolution=16, patch=8, frames=2, dim=8,
                            vision_layers=1, vision_heads=2, text_layers=1,
                            text_heads=2, decoder_layers=1, decoder_dim=8,
                            decoder_heads=2, proj_dim=4,
                            vocab_size=VOCAB_SIZE, max_text_len=12,
                            temporal_mode="temporal", mlp_ratio=2)
GOLDEN_SEED = 2024
GOLDEN_PATH = Path(__file__).parent / "data" / "golden.ckpt"
GOLDEN_DIGEST = "dc26751d0ce820ec6b8832b33781d06121be32b98e1dc88f9ede2ed2dea2f3de"


@dataclass(frozen=True)
class CheckResult:
    group: str
    name: str
    ok: bool
    detail: str = ""


# ---------------------------------------------------------------------------
# joint-loss gradient oracle over every parameter at once

class _TreeView(dict):
    """Name -> Tensor view satisfying the model's parameter-lookup protocol."""


def joint_loss_grad_error(cfg: ModelConfig, seed: int = 0, batch_size: int = 2,
                          drop_ratio: float = 0.5) -> float:
    """Max relative analytic-vs-central-difference gradient error of the full
    joint loss, taken jointly over every parameter of the model.

    All parameters are packed into one float64 vector; the loss function
    slices the vector back into named views, so the finite-difference probe
    sweeps the complete model including the temperature. The point is the
    standard init plus a small random perturbation: at init the zero-init
    residual projections would leave whole attention paths with exactly
    zero gradient, i.e. untested.
    """
    rng = np.random.default_rng(seed)
    template = param_template(cfg)
    names = sorted(template)
    init = init_params(cfg, seed, dtype=np.float64)

    clips = rng.random((batch_size, cfg.frames, cfg.resolution,
                        cfg.resolution, 3))
    toks, kept = [], []
    for b in range(batch_size):
        mask = sample_drop_mask(cfg.n_patches, drop_ratio, rng)
        toks.append(patchify(clips[b], cfg.patch)[mask.kept])
        kept.append(mask.kept)
    toks, kept = np.stack(toks), np.stack(kept)

    length = cfg.max_text_len
    n_words = length - 2
    rows = np.zeros((batch_size, length), dtype=np.int64)
    rows[:, 0] = BOS_ID
    rows[:, 1:1 + n_words] = rng.integers(4, cfg.vocab_size,
                                          (batch_size, n_words))
    rows[:, 1 + n_words] = EOS_ID
    positions = [np.sort(rng.choice(np.arange(1, 1 + n_words), 2,
                                    replace=False)) for _ in range(batch_size)]
    targets = [rows[b, positions[b]].copy() for b in range(batch_size)]
    masked = rows.copy()
    for b in range(batch_size):
        masked[b, positions[b]] = MASK_ID

    sizes = [max(1, int(np.prod(template[n]))) for n in names]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    base = np.concatenate([init[n].data.reshape(-1) for n in names])
    point = Tensor(base + rng.normal(0.0, 0.1, base.shape), requires_grad=True)

    def loss_fn(flat: Tensor) -> Tensor:
        p = _TreeView()
        for n, off, size in zip(names, offsets, sizes):
            p[n] = reshape(slice_axis(flat, 0, int(off), int(off) + size),
                           template[n])
        vis = encode_video(p, cfg, toks, kept)
        txt = encode_text(p, cfg, masked)
        l_con = info_nce(embed_pair(vis.pooled, txt.pooled, p["logit_scale"]))
        logits = cross_decode(p, cfg, txt, vis)
        return add(l_con, mlm_loss(logits, positions, targets))

    return grad_check(loss_fn, point)


# ---------------------------------------------------------------------------
# individual checks

def _approx(got, want, tol, what) -> None:
    if abs(got - want) > tol:
        raise AssertionError(f"{what}: got {got!r}, expected {want!r} ± {tol}")


def _check_grad_quadratic() -> str:
    from .tensor import mul, sum_axis
    err = grad_check(lambda x: sum_axis(mul(x, x)),
                     Tensor(np.array([1.0, 2.0, 3.0])))
    if err >= 1e-7:
        raise AssertionError(f"quadratic gradient error {err:.3g} >= 1e-7")
    return f"max rel err {err:.3g}"


def _check_grad_info_nce() -> str:
    rng = np.random.default_rng(7)
    v = rng.standard_normal((4, 8))
    t = rng.standard_normal((4, 8))
    s = np.array(0.4)
    flat = Tensor(np.concatenate([v.reshape(-1), t.reshape(-1), [s]]))

    def f(x):
        vv = reshape(slice_axis(x, 0, 0, 32), (4, 8))
        tt = reshape(slice_axis(x, 0, 32, 64), (4, 8))
        ss = reshape(slice_axis(x, 0, 64, 65), ())
        return info_nce(embed_pair(vv, tt, ss))

    err = grad_check(f, flat)
    if err >= 1e-5:
        raise AssertionError(f"info_nce gradient error {err:.3g} >= 1e-5")
    return f"max rel err {err:.3g}"


def _check_grad_joint_small() -> str:
    cfg = ModelConfig(resolution=8, patch=4, frames=2, dim=4, vision_layers=1,
                      vision_heads=2, text_layers=1, text_heads=2,
                      decoder_layers=1, decoder_dim=4, decoder_heads=2,
                      proj_dim=2, vocab_size=8, max_text_len=6,
                      temporal_mode="temporal", mlp_ratio=1)
    err = joint_loss_grad_error(cfg, seed=1, batch_size=2)
    if err >= 1e-4:
        raise AssertionError(f"joint loss gradient error {err:.3g} >= 1e-4")
    return f"max rel err {err:.3g}"


def _check_keep_counts() -> str:
    for ratio, n, want in [(0.0, 1, 1), (0.0, 10, 10), (0.0, 128, 128),
                           (0.0, 1568, 1568), (0.7, 1, 1), (0.7, 10, 3),
                           (0.7, 128, 38), (0.7, 1568, 470), (0.8, 1, 1),
                           (0.8, 10, 2), (0.8, 128, 25), (0.8, 1568, 313),
                           (0.9, 1, 1), (0.9, 10, 1), (0.9, 128, 12),
                           (0.9, 1568, 156)]:
        got = keep_count(n, ratio)
        if got != want:
            raise AssertionError(f"keep_count({n}, {ratio}) = {got}, "
                                 f"expected {want}")
    for n, ratio, want in [(5, 0.15, 1), (20, 0.15, 3)]:
        got = mask_count(n, ratio)
        if got != want:
            raise AssertionError(f"mask_count({n}, {ratio}) = {got}, "
                                 f"expected {want}")
    return "16 keep-count and 2 mask-count fixtures"


def _check_keep_uniformity() -> str:
    rng = np.random.default_rng(123)
    hits = np.zeros(10)
    draws = 10_000
    for _ in range(draws):
        hits[sample_drop_mask(10, 0.5, rng).kept] += 1
    freq = 100.0 * hits / draws
    if np.abs(freq - 50.0).max() > 3.0:
        raise AssertionError(f"keep frequency off uniform: {freq.round(2)}")
    return f"per-index keep % within {np.abs(freq - 50.0).max():.2f} of 50"


def _check_wiseft_trace() -> str:
    series = CheckpointSeries()
    sched = WiseFtSchedule(k=2, l=2)
    theta = {"w": np.array(0.0)}
    series.append(theta)
    for epoch in range(1, 5):
        theta = {"w": theta["w"] + 1.0}
        series.append(theta)
        theta = wise_ft_online(series, sched, epoch)
    if theta["w"] != 1.5:
        raise AssertionError(f"scalar trace ended at {theta['w']}, expected 1.5")
    return "k=2 l=2 scalar trace reaches 1.5"


def _check_alg1_fixtures() -> str:
    for n, l, want in [(10, 3, [0, 5, 10]), (4, 2, [0, 4]), (5, 3, [0, 3, 5]),
                       (1, 2, [0, 1]), (10, 11, list(range(11)))]:
        got = alg1_indices(n, l)
        if got != want:
            raise AssertionError(f"alg1_indices({n}, {l}) = {got}, "
                                 f"expected {want}")
    try:
        WiseFtSchedule(k=1, l=1)
    except ValueError:
        pass
    else:
        raise AssertionError("l=1 schedule was not rejected")
    return "5 index fixtures, l=1 rejected"


def _check_classic_equivalence() -> str:
    rng = np.random.default_rng(5)
    pre = {"a": rng.standard_normal((3, 4)).astype(np.float32),
           "b": rng.standard_normal(7).astype(np.float32)}
    ft = {"a": rng.standard_normal((3, 4)).astype(np.float32),
          "b": rng.standard_normal(7).astype(np.float32)}
    series = CheckpointSeries()
    series.append(pre)
    series.append(ft)
    online = wise_ft_online(series, WiseFtSchedule(k=1, l=2), 1)
    classic = classic_wise_ft(pre, ft, 0.5)
    for k in pre:
        if online[k].tobytes() != classic[k].tobytes():
            raise AssertionError(f"online l=2 differs bitwise from classic "
                                 f"alpha=0.5 at {k!r}")
    ident = ensemble([pre], [1.0])
    for k in pre:
        if ident[k].tobytes() != pre[k].tobytes():
            raise AssertionError("1-checkpoint ensemble is not the identity")
    return "single-firing l=2 equals classic alpha=0.5 bitwise"


def _brute_force_retrieval(scores: np.ndarray, gt: np.ndarray):
    """Independent route: full descending sort per row, pessimistic ties."""
    ranks = []
    for row, g in zip(scores, gt):
        order = np.sort(row)[::-1]
        rank = 0
        for value in order:
            if value >= row[g]:
                rank += 1
            else:
                break
        ranks.append(rank)
    ranks = np.array(ranks)
    mid = np.sort(ranks)
    n = len(mid)
    mdr = float(mid[n // 2]) if n % 2 else float((mid[n // 2 - 1] + mid[n // 2]) / 2.0)
    out = {k: 100.0 * float((ranks <= k).sum()) / n for k in (1, 5, 10)}
    return out[1], out[5], out[10], mdr


def _check_retrieval_oracle() -> str:
    rng = np.random.default_rng(11)
    for trial in range(20):
        scores = rng.standard_normal((50, 50))
        if trial % 3 == 0:   # force ties
            scores = np.round(scores, 1)
        gt = rng.integers(0, 50, 50)
        got = retrieval_eval(SimilarityMatrix(scores, gt))
        want = _brute_force_retrieval(scores, gt)
        if (got.r1, got.r5, got.r10, got.mdr) != want:
            raise AssertionError(f"trial {trial}: {got} != brute force {want}")
    return "20 random 50x50 matrices match the sort-based oracle exactly"


def _check_retrieval_ties() -> str:
    res = retrieval_eval(SimilarityMatrix(np.ones((10, 10)), np.arange(10)))
    if not (res.r10 == 100.0 and res.r5 == 0.0 and res.mdr == 10.0):
        raise AssertionError(f"constant matrix gave {res}")
    res = retrieval_eval(SimilarityMatrix(np.eye(4), np.arange(4)))
    if not (res.r1 == 100.0 and res.mdr == 1.0):
        raise AssertionError(f"identity matrix gave {res}")
    return "all-ties rank 10, identity rank 1"


def _check_zero_init_equivalence() -> str:
    cfg_t = ModelConfig()
    cfg_f = ModelConfig(temporal_mode="frame_avg")
    seed = 31
    tree_t = init_params(cfg_t, seed)
    tree_f = init_params(cfg_f, seed)
    rng = np.random.default_rng(seed)
    clips = rng.random((8, cfg_t.frames, cfg_t.resolution, cfg_t.resolution,
                        3)).astype(np.float32)
    masks = [full_mask(cfg_t.n_patches)] * 8
    pooled_t = encode_video_clips(tree_t, cfg_t, clips, masks).pooled.data
    pooled_f = encode_video_clips(tree_f, cfg_f, clips, masks).pooled.data
    diff = float(np.abs(pooled_t - pooled_f).max())
    if diff > 1e-6:
        raise AssertionError(f"backbone modes differ at init by {diff:.3g}")
    return f"max abs diff {diff:.3g} over 8 clips"


def _check_golden_digest() -> str:
    if not GOLDEN_PATH.exists():
        raise AssertionError(f"golden checkpoint missing at {GOLDEN_PATH}")
    arrays = load_arrays(GOLDEN_PATH)
    digest = arrays_digest(arrays)
    if digest != GOLDEN_DIGEST:
        raise AssertionError(f"golden checkpoint digest {digest} != expected "
                             f"{GOLDEN_DIGEST}")
    template = param_template(GOLDEN_CONFIG)
    if set(arrays) != set(template):
        raise AssertionError("golden checkpoint names diverge from its config")
    return f"digest {digest[:16]}.. matches"


CHECKS = (
    ("gradcheck", "quadratic", _check_grad_quadratic),
    ("gradcheck", "info-nce", _check_grad_info_nce),
    ("gradcheck", "joint-loss", _check_grad_joint_small),
    ("masking", "counts", _check_keep_counts),
    ("masking", "uniformity", _check_keep_uniformity),
    ("wiseft", "scalar-trace", _check_wiseft_trace),
    ("wiseft", "indices", _check_alg1_fixtures),
    ("wiseft", "classic-equivalence", _check_classic_equivalence),
    ("retrieval", "oracle", _check_retrieval_oracle),
    ("retrieval", "ties", _check_retrieval_ties),
    ("zeroinit", "backbone-equivalence", _check_zero_init_equivalence),
    ("golden", "digest", _check_golden_digest),
)


def run_checks(group_filter: str | None = None) -> list[CheckResult]:
    if group_filter is not None and group_filter not in GROUPS:
        raise ValueError(f"unknown check group {group_filter!r}; "
                         f"choose from {', '.join(GROUPS)}")
    results = []
    for group, name, fn in CHECKS:
        if group_filter is not None and group != group_filter:
            continue
        try:
            detail = fn() or ""
            results.append(CheckResult(group, name, True, detail))
        except Exception as exc:  # a failed check must not stop the others
            results.append(CheckResult(group, name, False, str(exc)))
    return results
