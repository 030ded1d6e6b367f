"""Command-line surface: dataset generation, the two training stages,
offline ensembling, evaluation, benchmarking, and the self-check suite.

Configuration precedence is defaults < DROPCLIP_SEED env < --config file <
explicit flags, and every command writes its fully resolved configuration to
``run.cfg`` next to its outputs, so re-running from that file reproduces the
outputs. An output directory is guarded by a lock file against concurrent
writers. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import os

# honor the thread cap before numpy first loads its BLAS
if os.environ.get("DROPCLIP_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["DROPCLIP_THREADS"])

import contextlib
import dataclasses
import functools
import re
import sys
from pathlib import Path

import click

from .kvformat import KvFormatError, dump_kv, load_kv
from .params import load_arrays, save_arrays
from .model import ModelConfig, load_checkpoint, load_model_config
from .objectives import TrainConfig
from .trainer import run_training
from .wiseft import alg1_indices, ensemble
from .evaltasks import (bench_drop, direction_mc_eval, format_table,
                        make_qa_set, mlm_accuracy, record_lines,
                        retrieval_from_manifest, vqa_train_eval,
                        zero_shot_classify, VQA_MODES)
from .synthdata import (DIRECTIONS, DatasetManifest, gen_scene, make_manifest,
                        read_manifest, render_clip, write_manifest)
from . import verify as verify_mod

PAPER_MODE = dict(steps=50_000, batch_size=1024, lr=1e-5, weight_decay=0.2,
                  warmup=4000, drop_ratio=0.9, mask_ratio=0.15,
                  wise_k=10, wise_l=3)   # large-scale preset, see README


def _env_seed(fallback: int = 0) -> int:
    value = os.environ.get("DROPCLIP_SEED")
    return int(value) if value else fallback


def _defaults(model_over: dict | None = None, train_over: dict | None = None) -> dict:
    base: dict = {}
    for f in dataclasses.fields(ModelConfig):
        base["model." + f.name] = getattr(ModelConfig(), f.name)
    for f in dataclasses.fields(TrainConfig):
        base["train." + f.name] = getattr(TrainConfig(), f.name)
    for key, value in (model_over or {}).items():
        base["model." + key] = value
    for key, value in (train_over or {}).items():
        base["train." + key] = value
    base["train.seed"] = _env_seed(base["train.seed"])
    return base


def _parse_like(default, raw: str):
    if isinstance(default, bool):
        if raw not in ("true", "false"):
            raise click.UsageError(f"expected true/false, got {raw!r}")
        return raw == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _resolve(defaults: dict, config_path: str | None, flags: dict) -> dict:
    merged = dict(defaults)
    if config_path:
        try:
            pairs = load_kv(config_path, "RUNCFG")
        except (OSError, KvFormatError) as exc:
            raise click.UsageError(str(exc))
        for key, raw in pairs.items():
            if key == "command":
                continue
            if key not in merged:
                raise click.UsageError(f"{config_path}: unknown config key {key!r}")
            merged[key] = _parse_like(merged[key], raw)
    for key, value in flags.items():
        if value is not None:
            merged[key] = value
    return merged


def _split_configs(merged: dict) -> tuple[ModelConfig, TrainConfig]:
    model_kw = {k[len("model."):]: v for k, v in merged.items()
                if k.startswith("model.")}
    train_kw = {k[len("train."):]: v for k, v in merged.items()
                if k.startswith("train.")}
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as exc:
        raise click.UsageError(str(exc))


def _write_runcfg(out_dir: Path, command: str, merged: dict) -> None:
    vals = {"command": command}
    for key in sorted(merged):
        value = merged[key]
        vals[key] = ("true" if value else "false") if isinstance(value, bool) \
            else str(value)
    dump_kv(out_dir / "run.cfg", "RUNCFG", vals)


@contextlib.contextmanager
def _locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise click.ClickException(
            f"{out_dir} is locked by another run (remove {lock} if stale)")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _runtime_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}")
    return wrapper


def _load_manifest(path: str) -> DatasetManifest:
    if not Path(path).exists():
        raise click.ClickException(f"manifest not found: {path}")
    return read_manifest(path)


def _model_cfg_for(ckpt: str, model_cfg: str | None) -> ModelConfig:
    path = Path(model_cfg) if model_cfg else Path(ckpt).parent / "model.cfg"
    if not path.exists():
        raise click.ClickException(f"model config not found: {path}")
    return load_model_config(path)


@click.group()
def main():
    """Video-language post-pretraining with patch dropping and text masking."""


# ---------------------------------------------------------------------------
# dataset generation

@main.command("make-data")
@click.option("--style", type=click.Choice(["motion", "static"]), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]),
              default="train", show_default=True)
@click.option("--count", type=int, required=True)
@click.option("--seed", type=int, default=None, help="base seed; split offsets apply")
@click.option("--frames", type=int, default=None,
              help="frames per clip (default 8, static style 1)")
@click.option("--out", "out_path", required=True, type=click.Path())
@_runtime_errors
def cmd_make_data(style, split, count, seed, frames, out_path):
    """Write a dataset manifest (samples are regenerated from it on demand)."""
    seed = _env_seed(0) if seed is None else seed
    if frames is None:
        frames = 1 if style == "static" else 8
    manifest = make_manifest(split, seed, count, frames=frames,
                             caption_style=style)
    write_manifest(manifest, out_path)
    click.echo(f"wrote {out_path}: {style} {split} split, {count} samples, "
               f"{frames} frame(s), seed {manifest.seed}")


# ---------------------------------------------------------------------------
# training stages

def _train_command(command: str, defaults: dict, config, manifest_path, out,
                   flag_values: dict, init_path: str | None = None,
                   resume: bool = False):
    merged = _resolve(defaults, config, flag_values)
    mcfg, tcfg = _split_configs(merged)
    manifest = _load_manifest(manifest_path)
    out_dir = Path(out)
    init_arrays = None
    if init_path is not None:
        if not Path(init_path).exists():
            raise click.ClickException(f"init checkpoint not found: {init_path}")
        init_arrays = load_arrays(init_path)
    with _locked(out_dir):
        _write_runcfg(out_dir, command, merged)
        series = run_training(mcfg, tcfg, manifest, out_dir,
                              init_arrays=init_arrays, resume=resume)
    click.echo(f"{command}: {tcfg.steps} steps done, {len(series)} snapshots "
               f"in {out_dir}")


@main.command("pretrain")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--warmup", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epoch-steps", type=int, default=None)
@click.option("--resume", is_flag=True, default=False)
@_runtime_errors
def cmd_pretrain(manifest_path, out, config, steps, batch_size, lr, warmup,
                 seed, epoch_steps, resume):
    """Stage 0: contrastive image-text pretraining on single-frame clips."""
    defaults = _defaults(
        model_over=dict(frames=1, temporal_mode="frame_avg", decoder_layers=0),
        train_over=dict(steps=600, warmup=50, lam=0.0, mask_ratio=0.0,
                        drop_ratio=0.0, epoch_steps=100, freeze_text=False,
                        wise_enabled=False))
    flags = {"train.steps": steps, "train.batch_size": batch_size,
             "train.lr": lr, "train.warmup": warmup, "train.seed": seed,
             "train.epoch_steps": epoch_steps}
    _train_command("pretrain", defaults, config, manifest_path, out, flags,
                   resume=resume)


@main.command("post-pretrain")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--init", "init_path", default=None, type=click.Path(),
              help="stage-0 checkpoint to start from")
@click.option("--out", required=True, type=click.Path())
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--drop-ratio", type=float, default=None, help="default 0.9")
@click.option("--mask-ratio", type=float, default=None, help="default 0.15")
@click.option("--backbone", type=click.Choice(["temporal", "frame_avg"]),
              default=None, help="default temporal")
@click.option("--wise-ft", "wise_ft", default=None, metavar="K,L",
              help="online ensembling schedule, default 10,3")
@click.option("--no-wise-ft", is_flag=True, default=False,
              help="disable online ensembling")
@click.option("--no-decoder", is_flag=True, default=False,
              help="drop the decoder and the masked-LM loss")
@click.option("--paper-mode", is_flag=True, default=False,
              help="large-scale hyperparameters (50k steps, batch 1024); "
                   "documentation preset, impractical on a desktop")
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--warmup", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epoch-steps", type=int, default=None)
@click.option("--resume", is_flag=True, default=False)
@_runtime_errors
def cmd_post_pretrain(manifest_path, init_path, out, config, drop_ratio,
                      mask_ratio, backbone, wise_ft, no_wise_ft, no_decoder,
                      paper_mode, steps, batch_size, lr, warmup, seed,
                      epoch_steps, resume):
    """Post-pretrain on motion clips: frozen text, patch dropping, decoder."""
    if init_path is None and not resume:
        raise click.UsageError("post-pretraining needs --init (a stage-0 "
                               "checkpoint); use `dropclip pretrain` first")
    train_over = dict(freeze_text=True, wise_enabled=True, epoch_steps=200)
    if paper_mode:
        train_over.update(PAPER_MODE)
        train_over["epoch_steps"] = 5000
    defaults = _defaults(train_over=train_over)
    flags = {"train.drop_ratio": drop_ratio, "train.mask_ratio": mask_ratio,
             "model.temporal_mode": backbone, "train.steps": steps,
             "train.batch_size": batch_size, "train.lr": lr,
             "train.warmup": warmup, "train.seed": seed,
             "train.epoch_steps": epoch_steps}
    if wise_ft is not None:
        m = re.fullmatch(r"(\d+),(\d+)", wise_ft.strip())
        if not m:
            raise click.UsageError(f"--wise-ft expects K,L — got {wise_ft!r}")
        flags["train.wise_k"], flags["train.wise_l"] = int(m[1]), int(m[2])
    if no_wise_ft:
        flags["train.wise_enabled"] = False
    if no_decoder:
        flags["train.lam"] = 0.0
        flags["train.mask_ratio"] = 0.0
        flags["model.decoder_layers"] = 0
    _train_command("post-pretrain", defaults, config, manifest_path, out,
                   flags, init_path=init_path, resume=resume)


# ---------------------------------------------------------------------------
# offline ensembling

@main.command("wiseft")
@click.option("--run-dir", "run_dir", required=True, type=click.Path(),
              help="training output dir holding ckpt_<n>.ckpt snapshots")
@click.option("--k", type=int, default=None, help="use alg1_indices(N, l) "
              "over the newest N with N a multiple of k")
@click.option("--l", "l_", type=int, default=None)
@click.option("--indices", default=None, metavar="I,J,...",
              help="explicit snapshot indices to average")
@click.option("--out", required=True, type=click.Path())
@_runtime_errors
def cmd_wiseft(run_dir, k, l_, indices, out):
    """Average saved snapshots into one checkpoint (uniform weights)."""
    run = Path(run_dir)
    have = sorted(int(m[1]) for p in run.glob("ckpt_*.ckpt")
                  if (m := re.fullmatch(r"ckpt_(\d+)\.ckpt", p.name)))
    if len(have) < 2:
        raise click.ClickException(f"{run_dir} holds {len(have)} snapshot(s); "
                                   "need at least 2")
    if indices is not None:
        picks = [int(s) for s in indices.split(",")]
    else:
        if l_ is None:
            raise click.UsageError("give either --indices or --l (with --k)")
        n = have[-1]
        if k is not None:
            n -= n % k
            if n < 1:
                raise click.ClickException(f"no epoch multiple of k={k} saved")
        picks = alg1_indices(n, l_)
    missing = [i for i in picks if i not in have]
    if missing:
        raise click.ClickException(f"snapshot(s) {missing} not in {run_dir}")
    ckpts = [load_arrays(run / f"ckpt_{i}.ckpt") for i in picks]
    avg = ensemble(ckpts, [1.0 / len(ckpts)] * len(ckpts))
    save_arrays(out, avg)
    click.echo(f"averaged snapshots {picks} -> {out}")


# ---------------------------------------------------------------------------
# evaluation

def _report(out_dir: Path, name: str, table: str, records: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}_report.txt"
    path.write_text(table + "\n" + records, encoding="utf-8")
    return path


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--model-cfg", "model_cfg", default=None, type=click.Path(),
              help="defaults to model.cfg next to the checkpoint")
@click.option("--task", required=True,
              type=click.Choice(["retrieval", "multiple-choice", "classify",
                                 "vqa", "mlm"]))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(),
              help="held-out split")
@click.option("--train-manifest", "train_manifest_path", default=None,
              type=click.Path(), help="train split (vqa head / mlm prior)")
@click.option("--count", type=int, default=None,
              help="samples to evaluate (task-specific default)")
@click.option("--mode", type=click.Choice(list(VQA_MODES)), default=None,
              help="vqa feature mode, default combined")
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@_runtime_errors
def cmd_eval(ckpt, model_cfg, task, manifest_path, train_manifest_path, count,
             mode, seed, out):
    """Evaluate a checkpoint; never applies patch dropping."""
    if not Path(ckpt).exists():
        raise click.ClickException(f"checkpoint not found: {ckpt}")
    cfg = _model_cfg_for(ckpt, model_cfg)
    tree = load_checkpoint(ckpt, cfg)
    manifest = _load_manifest(manifest_path)
    out_dir = Path(out)
    seed = _env_seed(0) if seed is None else seed
    merged = {"task": task, "ckpt": ckpt, "manifest": manifest_path,
              "train_manifest": train_manifest_path or "",
              "count": count or 0, "mode": mode or "", "seed": seed}
    with _locked(out_dir):
        _write_runcfg(out_dir, "eval", merged)

        if task == "retrieval":
            res = retrieval_from_manifest(tree, cfg, manifest, count or 64)
            rows = [[d, r.r1, r.r5, r.r10, r.mdr] for d, r in res.items()]
            table = format_table(["direction", "R@1", "R@5", "R@10", "MdR"], rows)
            records = record_lines("retrieval", [
                {"direction": d, "r1": r.r1, "r5": r.r5, "r10": r.r10,
                 "mdr": r.mdr} for d, r in res.items()])
        elif task == "multiple-choice":
            res = direction_mc_eval(tree, cfg, manifest, count or 200)
            table = format_table(["task", "accuracy", "n"],
                                 [["left-vs-right", res.accuracy, res.n]])
            records = record_lines("multiple_choice", [
                {"accuracy": res.accuracy, "n": res.n}])
        elif task == "classify":
            n = count or 100
            hits = used = index = 0
            while used < n:
                if index >= manifest.count:
                    raise click.ClickException(
                        f"manifest has fewer than {n} moving clips")
                spec = gen_scene(manifest, index)
                index += 1
                if spec.motion == "none":
                    continue
                clip = render_clip(spec, manifest.resolution, manifest.frames)
                pick = zero_shot_classify(tree, cfg, clip, list(DIRECTIONS),
                                          ["moving {}"])
                hits += int(DIRECTIONS[pick] == spec.motion)
                used += 1
            acc = 100.0 * hits / n
            table = format_table(["task", "accuracy", "n"],
                                 [["direction-classify", acc, n]])
            records = record_lines("classify", [{"accuracy": acc, "n": n}])
        elif task == "vqa":
            if train_manifest_path is None:
                raise click.UsageError("--task vqa needs --train-manifest")
            train_man = _load_manifest(train_manifest_path)
            qa_train = make_qa_set(train_man, count or 384)
            qa_test = make_qa_set(manifest, (count or 384) // 2)
            res = vqa_train_eval(tree, cfg, mode or "combined", qa_train,
                                 qa_test, seed=seed)
            rows = [["overall", res.accuracy]]
            rows += [[qt, acc] for qt, acc in sorted(res.per_type.items())]
            table = format_table(["question type", "accuracy"], rows)
            records = record_lines("vqa", [
                {"mode": res.mode, "scope": r[0], "accuracy": r[1]}
                for r in rows])
        else:   # mlm
            if train_manifest_path is None:
                raise click.UsageError("--task mlm needs --train-manifest "
                                       "(unigram prior source)")
            train_man = _load_manifest(train_manifest_path)
            res = mlm_accuracy(tree, cfg, manifest, count or 64, train_man,
                               min(train_man.count, 512))
            table = format_table(
                ["metric", "value"],
                [["masked-token accuracy", res.accuracy],
                 ["unigram-prior baseline", res.prior_accuracy],
                 ["positions", res.n_positions],
                 ["prior token", res.prior_token]])
            records = record_lines("mlm", [
                {"accuracy": res.accuracy, "prior": res.prior_accuracy,
                 "n": res.n_positions, "prior_token": res.prior_token}])

        path = _report(out_dir, task, table, records)
    click.echo(table.rstrip("\n"))
    click.echo(f"report written to {path}")


# ---------------------------------------------------------------------------
# benchmarking and self checks

@main.command("bench")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--ratios", default="0,0.7,0.8,0.9", show_default=True)
@click.option("--steps", type=int, default=3, show_default=True,
              help="timed steps per ratio")
@click.option("--batch-size", type=int, default=16, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@_runtime_errors
def cmd_bench(manifest_path, ratios, steps, batch_size, seed, out):
    """Train-step cost vs drop ratio (wall time and live activation scalars)."""
    manifest = _load_manifest(manifest_path)
    ratio_list = [float(s) for s in ratios.split(",")]
    seed = _env_seed(0) if seed is None else seed
    tcfg = TrainConfig(batch_size=batch_size, seed=seed)
    mcfg = ModelConfig()
    out_dir = Path(out)
    with _locked(out_dir):
        _write_runcfg(out_dir, "bench", {"manifest": manifest_path,
                                         "ratios": ratios, "steps": steps,
                                         "batch_size": batch_size,
                                         "seed": seed})
        rows = bench_drop(mcfg, tcfg, manifest, ratio_list, steps=steps)
        table = format_table(
            ["drop ratio", "kept tokens", "mean step s", "peak activations"],
            [[r.ratio, r.kept_tokens, r.mean_step_s, r.peak_scalars]
             for r in rows])
        records = record_lines("bench", [dataclasses.asdict(r) for r in rows])
        by_ratio = {r.ratio: r for r in rows}
        note = ""
        if 0.7 in by_ratio and 0.9 in by_ratio:
            got = by_ratio[0.7].peak_scalars / by_ratio[0.9].peak_scalars
            note = (f"activation ratio 0.7/0.9 = {got:.2f} "
                    f"(large-scale reference 37.3/16.2 = 2.30)\n")
        _report(out_dir, "bench", table, note + records)
    click.echo(table.rstrip("\n"))
    if note:
        click.echo(note.rstrip("\n"))


@main.command("verify")
@click.option("--filter", "group", default=None,
              help=f"run one group: {', '.join(verify_mod.GROUPS)}")
@_runtime_errors
def cmd_verify(group):
    """Run the built-in self checks; nonzero exit on any failure."""
    try:
        results = verify_mod.run_checks(group)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    failed = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        detail = f" — {r.detail}" if r.detail else ""
        click.echo(f"{status} {r.group}:{r.name}{detail}")
        failed += 0 if r.ok else 1
    click.echo(f"{len(results) - failed}/{len(results)} checks passed")
    if failed:
        sys.exit(1)


if __name__ == "__main__":
    main()
