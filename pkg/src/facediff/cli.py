"""``facediff`` command line: gen-data, train, sample, eval, ablate, bench.

Every command reads a flat ``key = value`` config (``--config``, plus
``--set key=value`` overrides), prints the effective config hash, and writes
only under the configured dataset, checkpoint and report directories.  A
relative ``--out`` is resolved inside the directory the default output would
go to.

Exit codes: 0 success, 2 config error, 3 data error (missing or unreadable
file), 4 numeric failure, 5 checkpoint incompatible with the config.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import io as fio
from .attention import AttentionVariant
from .bench import bench_latency, latency_ratios, write_latency_csv
from .config import ConfigError, RunConfig
from .data import StyleOneHot, generate_dataset, split_indices
from .denoiser import Denoiser, DenoiserConfig, init_params
from .diffusion import make_schedule, sample
from .evaluation import (evaluate_model, report_from_predictions, run_ablation,
                         write_report_csv, write_std_map_csv)
from .training import NumericalError, train, validation_rec_loss

log = logging.getLogger("facediff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
MANIFEST = "manifest.txt"
MODEL_CHECKPOINT = "model.ckpt"
THREADS_ENV = "DIFFSPK_THREADS"


class DataError(RuntimeError):
    pass


class IncompatibleCheckpointError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------

def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    if path is None:
        cfg = RunConfig.parse("", Path.cwd())
    else:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        cfg = RunConfig.load(path)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.override(key.strip(), value.strip())
    return cfg


def _output(cfg: RunConfig, dir_key: str, out: Optional[str], default: str) -> Path:
    path = Path(out) if out else Path(default)
    if not path.is_absolute():
        path = cfg.path(dir_key) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _manifest_items(cfg: RunConfig, split: str):
    manifest = cfg.path("paths.dataset_dir") / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"dataset manifest {manifest} not found; run gen-data first")
    template, items = fio.load_manifest_items(manifest, split)
    if not items:
        raise DataError(f"split {split!r} of {manifest} is empty")
    return template, items


def checkpoint_meta(cfg: RunConfig, model_config: DenoiserConfig, steps: int) -> dict:
    return {"model": model_config.to_dict(), "schedule": cfg["model.schedule"],
            "config_hash": cfg.hash(), "train_steps": steps}


def load_model(path: Path, expected: Optional[DenoiserConfig] = None,
               schedule: Optional[str] = None):
    """Load a checkpoint as ``(Denoiser, meta)``, checking it against the config."""
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    meta, params = fio.load_checkpoint(path)
    try:
        model_config = DenoiserConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IncompatibleCheckpointError(f"{path}: unusable model config ({exc})") from None
    if expected is not None and model_config != expected:
        ours, theirs = expected.to_dict(), model_config.to_dict()
        diff = [f"{k}: checkpoint {theirs[k]!r} vs config {ours[k]!r}"
                for k in ours if ours[k] != theirs.get(k)]
        raise IncompatibleCheckpointError(f"{path}: " + "; ".join(diff))
    if schedule is not None and meta.get("schedule", schedule) != schedule:
        raise IncompatibleCheckpointError(
            f"{path}: trained with schedule {meta['schedule']!r}, config has {schedule!r}")
    ref = init_params(model_config, 0)
    bad = sorted(k for k in ref.keys() | params.keys()
                 if k not in params or k not in ref or params[k].shape != ref[k].shape)
    if bad:
        raise IncompatibleCheckpointError(f"{path}: parameter mismatch in {', '.join(bad)}")
    return Denoiser(model_config, params), meta


# -- commands ------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    spec = cfg.dataset_spec()
    dataset = generate_dataset(spec)
    root = cfg.path("paths.dataset_dir")
    (root / "clips").mkdir(parents=True, exist_ok=True)
    fio.save_template(root / "template.bin", dataset.template)
    splits = split_indices(len(dataset.items), cfg["data.split"], cfg["data.split_seed"])
    split_of = {i: name for name, idx in splits.items() for i in idx}
    entries = []
    for i, (audio, motion, style) in enumerate(dataset.items):
        mrel, arel = f"clips/clip_{i:04d}.motion", f"clips/clip_{i:04d}.audio"
        fio.save_motion(root / mrel, motion)
        fio.save_audio(root / arel, audio)
        entries.append((mrel, arel, style.subject_index, split_of[i]))
    fio.write_manifest(root / MANIFEST, "template.bin", spec.subject_count, entries)
    counts = ", ".join(f"{k} {len(v)}" for k, v in splits.items())
    print(f"wrote {len(entries)} clips to {root} ({counts})")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    _, items = _manifest_items(cfg, "train")
    _, val_items = _manifest_items(cfg, "val")
    model_config = cfg.model_config()
    schedule = make_schedule(model_config.diffusion_steps, cfg["model.schedule"])
    model = Denoiser(model_config, seed=cfg["model.init_seed"])
    ckpt_dir = cfg.path("paths.checkpoint_dir")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = _output(cfg, "paths.report_dir", None, "train_log.csv")
    log_path.unlink(missing_ok=True)

    def save(m, step):
        fio.save_checkpoint(ckpt_dir / f"step_{step:06d}.ckpt",
                            checkpoint_meta(cfg, model_config, step), m.params)

    steps = cfg["train.steps"]
    before = validation_rec_loss(model, val_items, schedule)
    history = train(model, items, schedule, cfg.train_config(), steps=steps,
                    log_path=log_path, checkpoint_every=cfg["train.checkpoint_every"],
                    save_fn=save)
    after = validation_rec_loss(model, val_items, schedule)
    if not np.isfinite(after):
        raise NumericalError(f"validation loss is {after}")
    out = _output(cfg, "paths.checkpoint_dir", args.out, MODEL_CHECKPOINT)
    fio.save_checkpoint(out, checkpoint_meta(cfg, model_config, steps), model.params)
    print(f"trained {steps} steps, final batch loss {history[-1]['loss']:.6g}")
    print(f"validation rec_loss {before:.6g} -> {after:.6g} (ratio {after / before:.4f})")
    print(f"checkpoint {out}")
    print(f"log {log_path}")
    return EXIT_OK


def _checkpoint_path(cfg: RunConfig, arg: Optional[str]) -> Path:
    return Path(arg) if arg else cfg.path("paths.checkpoint_dir") / MODEL_CHECKPOINT


def cmd_sample(cfg: RunConfig, args) -> int:
    model, _ = load_model(_checkpoint_path(cfg, args.checkpoint), cfg.model_config(),
                          cfg["model.schedule"])
    if not Path(args.audio).is_file():
        raise FileNotFoundError(f"audio file {args.audio} not found")
    audio = fio.load_audio(args.audio)
    if audio.feature_dim != model.config.feature_dim:
        raise DataError(f"audio has {audio.feature_dim} feature channels, "
                        f"model expects {model.config.feature_dim}")
    try:
        style = StyleOneHot(args.style, model.config.subject_count)
        sampler = cfg.sampler_config(args.w)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seed = args.seed if args.seed is not None else 0
    schedule = make_schedule(model.config.diffusion_steps, cfg["model.schedule"])
    motion, passes = sample(model, audio, style, sampler, schedule,
                            np.random.default_rng(seed))
    if not np.all(np.isfinite(motion.offsets)):
        raise NumericalError("sampled motion contains non-finite values")
    name = f"sample_{Path(args.audio).stem}_k{args.style}_seed{seed}_w{sampler.guidance_scale:g}.motion"
    out = _output(cfg, "paths.report_dir", args.out, name)
    fio.save_motion(out, motion)
    print(f"sampled {motion.frames} frames with {passes} denoiser passes -> {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    template, items = _manifest_items(cfg, args.split)
    gts = [m.offsets for _, m, *_ in items]
    if args.pred_dir:
        preds = []
        for (_, motion, _, rel) in items:
            path = Path(args.pred_dir) / rel
            if not path.is_file():
                raise FileNotFoundError(f"prediction {path} not found")
            pred = fio.load_motion(path).offsets
            if pred.shape != motion.offsets.shape:
                raise DataError(f"{path}: shape {pred.shape} != target {motion.offsets.shape}")
            preds.append(pred)
        report = report_from_predictions({0: preds}, gts, template, label="predictions")
    else:
        model, _ = load_model(_checkpoint_path(cfg, args.checkpoint), cfg.model_config(),
                              cfg["model.schedule"])
        schedule = make_schedule(model.config.diffusion_steps, cfg["model.schedule"])
        report = evaluate_model(model, items, template, schedule, cfg.sampler_config(),
                                cfg["eval.seeds"], label=model.config.variant.value)
    out = _output(cfg, "paths.report_dir", args.out, f"eval_{args.split}.csv")
    write_report_csv(out, [report])
    std_path = out.with_name(f"std_map_{args.split}.csv")
    write_std_map_csv(std_path, report.per_vertex_std, template)
    print(f"LVE {report.lve:.6g}  FDD {report.fdd:.6g}  seeds {report.seeds_used}")
    print(f"report {out}")
    print(f"std map {std_path}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    template, train_items = _manifest_items(cfg, "train")
    _, test_items = _manifest_items(cfg, args.split)
    base = cfg.model_config()
    schedule = make_schedule(base.diffusion_steps, cfg["model.schedule"])
    ckpt_dir = cfg.path("paths.checkpoint_dir")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    variants = [AttentionVariant.parse(v) for v in cfg["eval.variants"]]
    models = {}
    for v in variants:
        path = ckpt_dir / f"ablate_{v.value}.ckpt"
        if path.is_file():
            try:
                model, meta = load_model(path, cfg.model_config(v.value), cfg["model.schedule"])
            except IncompatibleCheckpointError:
                continue
            if meta.get("config_hash") == cfg.hash():
                log.info("reusing %s", path)
                models[v] = model

    def save(variant, model):
        fio.save_checkpoint(ckpt_dir / f"ablate_{variant.value}.ckpt",
                            checkpoint_meta(cfg, model.config, cfg["train.steps"]),
                            model.params)

    reports = run_ablation(train_items, test_items, template, variants,
                           cfg["eval.guidance_values"], cfg["eval.seeds"], schedule, base,
                           cfg.train_config(), cfg["train.steps"], cfg.sampler_config(),
                           models=models, model_seed=cfg["model.init_seed"], on_trained=save)
    out = _output(cfg, "paths.report_dir", args.out, "ablation.csv")
    write_report_csv(out, reports)
    for r in reports:
        print(f"{r.label:<18} w={r.guidance:<4g} LVE {r.lve:.6g}  FDD {r.fdd:.6g}  "
              f"upper std {r.upper_std:.6g}")
    print(f"report {out}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    seed = args.seed if args.seed is not None else 0
    records = bench_latency(cfg["bench.durations"], fps=cfg["data.fps"],
                            sampler_config=cfg.sampler_config(),
                            model_config=cfg.bench_model_config(),
                            repeats=cfg["bench.repeats"], warmups=cfg["bench.warmups"],
                            seed=seed, multithreaded=cfg["bench.multithreaded"])
    out = _output(cfg, "paths.report_dir", args.out, "latency.csv")
    write_latency_csv(out, records)
    for r in records:
        note = f"  ({r.note})" if r.note else ""
        print(f"{r.decoder:<15} {r.audio_seconds:>6g}s  T={r.frames:<5} "
              f"passes={r.denoiser_passes:<5} {r.wall_ms:10.1f} ms{note}")
    for secs, ratio in sorted(latency_ratios(records).items()):
        print(f"AR/diffusion at {secs:g}s: {ratio:.3f}")
    print(f"report {out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "ablate": cmd_ablate, "bench": cmd_bench}


def _apply_seed(cfg: RunConfig, command: str, seed: Optional[int]) -> None:
    if seed is None:
        return
    if command == "gen-data":
        cfg.override("data.rng_seed", seed)
    elif command == "train":
        cfg.override("train.rng_seed", seed)
    elif command in ("eval", "ablate"):
        shifted = [seed + i for i in range(len(cfg["eval.seeds"]))]
        cfg.override("eval.seeds", " ".join(map(str, shifted)))


def _flag_overrides(args) -> List[str]:
    """Command flags that stand in for config keys, as ``key=value`` strings."""
    out = []
    if args.command == "gen-data" and args.out:
        out.append(f"paths.dataset_dir={Path(args.out).resolve()}")
    if args.command == "bench":
        if args.durations:
            out.append("bench.durations=" + " ".join(repr(d) for d in args.durations))
        if args.repeats is not None:
            out.append(f"bench.repeats={args.repeats}")
        if args.warmups is not None:
            out.append(f"bench.warmups={args.warmups}")
        if args.multithreaded:
            out.append("bench.multithreaded=true")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults apply if omitted)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--seed", type=int, help="RNG seed for this command")
    common.add_argument("--out", help="output path (gen-data: dataset directory)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="facediff", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    sub.add_parser("train", parents=[common], help="train the denoiser")
    p = sub.add_parser("sample", parents=[common], help="sample motion for one audio file")
    p.add_argument("--audio", required=True, help="audio feature file")
    p.add_argument("--style", type=int, default=0, help="subject index k")
    p.add_argument("--w", type=float, help="guidance scale (default sampler.guidance_scale)")
    p.add_argument("--checkpoint", help="checkpoint (default <checkpoint_dir>/model.ckpt)")
    p = sub.add_parser("eval", parents=[common], help="LVE/FDD report on a split")
    p.add_argument("--checkpoint", help="checkpoint (default <checkpoint_dir>/model.ckpt)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--pred-dir", help="score motion files under this directory instead of "
                                      "sampling; names mirror the dataset layout")
    p = sub.add_parser("ablate", parents=[common], help="variants x guidance report")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p = sub.add_parser("bench", parents=[common], help="diffusion vs autoregressive latency")
    p.add_argument("--durations", type=float, nargs="+", help="audio lengths in seconds")
    p.add_argument("--repeats", type=int, help="timed repeats per measurement (>= 3)")
    p.add_argument("--warmups", type=int, help="untimed warmup runs")
    p.add_argument("--multithreaded", action="store_true",
                   help="allow multi-threaded BLAS (throughput mode)")
    return parser


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threadpool_limits(n)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            args.set.extend(_flag_overrides(args))
            cfg = load_run_config(args.config, args.set)
            _apply_seed(cfg, args.command, args.seed)
            seed_note = f"  seed {args.seed}" if args.seed is not None else ""
            print(f"config hash {cfg.hash()}{seed_note}", flush=True)
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, fio.FormatError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IncompatibleCheckpointError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
