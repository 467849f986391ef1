"""``flier`` command line: gen-data, build-cache, train, eval, ablate, report."""
from __future__ import annotations

import argparse
import hashlib
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from . import io
from .ablate import (AXES, AblationGrid, ablate_data_mode, ablate_shots, ablate_stage_order,
                     count_params, order_gap, sweep_latent_factor)
from .config import RunConfig, dump_config, load_config
from .data import EpisodeError, SyntheticDataset, make_synthetic_dataset, sample_episode
from .diffusion import (DiffusionDivergence, GenerationCache, SamplingError, build_cache,
                        build_generator, config_dict)
from .metrics import evaluate
from .rng import derive_seed
from .train import (TrainingDivergence, build_model, load_checkpoint, save_checkpoint,
                    train_baseline_finetune, train_flier)

log = logging.getLogger("flier")

DATASET_FILE = "dataset.bin"


class CommandError(RuntimeError):
    pass


def _dataset(cfg: RunConfig) -> SyntheticDataset:
    path = cfg.path("data") / DATASET_FILE
    if not path.exists():
        raise CommandError(f"dataset not found at {path}; run `flier gen-data` first")
    return SyntheticDataset.load(path)


def _cache(cfg: RunConfig) -> GenerationCache:
    d = cfg.path("cache")
    if not (d / "manifest.json").exists():
        raise CommandError(f"generation cache not found at {d}; run `flier build-cache` first")
    count = io.read_json(d / "manifest.json").get("count")
    hint = (f"; the cache was built with --count {count}, rebuild with "
            f"`flier build-cache --count 20 --force`")
    return GenerationCache.load(d, count_hint=hint)


def _seeds(cfg: RunConfig) -> list[int]:
    return [derive_seed(cfg.run.seed, "cell", i) for i in range(cfg.run.n_seeds)]


def cmd_gen_data(cfg: RunConfig, args) -> int:
    d = cfg.data
    ds = make_synthetic_dataset(d.n_classes, d.per_class_train, d.per_class_test,
                                derive_seed(cfg.run.seed, "dataset"), d.noise, d.image_size,
                                d.per_class_pretrain)
    out = cfg.path("data")
    ds.save(out / DATASET_FILE)
    manifest = ds.manifest()
    io.write_json(out / "manifest.json", manifest)
    digest = hashlib.sha256(io.canonical_json(manifest).encode()).hexdigest()
    print(f"dataset: {d.n_classes} classes, manifest sha256 {digest}")
    return 0


def cmd_build_cache(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    target = cfg.path("cache")
    if (target / "manifest.json").exists() and not args.force:
        print(f"cache already present at {target}; nothing to do (pass --force to rebuild)")
        return 0
    dcfg = cfg.diffusion if args.count is None else replace(cfg.diffusion, count=args.count)
    seed = derive_seed(cfg.run.seed, "diffusion")
    gen = build_generator(ds.images("pretrain"), ds.labels("pretrain"), ds.variants("pretrain"),
                          dcfg, seed)
    cache = build_cache(gen, ds.n_classes, seed)
    staging = target.with_name(target.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    cache.save(staging)
    manifest = io.read_json(staging / "manifest.json")
    manifest.update({"count": dcfg.count, "diffusion": config_dict(dcfg),
                     "denoiser_val_mse": [gen.denoiser_report.val_mse_initial,
                                          gen.denoiser_report.val_mse_final]})
    io.write_json(staging / "manifest.json", manifest)
    if target.exists():
        shutil.rmtree(target)
    staging.rename(target)
    print(f"cache: {ds.n_classes} classes x {dcfg.count} records at {target}")
    return 0


def _train_cfg(cfg: RunConfig, args):
    tc = replace(cfg.train, seed=derive_seed(cfg.run.seed, "train"))
    if getattr(args, "alpha", None) is not None:
        tc = replace(tc, alpha=args.alpha)
    return tc


def cmd_train(cfg: RunConfig, args) -> int:
    ds, cache = _dataset(cfg), _cache(cfg)
    shots = cfg.run.shots
    ep = sample_episode(ds, cache, shots, derive_seed(cfg.run.seed, "episode"))
    tc = _train_cfg(cfg, args)
    model = build_model(ds.n_classes, derive_seed(cfg.run.seed, "init"))
    test = (ds.images("test"), ds.labels("test"))
    if args.mode == "flier":
        report, ema = train_flier(ep, model, tc, test)
    else:
        report, ema = train_baseline_finetune(ep, model, tc, args.mode == "augdata", test)
    stem = f"{args.mode}-shot{shots}"
    ckpt_dir, rep_dir = cfg.path("checkpoint"), cfg.path("report")
    save_checkpoint(ckpt_dir / f"{stem}.ckpt", model, ema, report)
    io.write_json(rep_dir / f"{stem}.report.json", report.to_dict())
    io.atomic_write(rep_dir / f"{stem}.report.txt", report.to_text().encode())
    b = report.best
    print(f"{stem}: top1 {b.top1:.4f} top{b.k} {b.top5:.4f} ({b.weights_used} weights)")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    path = Path(args.checkpoint) if args.checkpoint else (
        cfg.path("checkpoint") / f"flier-shot{cfg.run.shots}.ckpt")
    if not path.exists():
        raise CommandError(f"checkpoint not found at {path}; run `flier train` first")
    model, ema, meta = load_checkpoint(path)
    gamma = meta["report"]["config"]["gamma"]
    images, labels = ds.images("test"), ds.labels("test")
    raw = evaluate(model, images, labels, gamma, weights_used="raw")
    with ema.applied(model.params):
        ema_res = evaluate(model, images, labels, gamma, weights_used="ema")
    best = ema_res if ema_res.top1 > raw.top1 else raw
    out = {"checkpoint": path.name, "raw": raw.to_dict(), "ema": ema_res.to_dict(),
           "best": best.to_dict(), "params": count_params(model)}
    io.write_json(cfg.path("report") / f"{path.stem}.eval.json", out)
    print(f"eval {path.name}: top1 {best.top1:.4f} top{best.k} {best.top5:.4f} "
          f"({best.weights_used} weights)")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    ds, cache = _dataset(cfg), _cache(cfg)
    tc = _train_cfg(cfg, args)
    seeds = _seeds(cfg)
    jobs = cfg.run.jobs if args.jobs is None else args.jobs
    shots = (cfg.run.shots,) if args.shots is not None else cfg.run.ablate_shots
    if args.axis == "alpha":
        grid = sweep_latent_factor(ds, cache, tc, seeds, cfg.run.alphas, shots=shots, jobs=jobs)
    elif args.axis == "data":
        grid = ablate_data_mode(ds, cache, tc, seeds, shots=shots, jobs=jobs)
    elif args.axis == "order":
        grid = ablate_stage_order(ds, cache, tc, seeds, shots=shots, jobs=jobs)
    else:
        grid = ablate_shots(ds, cache, tc, seeds, shots=shots, jobs=jobs)
    paths = grid.write(cfg.path("report"))
    print(grid.to_table(), end="")
    if args.axis == "order":
        for k, gap in order_gap(grid).items():
            print(f"shot-{k}: top1(V-first) - top1(G-first) = {gap:+.4f}")
    failed = [c for c in grid.cells if c.error]
    if failed:
        print(f"{len(failed)} of {len(grid.cells)} cells failed; see {paths['json'].name}")
    print(f"wrote {paths['csv']}")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    rep_dir = Path(args.report_dir) if args.report_dir else cfg.path("report")
    grids = sorted(rep_dir.glob("*-*.json"))
    grids = [g for g in grids if not g.name.endswith((".report.json", ".eval.json"))]
    if not grids:
        raise CommandError(f"no ablation grids in {rep_dir}; run `flier ablate` first")
    text, rows = [], ["axis,axis_value,shots,n,failed,top1_mean,top1_std,top5_mean,top5_std"]
    for path in grids:
        grid = AblationGrid.from_dict(io.read_json(path))
        text.append(f"== {grid.axis} ({path.stem}) ==\n{grid.to_table()}")
        for r in grid.summary():
            rows.append(",".join("" if r[k] is None else (f"{r[k]:.6f}" if isinstance(r[k], float)
                                                          else str(r[k]))
                                 for k in ("axis_value", "shots", "n", "failed", "top1_mean",
                                           "top1_std", "top5_mean", "top5_std")))
            rows[-1] = f"{grid.axis}," + rows[-1]
    body = "\n".join(text)
    io.atomic_write(rep_dir / "summary.txt", body.encode())
    io.atomic_write(rep_dir / "summary.csv", ("\n".join(rows) + "\n").encode())
    print(body, end="")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "build-cache": cmd_build_cache, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides [run] seed)")
    common.add_argument("--shots", type=int, help="shots per class (overrides [run] shots)")
    common.add_argument("--out", help="output root (default: $FLIER_OUT or ./flier_out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="flier", description="Synthetic data, generation cache, "
                                "training, evaluation and ablation grids.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    bc = sub.add_parser("build-cache", parents=[common], help="train the generator, sample records")
    bc.add_argument("--count", type=int, help="records per class (default 20)")
    bc.add_argument("--force", action="store_true", help="rebuild an existing cache")
    tr = sub.add_parser("train", parents=[common], help="train one model on one episode")
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--mode", choices=("flier", "augdata", "finetune"), default="flier")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    ev.add_argument("--checkpoint")
    ab = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    ab.add_argument("--axis", choices=AXES, required=True)
    ab.add_argument("--alpha", type=float)
    ab.add_argument("--jobs", type=int)
    rp = sub.add_parser("report", parents=[common], help="render all grids as tables and CSV")
    rp.add_argument("--report-dir")
    sub.add_parser("config", parents=[common], help="print the effective configuration")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run = replace(cfg.run, seed=args.seed)
    if args.shots is not None:
        cfg.run = replace(cfg.run, shots=args.shots)
    if args.out:
        cfg.paths = replace(cfg.paths, out=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "config":
            print(dump_config(cfg), end="")
            return 0
        return COMMANDS[args.command](cfg, args)
    except (CommandError, io.ArtifactError, EpisodeError, DiffusionDivergence, SamplingError,
            TrainingDivergence, ValueError, OSError, KeyError) as exc:
        print(f"flier {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
