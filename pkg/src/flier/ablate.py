"""Ablation grids over latent factor, data mode, stage order and shots."""
from __future__ import annotations

import csv
import hashlib
import io as _io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .data import DEFAULT_SHOTS, sample_episode
from .train import TrainConfig, build_model, train_baseline_finetune, train_flier

log = logging.getLogger(__name__)

ALPHAS = (0.1, 0.3, 0.5, 0.7, 0.9)
DATA_MODES = ("finetune", "augdata", "flier")
AXES = ("alpha", "data", "order", "shots")


def count_params(model) -> dict:
    """Trainable scalar counts per component; each encoder is counted with its probe."""
    p = model.params
    counts = {g: sum(p[k].size for k in model.group(g))
              for g in ("image_encoder", "probe_v", "latent_encoder", "probe_l")}
    counts["psi_v"] = counts["image_encoder"] + counts["probe_v"]
    counts["psi_l"] = counts["latent_encoder"] + counts["probe_l"]
    counts["ratio"] = counts["psi_l"] / counts["psi_v"]
    if not counts["psi_l"] < counts["psi_v"]:
        raise AssertionError(f"latent encoder ({counts['psi_l']}) is not smaller than the image "
                             f"encoder ({counts['psi_v']})")
    return counts


@dataclass
class Cell:
    axis_value: str
    shots: int
    seed: int
    top1: float | None = None
    top5: float | None = None
    weights_used: str | None = None
    test_hash: str = ""
    final_losses: dict = field(default_factory=dict)
    error: str | None = None


def run_cell(ds, cache, mode: str, cfg: TrainConfig, shots: int, seed: int, axis_value: str) -> Cell:
    """One training run; failures are captured in the cell rather than raised."""
    cell = Cell(axis_value, shots, seed)
    try:
        ep = sample_episode(ds, cache, shots, seed)
        cfg = replace(cfg, seed=seed)
        model = build_model(ds.n_classes, seed)
        test = (ds.images("test"), ds.labels("test"))
        if mode == "flier":
            report, _ = train_flier(ep, model, cfg, test)
        else:
            report, _ = train_baseline_finetune(ep, model, cfg, mode == "augdata", test)
        best = report.best
        cell.top1, cell.top5, cell.weights_used = best.top1, best.top5, best.weights_used
        cell.test_hash = report.test_hash
        last = report.epochs[-1]
        cell.final_losses = {k: getattr(last, k) for k in ("loss_v", "loss_vp", "loss_lgp", "loss_g")}
    except Exception as exc:  # recorded per cell, the sweep continues
        log.warning("cell %s shots=%d seed=%d failed: %s", axis_value, shots, seed, exc)
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def _run_cell_args(args) -> Cell:
    return run_cell(*args)


@dataclass
class AblationGrid:
    axis: str
    cells: list
    config: dict
    seeds: list

    def values(self) -> list[str]:
        return list(dict.fromkeys(c.axis_value for c in self.cells))

    def shots(self) -> list[int]:
        return sorted({c.shots for c in self.cells})

    def select(self, axis_value: str, shots: int | None = None) -> list[Cell]:
        return [c for c in self.cells
                if c.axis_value == axis_value and (shots is None or c.shots == shots)]

    def mean_top1(self, axis_value: str, shots: int | None = None) -> float:
        vals = [c.top1 for c in self.select(axis_value, shots) if c.top1 is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def test_hashes(self) -> set:
        return {c.test_hash for c in self.cells if c.error is None}

    def summary(self) -> list[dict]:
        rows = []
        for v in self.values():
            for k in self.shots():
                cells = self.select(v, k)
                ok = [c for c in cells if c.error is None]
                t1 = np.array([c.top1 for c in ok])
                t5 = np.array([c.top5 for c in ok])
                rows.append({
                    "axis_value": v, "shots": k, "n": len(ok), "failed": len(cells) - len(ok),
                    "top1_mean": float(t1.mean()) if len(ok) else None,
                    "top1_std": float(t1.std()) if len(ok) else None,
                    "top5_mean": float(t5.mean()) if len(ok) else None,
                    "top5_std": float(t5.std()) if len(ok) else None,
                })
        return rows

    def to_dict(self) -> dict:
        return {"axis": self.axis, "config": self.config, "seeds": list(self.seeds),
                "cells": [asdict(c) for c in self.cells], "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationGrid":
        return cls(d["axis"], [Cell(**c) for c in d["cells"]], d["config"], d["seeds"])

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "axis_value", "shots", "seed", "top1", "top5", "weights", "error"])
        for c in self.cells:
            w.writerow([self.axis, c.axis_value, c.shots, c.seed,
                        "" if c.top1 is None else f"{c.top1:.6f}",
                        "" if c.top5 is None else f"{c.top5:.6f}",
                        c.weights_used or "", c.error or ""])
        return buf.getvalue()

    def to_table(self) -> str:
        """Rows are axis values, columns are shots; cells read ``mean±std`` top-1 in percent."""
        shots = self.shots()
        head = [self.axis] + [f"shot-{k}" for k in shots]
        body = []
        for v in self.values():
            row = [v]
            for k in shots:
                ok = [c.top1 for c in self.select(v, k) if c.top1 is not None]
                row.append(f"{100 * np.mean(ok):.2f}±{100 * np.std(ok):.2f}" if ok else "failed")
            body.append(row)
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        lines = ["  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip() for r in [head] + body]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(io.canonical_json(self.config).encode()).hexdigest()[:12]

    def write(self, directory) -> dict:
        """CSV, JSON and text table, named by axis and a config digest."""
        d = Path(directory)
        stem = f"{self.axis}-{self.digest()}"
        paths = {"csv": d / f"{stem}.csv", "json": d / f"{stem}.json", "table": d / f"{stem}.txt"}
        io.atomic_write(paths["csv"], self.to_csv().encode())
        io.write_json(paths["json"], self.to_dict())
        io.atomic_write(paths["table"], self.to_table().encode())
        return paths


def _run_grid(axis: str, plan: list, ds, cache, seeds, config: dict, jobs: int) -> AblationGrid:
    args = [(ds, cache, mode, cfg, shots, seed, value) for value, mode, cfg, shots, seed in plan]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell_args, args))
    else:
        cells = [_run_cell_args(a) for a in args]
    return AblationGrid(axis, cells, config, list(seeds))


def _base_config(axis: str, cfg: TrainConfig, ds, seeds, **extra) -> dict:
    return {"axis": axis, "train": cfg.to_dict(), "dataset": ds.manifest()["split_hashes"],
            "seeds": list(seeds), **extra}


def sweep_latent_factor(ds, cache, cfg: TrainConfig, seeds, alphas=ALPHAS, shots=(16,),
                        jobs: int = 1) -> AblationGrid:
    if not seeds:
        raise ValueError("need at least one seed")
    plan = [(f"{a:g}", "flier", replace(cfg, alpha=a), k, s)
            for a in alphas for k in shots for s in seeds]
    conf = _base_config("alpha", cfg, ds, seeds, alphas=list(alphas), shots=list(shots))
    return _run_grid("alpha", plan, ds, cache, seeds, conf, jobs)


def ablate_data_mode(ds, cache, cfg: TrainConfig, seeds, shots=DEFAULT_SHOTS,
                     jobs: int = 1) -> AblationGrid:
    if not seeds:
        raise ValueError("need at least one seed")
    plan = [(m, m, cfg, k, s) for m in DATA_MODES for k in shots for s in seeds]
    conf = _base_config("data", cfg, ds, seeds, shots=list(shots))
    return _run_grid("data", plan, ds, cache, seeds, conf, jobs)


def ablate_stage_order(ds, cache, cfg: TrainConfig, seeds, shots=DEFAULT_SHOTS,
                       jobs: int = 1) -> AblationGrid:
    if not seeds:
        raise ValueError("need at least one seed")
    plan = [(o, "flier", replace(cfg, phase_order=o), k, s)
            for o in ("V-first", "G-first") for k in shots for s in seeds]
    conf = _base_config("order", cfg, ds, seeds, shots=list(shots))
    return _run_grid("order", plan, ds, cache, seeds, conf, jobs)


def ablate_shots(ds, cache, cfg: TrainConfig, seeds, shots=DEFAULT_SHOTS,
                 jobs: int = 1) -> AblationGrid:
    if not seeds:
        raise ValueError("need at least one seed")
    plan = [("flier", "flier", cfg, k, s) for k in shots for s in seeds]
    conf = _base_config("shots", cfg, ds, seeds, shots=list(shots))
    return _run_grid("shots", plan, ds, cache, seeds, conf, jobs)


def order_gap(grid: AblationGrid) -> dict:
    """``top1(V-first) - top1(G-first)`` per shot, informational only."""
    return {k: grid.mean_top1("V-first", k) - grid.mean_top1("G-first", k) for k in grid.shots()}
