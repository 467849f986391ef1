"""Run configuration: one INI file with [data], [diffusion], [train], [run] and [paths]."""
from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .diffusion import DiffusionConfig
from .train import TrainConfig

OUT_ENV = "FLIER_OUT"


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 10
    per_class_train: int = 20
    per_class_test: int = 30
    per_class_pretrain: int = 100
    noise: float = 0.3
    image_size: int = 32


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    shots: int = 16
    n_seeds: int = 5
    jobs: int = 1
    alphas: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    ablate_shots: tuple = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class PathConfig:
    out: str = ""
    data_dir: str = ""
    cache_dir: str = ""
    checkpoint_dir: str = ""
    report_dir: str = ""


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSection = field(default_factory=RunSection)
    paths: PathConfig = field(default_factory=PathConfig)

    def path(self, name: str) -> Path:
        """Resolved directory; empty entries fall back to ``<out>/<name>``."""
        out = Path(self.paths.out or os.environ.get(OUT_ENV) or "flier_out")
        if name == "out":
            return out
        explicit = getattr(self.paths, f"{name}_dir")
        return Path(explicit) if explicit else out / name

    def to_dict(self) -> dict:
        d = {k: asdict(getattr(self, k)) for k in ("data", "diffusion", "run", "paths")}
        d["train"] = self.train.to_dict()
        return d


_SECTIONS = {"data": DataConfig, "diffusion": DiffusionConfig, "train": TrainConfig,
             "run": RunSection, "paths": PathConfig}


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(x) for x in items)
        return raw.strip()
    except ValueError:
        raise ValueError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse INI text; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text, source=source)
    cfg = RunConfig()
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ValueError(f"{source}: unknown section [{section}]")
        current = getattr(cfg, section)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        updates = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ValueError(f"{source}: unknown key {key!r} in [{section}]")
            updates[key] = _coerce(raw, known[key], f"{source} [{section}] {key}")
        setattr(cfg, section, replace(current, **updates))
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))


def dump_config(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""
    lines = []
    for name, d in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in d.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
