"""Experiment configuration: strict JSON loading, hashing, alpha grids."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from casep.trainer import TrainConfig
from casep.world import ConfigError, WorldConfig

ASSUMPTIONS = ("background-target", "multiple-salient")


class ConfigParseError(ConfigError):
    """Malformed JSON; carries line and column."""

    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"{msg} (line {line}, column {col})")
        self.line, self.col = line, col


def parse_alphas(spec) -> list[float]:
    """'a:b:step' -> [a, a+step, ..., b] (inclusive within float tolerance), or a list of numbers."""
    if isinstance(spec, list):
        vals = [float(v) for v in spec]
    else:
        try:
            a, b, step = (float(p) for p in str(spec).split(":"))
        except ValueError:
            raise ConfigError(f"alpha grid must look like 'start:stop:step', got {spec!r}") from None
        if not step > 0 or b < a:
            raise ConfigError("alpha grid needs step > 0 and stop >= start")
        count = int(np.floor((b - a) / step + 1e-9)) + 1
        vals = [a + k * step for k in range(count)]
    if not vals or not all(np.isfinite(vals)):
        raise ConfigError("alpha grid must be a non-empty list of finite numbers")
    return vals


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 4000
    n_test: int = 2000


@dataclass(frozen=True)
class EvalConfig:
    probe_folds: int = 5
    probe_seed: int = 0
    pca_components: int = 3
    alpha_grid: str | list = "-2:2:0.5"
    interp_grid: str | list = "0:1:0.25"
    mi_k: int = 5
    mi_estimators: tuple = ("knn",)
    preview_rows: int = 16


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    assumption: str = "background-target"
    out_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        self.world.validate()
        self.train.validate()
        if self.assumption not in ASSUMPTIONS:
            raise ConfigError(f"assumption must be one of {ASSUMPTIONS}")
        if (self.assumption == "multiple-salient") != (self.world.n_salient == 2):
            raise ConfigError("multiple-salient assumption requires n_salient = 2 (and background-target n_salient = 1)")
        if self.data.n_train < 10 or self.data.n_test < 10:
            raise ConfigError("n_train and n_test must be >= 10")
        if self.eval.probe_folds < 2 or self.eval.pca_components < 1 or self.eval.mi_k < 1:
            raise ConfigError("probe_folds >= 2, pca_components >= 1, mi_k >= 1 required")
        bad = set(self.eval.mi_estimators) - {"knn", "disc", "mine"}
        if bad:
            raise ConfigError(f"unknown MI estimators {sorted(bad)}")
        parse_alphas(self.eval.alpha_grid)
        parse_alphas(self.eval.interp_grid)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"]["mi_estimators"] = list(self.eval.mi_estimators)
        return d

    def digest(self) -> str:
        """Hash of the normalized config, excluding out_dir."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _strict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    train = d.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("train must be a JSON object")
    try:
        train_cfg = TrainConfig.from_dict(train)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None
    ev = dict(d.get("eval", {}))
    if "mi_estimators" in ev:
        ev["mi_estimators"] = tuple(ev["mi_estimators"])
    cfg = ExperimentConfig(
        world=_strict(WorldConfig, d.get("world", {}), "world"),
        train=train_cfg,
        eval=_strict(EvalConfig, ev, "eval"),
        data=_strict(DataConfig, d.get("data", {}), "data"),
        assumption=d.get("assumption", "background-target"),
        out_dir=d.get("out_dir"),
    )
    return cfg.validate()


def loads(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(exc.msg, exc.lineno, exc.colno) from None
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
