"""Two-phase training of the separator with periodically refitted adversaries.

Phase 1 trains the separator on reconstruction terms only. At the end of the
warm-up the adversaries are fitted on the frozen separator's factors; from
then on the separator also fights the (frozen) adversaries, which are refitted
every ``adversary_retrain_interval`` steps.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from casep.nn import AdamState, NumericError, Tape, adam_step
from casep.regularizers import MODES, Adversaries, Factors, adversary_losses, fit_adversaries, make_adversaries
from casep.separator import Batch, LossWeights, SeparatorParams, SeparatorSpec, init_separator, split, total_objective
from casep.world import ConfigError, LabeledDataset, World

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "L_lat", "L_img", "L_advD", "L_advR", "grad_norm", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 6000
    warmup_steps: int = 2000
    adversary_retrain_interval: int = 500
    adversary_retrain_epochs: int = 50
    batch_size: int = 64
    adversary_batch_size: int = 64
    lr_separator_phase1: float = 0.01
    lr_separator_phase2: float = 0.001
    lr_discriminator: float = 1e-4
    lr_regressor: float = 2e-4
    lr_mi: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    regularizer_mode: str = "adv"
    seed: int = 0
    depth: int = 4
    width: int = 64
    styles: int | None = None
    shared_prefix_depth: int = 0
    init_noise: float = 1e-3
    reinit_adversaries: bool = False
    fool_r_through_target: bool = True
    log_interval: int = 10
    log_wall_time: bool = False   # wall_ms stays 0 so reruns give byte-identical logs

    def validate(self) -> "TrainConfig":
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps]")
        if self.adversary_retrain_interval < 1 or self.log_interval < 1:
            raise ConfigError("adversary_retrain_interval and log_interval must be >= 1")
        if self.batch_size < 2 or self.adversary_batch_size < 2:
            raise ConfigError("batch sizes must be >= 2")
        if self.adversary_retrain_epochs < 0:
            raise ConfigError("adversary_retrain_epochs must be >= 0")
        for f in ("lr_separator_phase1", "lr_separator_phase2", "lr_discriminator", "lr_regressor", "lr_mi"):
            v = getattr(self, f)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{f} must be > 0")
        if self.regularizer_mode not in MODES:
            raise ConfigError(f"regularizer_mode must be one of {MODES}")
        self.weights.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        d = dict(d)
        if "weights" in d:
            w = d["weights"]
            bad = set(w) - {f.name for f in fields(LossWeights)}
            if bad:
                raise ConfigError(f"unknown weight keys: {sorted(bad)}")
            d["weights"] = LossWeights(**w)
        return cls(**d)

    def separator_spec(self, d_w: int, n_salient: int) -> SeparatorSpec:
        return SeparatorSpec(d_w=d_w, depth=self.depth, width=self.width, styles=self.styles,
                             shared_prefix_depth=self.shared_prefix_depth, n_salient=n_salient)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# Desk-scale settings that separate best on the default world: short, frequent
# adversary refits, a full-weight discriminator term, and fool-R acting on c only.
TUNED = {
    "adversary_retrain_interval": 50,
    "adversary_retrain_epochs": 5,
    "fool_r_through_target": False,
    "weights": {"adv_d": 1.0, "adv_r": 0.5},
}


def tuned_config(**overrides) -> TrainConfig:
    """TrainConfig with the ``TUNED`` settings; keyword overrides win."""
    d = dict(TUNED)
    d.update(overrides)
    return TrainConfig.from_dict(d)


@dataclass(frozen=True)
class Event:
    kind: str          # "train-separator-no-adv" | "fit-adversaries" | "train-separator-with-adv"
    step: int          # first step (fit events: the step at which the fit happens)
    stop: int = -1     # exclusive end for train events
    epochs: int = 0


def schedule_events(cfg: TrainConfig) -> list[Event]:
    """Warm-up block, then fits at warmup + k * interval for every such step <= total.

    Consecutive separator steps are grouped into one event.
    """
    cfg.validate()
    events = []
    if cfg.warmup_steps > 0:
        events.append(Event("train-separator-no-adv", 0, cfg.warmup_steps))
    fit = cfg.warmup_steps
    while fit <= cfg.total_steps:
        events.append(Event("fit-adversaries", fit, epochs=cfg.adversary_retrain_epochs))
        stop = min(fit + cfg.adversary_retrain_interval, cfg.total_steps)
        if stop > fit:
            events.append(Event("train-separator-with-adv", fit, stop))
        fit += cfg.adversary_retrain_interval
    return events


def fit_steps(cfg: TrainConfig) -> list[int]:
    return [e.step for e in schedule_events(cfg) if e.kind == "fit-adversaries"]


@dataclass
class TrainLogRow:
    step: int
    L_lat: float
    L_img: float
    L_advD: float
    L_advR: float
    grad_norm: float
    wall_ms: int

    def as_tuple(self) -> tuple:
        return (self.step, self.L_lat, self.L_img, self.L_advD, self.L_advR, self.grad_norm, self.wall_ms)


class TrainingAborted(NumericError):
    def __init__(self, message: str, rows: list[TrainLogRow]):
        super().__init__(message)
        self.rows = rows


def write_log(rows: list[TrainLogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for r in rows:
            writer.writerow([r.step] + [repr(float(v)) for v in r.as_tuple()[1:6]] + [r.wall_ms])


class _Sampler:
    """Minibatches without replacement within each pass, reshuffled per pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self.pos + self.bs > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.bs]
        self.pos += self.bs
        return idx


def adversary_factors(sep: SeparatorParams, w_x: np.ndarray, w_y: np.ndarray) -> Factors:
    """Factors of the frozen separator; the regression target on X is zero unless multi-salient."""
    fx, fy = split(w_x, sep), split(w_y, sep)
    multi = sep.spec.n_salient == 2
    return Factors(fx.c, fy.c, fx.salient if multi else None, fy.salient)


def warmup_adversaries(x: LabeledDataset, y: LabeledDataset, sep: SeparatorParams, adversaries: Adversaries,
                       epochs: int, batch_size: int = 64, rng: np.random.Generator | None = None):
    """Fit adversaries on factors of the frozen separator; returns per-epoch losses."""
    rng = np.random.default_rng(0) if rng is None else rng
    return fit_adversaries(adversaries, adversary_factors(sep, x.latents, y.latents), epochs, batch_size, rng)


@dataclass
class TrainResult:
    separator: SeparatorParams
    adversaries: Adversaries
    log: list[TrainLogRow]
    report: dict


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "adv_init", "batch_x", "batch_y", "adv_fit", "shuffle")
    seqs = np.random.SeedSequence([int(seed), 77]).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def train_stage1(world: World, cfg: TrainConfig, x: LabeledDataset, y: LabeledDataset,
                 on_event=None) -> TrainResult:
    """Run the full schedule; deterministic given (cfg, data).

    ``on_event(event, separator, adversaries)`` is called before each event,
    mainly so tests can watch the alternation.
    """
    cfg.validate()
    d_w = x.latents.shape[1]
    if y.latents.shape[1] != d_w:
        raise ConfigError("X and Y latent dims differ")
    rngs = _streams(cfg.seed)
    spec = cfg.separator_spec(d_w, world.cfg.n_salient)
    sep = init_separator(spec, rngs["init"], cfg.init_noise)
    adv = make_adversaries(cfg.regularizer_mode, d_w, rngs["adv_init"], cfg.lr_discriminator, cfg.lr_regressor,
                           cfg.lr_mi)
    adv.fool_r_through_target = cfg.fool_r_through_target
    adv_init = {k: v.copy() for k, v in adv.params.items()}
    opt = AdamState(lr=cfg.lr_separator_phase1)
    sx = _Sampler(len(x), cfg.batch_size, rngs["batch_x"])
    sy = _Sampler(len(y), cfg.batch_size, rngs["batch_y"])
    use_img = cfg.weights.image > 0 or world.has_observation_map
    rows: list[TrainLogRow] = []
    fits: list[dict] = []
    t0 = time.perf_counter()

    def step(t: int, adversarial: bool, lr: float):
        ix, iy = sx.next(), sy.next()
        batch = Batch(x.latents[ix], y.latents[iy],
                      x.observations[ix] if use_img else None, y.observations[iy] if use_img else None)
        tape = Tape()
        total, terms = total_objective(sep, tape, batch, cfg.weights, world if use_img else None, adv,
                                       rngs["shuffle"], adversarial=adversarial)
        grads = tape.backward(total)
        with np.errstate(over="ignore", invalid="ignore"):
            gn = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        vals = {k: float(v.value) for k, v in terms.items()}
        if not math.isfinite(float(total.value)) or not math.isfinite(gn):
            rows.append(_row(t, vals, gn, t0, cfg))
            raise TrainingAborted(f"non-finite loss at step {t}", rows[-10:])
        if t % cfg.log_interval == 0:
            rows.append(_row(t, vals, gn, t0, cfg))
        adam_step(opt, sep.params, grads, lr=lr)

    for ev in schedule_events(cfg):
        if on_event is not None:
            on_event(ev, sep, adv)
        if ev.kind == "fit-adversaries":
            if not adv.specs:
                continue
            if cfg.reinit_adversaries:
                adv.params = {k: v.copy() for k, v in adv_init.items()}
                adv.reset_states()
            f = adversary_factors(sep, x.latents, y.latents)
            before = adversary_losses(adv, f)
            hist = fit_adversaries(adv, f, ev.epochs, cfg.adversary_batch_size, rngs["adv_fit"])
            fits.append({"step": ev.step, "before": before, "after": hist[-1] if hist else before})
            continue
        adversarial = ev.kind == "train-separator-with-adv"
        lr = cfg.lr_separator_phase2 if adversarial else cfg.lr_separator_phase1
        for t in range(ev.step, ev.stop):
            step(t, adversarial, lr)

    report = {"config_digest": cfg.digest(), "fits": fits, "final": asdict(rows[-1]) if rows else {},
              "separator_checksum": sep.checksum()}
    return TrainResult(sep, adv, rows, report)


def _row(t: int, vals: dict, gn: float, t0: float, cfg: TrainConfig) -> TrainLogRow:
    wall = int((time.perf_counter() - t0) * 1000) if cfg.log_wall_time else 0
    return TrainLogRow(t, vals["lat"], vals.get("img", 0.0), vals.get("advD", 0.0), vals.get("advR", 0.0), gn, wall)
