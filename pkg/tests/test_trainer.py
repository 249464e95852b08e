import csv
import hashlib

import numpy as np
import pytest

from casep.nn import Tape
from casep.regularizers import Factors, adversary_losses, disc_accuracy, make_adversaries
from casep.separator import Batch, LossWeights, init_separator, leak_separator, split, total_objective
from casep.trainer import (
    LOG_HEADER,
    TrainConfig,
    TrainingAborted,
    adversary_factors,
    fit_steps,
    schedule_events,
    train_stage1,
    warmup_adversaries,
    write_log,
)
from casep.world import ConfigError, LabeledDataset, WorldConfig, build_world, make_splits


def short_cfg(**kw):
    base = dict(total_steps=120, warmup_steps=40, adversary_retrain_interval=40, adversary_retrain_epochs=1,
                batch_size=16, adversary_batch_size=32, depth=2, width=24, log_interval=10, log_wall_time=False)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small():
    world = build_world(WorldConfig(d_w=12, d_c_true=4, d_s_true=2, obs_dim=10))
    return world, make_splits(world, 200, 100)


# schedule -----------------------------------------------------------------------

def test_schedule_example_fits():
    cfg = TrainConfig(total_steps=4000, warmup_steps=2000, adversary_retrain_interval=500)
    # fits include the closing step (total_steps), see the schedule docstring
    assert fit_steps(cfg) == [2000, 2500, 3000, 3500, 4000]
    ev = schedule_events(cfg)
    assert ev[0].kind == "train-separator-no-adv" and (ev[0].step, ev[0].stop) == (0, 2000)
    assert ev[1].kind == "fit-adversaries" and ev[1].step == 2000


def test_schedule_single_fit_when_interval_exceeds_remainder():
    assert fit_steps(TrainConfig(total_steps=1000, warmup_steps=800, adversary_retrain_interval=500)) == [800]


def test_schedule_long_run_scale():
    cfg = TrainConfig(total_steps=150_000, warmup_steps=130_000, adversary_retrain_interval=5_000)
    assert len(fit_steps(cfg)) == 5


def test_schedule_covers_every_step_once():
    cfg = TrainConfig(total_steps=1234, warmup_steps=100, adversary_retrain_interval=97)
    steps = [t for e in schedule_events(cfg) if e.kind != "fit-adversaries" for t in range(e.step, e.stop)]
    assert steps == list(range(1234))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=10, total_steps=5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_discriminator=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(adversary_retrain_interval=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig.from_dict({"weights": {"adv_d": 0.5}, "seed": 3})
    assert cfg.weights.adv_d == 0.5 and cfg.seed == 3
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# adversary warm-up ----------------------------------------------------------------

def test_warmup_zero_epochs_leaves_adversaries_unchanged(small):
    world, d = small
    adv = make_adversaries("adv", 12, np.random.default_rng(0))
    before = {k: v.copy() for k, v in adv.params.items()}
    warmup_adversaries(d["x_train"], d["y_train"], leak_separator(12), adv, epochs=0)
    assert all(np.array_equal(before[k], adv.params[k]) for k in before)


def test_warmup_on_leak_detects_domain_and_descends():
    world = build_world(WorldConfig())
    d = make_splits(world, 2000, 1000)
    sep = leak_separator(32)
    adv = make_adversaries("adv", 32, np.random.default_rng(0))
    f = adversary_factors(sep, d["x_train"].latents, d["y_train"].latents)
    before = adversary_losses(adv, f)["D"]
    hist = warmup_adversaries(d["x_train"], d["y_train"], sep, adv, epochs=20)
    assert adversary_losses(adv, f)["D"] <= before and hist[-1]["D"] <= hist[0]["D"]
    acc = disc_accuracy(adv, split(d["x_test"].latents, sep).c, split(d["y_test"].latents, sep).c)
    assert acc > 0.9


def test_adversary_factors_targets():
    sep = leak_separator(6)
    w = np.ones((3, 6))
    f = adversary_factors(sep, w, 2 * w)
    assert f.t_x is None and np.array_equal(f.c_y, 2 * w) and np.all(f.t_y == 0)
    f2 = adversary_factors(leak_separator(6, n_salient=2), w, w)
    assert isinstance(f2, Factors) and f2.t_x is not None


# training ---------------------------------------------------------------------------

def test_warmup_gradient_has_no_adversary_contribution(small):
    world, d = small
    cfg = short_cfg()
    sep = init_separator(cfg.separator_spec(12, 1), np.random.default_rng(0), 0.05)
    adv = make_adversaries("adv", 12, np.random.default_rng(1))
    adv.r_cap = None
    b = Batch(d["x_train"].latents[:16], d["y_train"].latents[:16], d["x_train"].observations[:16],
              d["y_train"].observations[:16])
    grads = []
    for adversarial, weights in ((False, LossWeights()), (True, LossWeights(adv_r=0.0, adv_d=0.0))):
        tape = Tape()
        total, _ = total_objective(sep, tape, b, weights, world, adv, adversarial=adversarial)
        grads.append(tape.backward(total))
    assert all(np.array_equal(grads[0][k], grads[1][k]) for k in grads[0])


def _digest(obj: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(obj):
        h.update(k.encode())
        h.update(np.ascontiguousarray(obj[k]).tobytes())
    return h.hexdigest()


def test_alternation_discipline(small):
    world, d = small
    seen = []
    train_stage1(world, short_cfg(), d["x_train"], d["y_train"],
                 on_event=lambda e, sep, adv: seen.append((e.kind, sep.checksum(), _digest(adv.params))))
    seen.append(seen[-1])
    for (kind, s0, a0), (_, s1, a1) in zip(seen, seen[1:]):
        if kind == "fit-adversaries":
            assert s0 == s1        # refit leaves the separator alone
        else:
            assert a0 == a1        # separator steps leave adversaries alone
    kinds = [k for k, _, _ in seen[:-1]]
    assert kinds.count("fit-adversaries") == 3


def test_adversaries_actually_move_between_fits(small):
    world, d = small
    digests = []

    def hook(e, sep, adv):
        if e.kind == "fit-adversaries":
            digests.append(_digest(adv.params))

    train_stage1(world, short_cfg(), d["x_train"], d["y_train"], on_event=hook)
    assert len(set(digests)) == len(digests)


@pytest.mark.parametrize("mode", ["none", "adv", "disc-mi", "knn-mi", "mine"])
def test_determinism_per_mode(small, mode, tmp_path):
    world, d = small
    cfg = short_cfg(regularizer_mode=mode, total_steps=80)
    a = train_stage1(world, cfg, d["x_train"], d["y_train"])
    b = train_stage1(world, cfg, d["x_train"], d["y_train"])
    assert a.separator.checksum() == b.separator.checksum()
    write_log(a.log, tmp_path / "a.csv")
    write_log(b.log, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c = train_stage1(world, short_cfg(regularizer_mode=mode, total_steps=80, seed=1), d["x_train"], d["y_train"])
    assert c.separator.checksum() != a.separator.checksum()


def test_log_rows_and_header(small, tmp_path):
    world, d = small
    res = train_stage1(world, short_cfg(), d["x_train"], d["y_train"])
    steps = [r.step for r in res.log]
    assert steps == list(range(0, 120, 10))
    assert all(np.isfinite(r.as_tuple()[1:6]).all() for r in res.log)
    write_log(res.log, tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_HEADER == ("step", "L_lat", "L_img", "L_advD", "L_advR", "grad_norm", "wall_ms")
    assert len(rows) == 13 and rows[1][-1] == "0"
    assert res.report["separator_checksum"] == res.separator.checksum()
    assert [f["step"] for f in res.report["fits"]] == [40, 80, 120]


def test_nan_aborts_with_rows(small):
    world, d = small
    x = d["x_train"]
    lat = x.latents.copy()
    lat[:] = np.nan
    bad = LabeledDataset(lat, x.observations, x.domain, x._truths)
    with pytest.raises(TrainingAborted) as info:
        train_stage1(world, short_cfg(), bad, d["y_train"])
    assert info.value.rows and info.value.rows[-1].step == 0


def test_none_mode_reduces_latent_loss_from_perturbed_start(small):
    world, d = small
    cfg = short_cfg(regularizer_mode="none", total_steps=600, warmup_steps=300, init_noise=0.3)
    res = train_stage1(world, cfg, d["x_train"], d["y_train"])
    assert res.log[-1].L_lat <= 0.05 * res.log[0].L_lat
