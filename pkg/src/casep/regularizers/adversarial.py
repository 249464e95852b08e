"""Common-consistency discriminator, independence regressor, and the adversary bundle.

Networks are plain parameter dicts keyed with a prefix per network
(``D.``, ``R.``, ``Dmi.``, ``T.``) so a whole bundle serializes as one dict.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from casep.nn import AdamState, MlpSpec, Tape, adam_step, init_random, mlp
from casep.nn import tape as T
from casep.nn.tape import Node
from casep.regularizers import mi

log = logging.getLogger(__name__)

SIDES_D = ("train-D", "fool-D")
SIDES_R = ("train-R", "fool-R")
MODES = ("none", "adv", "disc-mi", "knn-mi", "mine")


class ContractError(ValueError):
    pass


def disc_spec(d_w: int, width: int = 64) -> MlpSpec:
    return MlpSpec(d_w, 1, depth=2, width=width, activation="relu")


def regressor_spec(d_w: int, depth: int = 3, width: int = 64) -> MlpSpec:
    return MlpSpec(d_w, d_w, depth=depth, width=width)


def disc_logits(c: Node, spec: MlpSpec, p: dict[str, Node], prefix: str = "D.") -> Node:
    return T.reshape(mlp(c, spec, p, prefix), (c.value.shape[0],))


def _check_batches(*nodes):
    for n in nodes:
        if n is not None and n.value.shape[0] == 0:
            raise ContractError("empty batch")


def disc_adversarial_loss(c_x: Node, c_y: Node, spec: MlpSpec, p: dict[str, Node], side: str,
                          prefix: str = "D.") -> Node:
    """Per-sample BCE of D on common factors.

    train-D labels Y as 1 and X as 0. fool-D flips the labels, so the separator
    is pushed towards c_x looking like Y and c_y looking like X.
    """
    if side not in SIDES_D:
        raise ValueError(f"side must be one of {SIDES_D}")
    _check_batches(c_x, c_y)
    zx, zy = disc_logits(c_x, spec, p, prefix), disc_logits(c_y, spec, p, prefix)
    if side == "train-D":
        terms = T.sum_all(T.softplus(zx)) + T.sum_all(T.softplus(-zy))
    else:
        terms = T.sum_all(T.softplus(-zx)) + T.sum_all(T.softplus(zy))
    return T.scale(terms, 1.0 / (zx.value.shape[0] + zy.value.shape[0]))


def regressor_adversarial_loss(c_x: Node, t_x: Node | None, c_y: Node, t_y: Node, spec: MlpSpec,
                               p: dict[str, Node], side: str, prefix: str = "R.", cap: float | None = None) -> Node:
    """E|R(c_y) - t_y|^2 + E|R(c_x) - t_x|^2; t_x=None means a zero target.

    train-R minimizes it. fool-R is the separator's side, the negated error.
    With ``cap`` set, the negated error is floored at ``-cap``: once R does
    no better than the cap (the constant-predictor error recorded when R was
    fitted) the separator gains nothing from pushing the error further.
    """
    if side not in SIDES_R:
        raise ValueError(f"side must be one of {SIDES_R}")
    _check_batches(c_x, c_y)
    ry, rx = mlp(c_y, spec, p, prefix), mlp(c_x, spec, p, prefix)
    ex = rx if t_x is None else rx - t_x
    loss = T.mean_sq_norm(ry - t_y) + T.mean_sq_norm(ex)
    if side == "train-R":
        return loss
    if cap is not None and float(loss.value) >= cap:
        return T.scale(loss, 0.0) - float(cap)
    return -loss


def constant_predictor_error(t_x: np.ndarray | None, t_y: np.ndarray) -> float:
    """Regression loss of the best constant predictor (the pooled target mean)."""
    tx = np.zeros_like(t_y) if t_x is None else t_x
    mean = np.concatenate([tx, t_y]).mean(axis=0)
    return float(np.mean(np.sum((t_y - mean) ** 2, axis=1)) + np.mean(np.sum((tx - mean) ** 2, axis=1)))


@dataclass
class Factors:
    """Frozen separator outputs used to fit adversaries.

    ``t_x`` is the regression target on X (None = zero), ``t_y`` on Y.
    """

    c_x: np.ndarray
    c_y: np.ndarray
    t_x: np.ndarray | None
    t_y: np.ndarray

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        t_x = np.zeros_like(self.c_x) if self.t_x is None else self.t_x
        return np.concatenate([self.c_x, self.c_y]), np.concatenate([t_x, self.t_y])


@dataclass
class Adversaries:
    """All adversary networks for one regularizer mode plus their Adam states."""

    mode: str
    d_w: int
    specs: dict[str, MlpSpec] = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    states: dict[str, AdamState] = field(default_factory=dict)
    lrs: dict[str, float] = field(default_factory=dict)
    r_cap: float | None = None    # constant-predictor error at the last R fit
    # False: fool-R gradients reach the separator through c only, the target s is held fixed
    fool_r_through_target: bool = True

    @property
    def networks(self) -> tuple[str, ...]:
        return tuple(self.specs)

    def net_params(self, name: str) -> dict[str, np.ndarray]:
        pre = name + "."
        return {k: v for k, v in self.params.items() if k.startswith(pre)}

    def reset_states(self):
        self.states = {n: AdamState(lr=self.lrs[n]) for n in self.specs}

    def copy(self) -> "Adversaries":
        return Adversaries(self.mode, self.d_w, dict(self.specs), {k: v.copy() for k, v in self.params.items()},
                           {}, dict(self.lrs), self.r_cap, self.fool_r_through_target)


def make_adversaries(mode: str, d_w: int, rng: np.random.Generator, lr_d: float = 1e-4, lr_r: float = 2e-4,
                     lr_mi: float = 1e-4, disc_width: int = 64, reg_depth: int = 3, reg_width: int = 64,
                     critic_width: int = 64) -> Adversaries:
    """D is present in every regularized mode; the second network depends on the mode."""
    if mode not in MODES:
        raise ValueError(f"regularizer mode must be one of {MODES}")
    adv = Adversaries(mode, d_w)
    if mode == "none":
        return adv
    adv.specs["D"] = disc_spec(d_w, disc_width)
    adv.lrs["D"] = lr_d
    if mode == "adv":
        adv.specs["R"] = regressor_spec(d_w, reg_depth, reg_width)
        adv.lrs["R"] = lr_r
    elif mode == "disc-mi":
        adv.specs["Dmi"] = mi.critic_spec(d_w, d_w, critic_width, "relu")
        adv.lrs["Dmi"] = lr_mi
    elif mode == "mine":
        adv.specs["T"] = mi.critic_spec(d_w, d_w, critic_width, "leaky_relu")
        adv.lrs["T"] = lr_mi
    for name, spec in adv.specs.items():
        adv.params.update(init_random(spec, rng, name + "."))
    adv.reset_states()
    return adv


def _net_loss(adv: Adversaries, name: str, tape: Tape, p: dict[str, Node], f: Factors, ix, iy,
              rng: np.random.Generator) -> Node:
    spec = adv.specs[name]
    if name == "D":
        return disc_adversarial_loss(tape.const(f.c_x[ix]), tape.const(f.c_y[iy]),
                                     spec, p, "train-D")
    if name == "R":
        t_x = None if f.t_x is None else tape.const(f.t_x[ix])
        return regressor_adversarial_loss(tape.const(f.c_x[ix]), t_x,
                                          tape.const(f.c_y[iy]), tape.const(f.t_y[iy]),
                                          spec, p, "train-R")
    c, s = f.pooled()
    n_x = f.c_x.shape[0]
    rows = np.concatenate([ix, n_x + iy])
    cb, sb = c[rows], s[rows]
    sm = sb[mi.derangement(len(rows), rng)]
    if name == "Dmi":
        return mi.joint_vs_shuffled_bce(tape.const(cb), tape.const(sb), tape.const(sm), spec, p)
    return -mi.dv_bound(tape.const(cb), tape.const(sb), tape.const(sm), spec, p)


def adversary_losses(adv: Adversaries, f: Factors, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Training losses of every network on the full factor sets (no update)."""
    rng = np.random.default_rng(0) if rng is None else rng
    ix, iy = np.arange(f.c_x.shape[0]), np.arange(f.c_y.shape[0])
    out = {}
    for name in adv.specs:
        tape = Tape()
        out[name] = float(_net_loss(adv, name, tape, tape.bind(adv.net_params(name), trainable=False),
                                    f, ix, iy, rng).value)
    return out


def fit_adversaries(adv: Adversaries, f: Factors, epochs: int, batch_size: int,
                    rng: np.random.Generator, cap_regressor: bool = True) -> list[dict[str, float]]:
    """``epochs`` passes over the (frozen) factors, one Adam step per network per minibatch.

    Returns the mean training loss of each network per epoch. Also records
    the regressor cap used by the separator's fool-R term.
    """
    history: list[dict[str, float]] = []
    if epochs <= 0 or not adv.specs:
        return history
    n_x, n_y = f.c_x.shape[0], f.c_y.shape[0]
    if np.ptp(f.c_x, axis=0).max(initial=0.0) == 0 and np.ptp(f.c_y, axis=0).max(initial=0.0) == 0:
        log.warning("adversary fit on degenerate factors (all rows identical)")
    n = min(n_x, n_y)
    bs = max(2, min(batch_size, n))
    for _ in range(epochs):
        px, py = rng.permutation(n_x), rng.permutation(n_y)
        sums = {name: 0.0 for name in adv.specs}
        batches = 0
        for start in range(0, n - bs + 1, bs):
            ix, iy = px[start:start + bs], py[start:start + bs]
            for name in adv.specs:
                net = adv.net_params(name)
                tape = Tape()
                loss = _net_loss(adv, name, tape, tape.bind(net), f, ix, iy, rng)
                adam_step(adv.states[name], net, tape.backward(loss))
                adv.params.update(net)
                sums[name] += float(loss.value)
            batches += 1
        history.append({k: v / batches for k, v in sums.items()})
    if "R" in adv.specs:
        adv.r_cap = constant_predictor_error(f.t_x, f.t_y) if cap_regressor else None
    return history


def disc_accuracy(adv: Adversaries, c_x: np.ndarray, c_y: np.ndarray) -> float:
    """Held-out accuracy of D at threshold 0.5 (Y = 1)."""
    tape = Tape()
    p = tape.bind(adv.net_params("D"), trainable=False)
    zx = disc_logits(tape.const(c_x), adv.specs["D"], p).value
    zy = disc_logits(tape.const(c_y), adv.specs["D"], p).value
    return float((np.sum(zx < 0) + np.sum(zy >= 0)) / (len(zx) + len(zy)))


def fool_terms(adv: Adversaries, tape: Tape, c_x: Node, c_y: Node, s_x: Node, s_y: Node,
               t_x: Node | None, t_y: Node, rng: np.random.Generator) -> dict[str, Node]:
    """Separator-side regularizer terms with adversaries frozen.

    Returns ``advD`` (fool-D BCE) and ``advR``: the negated regressor loss in
    ``adv`` mode, or the MI term for the MI modes. The kNN term is a constant
    (count statistics carry no gradient).
    """
    if adv.mode == "none":
        return {}
    p = tape.bind(adv.params, trainable=False)
    out = {"advD": disc_adversarial_loss(c_x, c_y, adv.specs["D"], p, "fool-D")}
    if adv.mode == "adv":
        if not adv.fool_r_through_target:
            t_x = None if t_x is None else tape.const(t_x.value)
            t_y = tape.const(t_y.value)
        out["advR"] = regressor_adversarial_loss(c_x, t_x, c_y, t_y,
                                                 adv.specs["R"], p, "fool-R", cap=adv.r_cap)
        return out
    c = T.concat([c_x, c_y], axis=0)
    s = T.concat([s_x, s_y], axis=0)
    if adv.mode == "disc-mi":
        out["advR"] = mi.disc_mi_value(c, s, adv.specs["Dmi"], p)
    elif adv.mode == "mine":
        sm = T.take_rows(s, mi.derangement(s.value.shape[0], rng))
        out["advR"] = mi.dv_bound(c, s, sm, adv.specs["T"], p)
    else:
        out["advR"] = tape.const(np.array(mi.knn_mi_estimate(c.value, s.value, k=5).value))
    return out
