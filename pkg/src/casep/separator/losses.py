"""Latent- and observation-space separation losses and the weighted total.

Tape-level builders (``*_term``) take factor nodes and return batch-mean
scalars; the numpy wrappers below them evaluate the same quantities for a
plain array input and are what tests and evaluation call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from casep.nn import Tape
from casep.nn import tape as T
from casep.nn.tape import Node
from casep.separator.model import SeparatorParams, factor_nodes
from casep.world import ConfigError


class LossContractError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    image: float = 1.0      # lambda_1
    latent: float = 1.0     # lambda_2
    adv_r: float = 1.0      # lambda_3 (regressor or MI term)
    adv_d: float = 0.01     # lambda_4

    def validate(self) -> "LossWeights":
        for name, v in self.__dict__.items():
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")
        return self


@dataclass
class Batch:
    """Paired minibatches; observations are only needed for the image term."""

    w_x: np.ndarray
    w_y: np.ndarray
    o_x: np.ndarray | None = None
    o_y: np.ndarray | None = None

    def __post_init__(self):
        if len(self.w_x) == 0 or len(self.w_y) == 0:
            raise LossContractError("batches must be non-empty")


# tape level ------------------------------------------------------------------

def latent_x_term(w: Node, c: Node, s: Node | None = None) -> Node:
    """mean |c + s - w|^2 on X; with ``s`` None this is mean |c - w|^2."""
    return T.mean_sq_norm((c if s is None else c + s) - w)


def latent_y_term(w: Node, c: Node, s: Node) -> Node:
    return T.mean_sq_norm(c + s - w)


def salient_norm_term(s: Node) -> Node:
    return T.mean_sq_norm(s)


def observation_term(world, o: Node, latent: Node) -> Node:
    """mean |o - G*(latent)|^2."""
    return T.mean_sq_norm(o - world.observe_node(latent))


def _require_obs_map(world):
    if world is None or not world.has_observation_map:
        raise ConfigError("the image-space loss needs a world with an observation map")


def separation_terms(sep: SeparatorParams, tape: Tape, p: dict[str, Node], batch: Batch,
                     world=None) -> tuple[dict[str, Node], dict[str, Node], dict[str, Node]]:
    """Factor nodes for both domains plus the reconstruction terms ``lat`` and (if world) ``img``.

    Single-salient: lat = |c_x - w_x|^2 + |c_y + s_y - w_y|^2 + |s_x|^2.
    Multi-salient:  lat = |c_x + s1_x - w_x|^2 + |c_y + s2_y - w_y|^2 + |s2_x|^2 + |s1_y|^2.
    The image term decodes c + (all salient parts) through G*.
    """
    wx, wy = tape.const(batch.w_x), tape.const(batch.w_y)
    fx, fy = factor_nodes(wx, sep.spec, p), factor_nodes(wy, sep.spec, p)
    if sep.spec.n_salient == 1:
        lat = latent_x_term(wx, fx["c"]) + latent_y_term(wy, fy["c"], fy["s"]) + salient_norm_term(fx["s"])
        rec_x, rec_y = fx["c"] + fx["s"], fy["c"] + fy["s"]
    else:
        lat = (latent_x_term(wx, fx["c"], fx["s1"]) + latent_y_term(wy, fy["c"], fy["s2"])
               + salient_norm_term(fx["s2"]) + salient_norm_term(fy["s1"]))
        rec_x = fx["c"] + fx["s1"] + fx["s2"]
        rec_y = fy["c"] + fy["s1"] + fy["s2"]
    terms = {"lat": lat}
    if world is not None:
        _require_obs_map(world)
        if batch.o_x is None or batch.o_y is None:
            raise LossContractError("image term needs observations in the batch")
        terms["img"] = (observation_term(world, tape.const(batch.o_x), rec_x)
                        + observation_term(world, tape.const(batch.o_y), rec_y))
    return fx, fy, terms


def salient_total(f: dict[str, Node]) -> Node:
    return f["s"] if "s" in f else f["s1"] + f["s2"]


def total_objective(sep: SeparatorParams, tape: Tape, batch: Batch, weights: LossWeights, world=None,
                    adversaries=None, rng: np.random.Generator | None = None,
                    adversarial: bool = True, p: dict[str, Node] | None = None) -> tuple[Node, dict[str, Node]]:
    """lambda_1 L_img + lambda_2 L_lat + lambda_3 L_advR + lambda_4 L_advD on one tape.

    Terms whose weight is zero are still evaluated for logging but are kept
    off the gradient path. With ``adversarial`` False (warm-up) the adversary
    terms are neither evaluated nor differentiated. ``p`` supplies parameters
    already bound to ``tape`` (finite-difference checks use this).
    """
    from casep.regularizers import fool_terms

    weights.validate()
    p = tape.bind(sep.params) if p is None else p
    has_img = world is not None and world.has_observation_map and batch.o_x is not None
    if weights.image > 0 and not has_img:
        _require_obs_map(world)
        raise LossContractError("image term needs observations in the batch")
    fx, fy, terms = separation_terms(sep, tape, p, batch, world if has_img else None)
    total = T.scale(terms["lat"], weights.latent)
    if weights.image > 0:
        total = total + T.scale(terms["img"], weights.image)
    if adversarial and adversaries is not None and adversaries.mode != "none":
        rng = np.random.default_rng(0) if rng is None else rng
        multi = sep.spec.n_salient == 2
        s_x, s_y = salient_total(fx), salient_total(fy)
        adv = fool_terms(adversaries, tape, fx["c"], fy["c"], s_x, s_y,
                         s_x if multi else None, s_y, rng)
        terms.update(adv)
        if weights.adv_d > 0:
            total = total + T.scale(adv["advD"], weights.adv_d)
        if weights.adv_r > 0 and adversaries.mode != "knn-mi":
            total = total + T.scale(adv["advR"], weights.adv_r)
    return total, terms


# numpy wrappers --------------------------------------------------------------

def _factors(w, sep: SeparatorParams):
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    if w.shape[0] == 0:
        raise LossContractError("empty batch")
    tape = Tape()
    wn = tape.const(w)
    return tape, wn, factor_nodes(wn, sep.spec, tape.bind(sep.params, trainable=False))


def latent_loss_x(w_x, sep: SeparatorParams) -> float:
    """|S_c(w_x) - w_x|^2 (batch mean for 2D input)."""
    _, w, f = _factors(w_x, sep)
    return float(latent_x_term(w, f["c"]).value)


def latent_loss_y(w_y, sep: SeparatorParams) -> float:
    """|S_c(w_y) + S_s(w_y) - w_y|^2 (batch mean for 2D input)."""
    _, w, f = _factors(w_y, sep)
    return float(latent_y_term(w, f["c"], salient_total(f)).value)


def salient_norm_penalty(w_x, sep: SeparatorParams) -> float:
    """|S_s(w_x)|^2 (batch mean for 2D input)."""
    _, _, f = _factors(w_x, sep)
    return float(salient_norm_term(salient_total(f)).value)


def latent_loss_total(batch_x, batch_y, sep: SeparatorParams) -> float:
    """Batch mean of latent_loss_x + latent_loss_y + salient_norm_penalty."""
    if sep.spec.n_salient != 1:
        raise ConfigError("latent_loss_total is the single-salient objective; use multi_salient_losses")
    tape = Tape()
    _, _, terms = separation_terms(sep, tape, tape.bind(sep.params, trainable=False), Batch(batch_x, batch_y))
    return float(terms["lat"].value)


def observation_recon_loss(w_x, o_x, w_y, o_y, sep: SeparatorParams, world) -> float:
    """mean |o_x - G*(c_x + s_x)|^2 + mean |o_y - G*(c_y + s_y)|^2."""
    _require_obs_map(world)
    tape = Tape()
    _, _, terms = separation_terms(sep, tape, tape.bind(sep.params, trainable=False),
                                   Batch(w_x, w_y, o_x, o_y), world)
    return float(terms["img"].value)


def multi_salient_losses(batch_x, batch_y, sep: SeparatorParams, world=None, o_x=None, o_y=None) -> float:
    """Three-branch reconstruction and cross-salient penalties (+ image analog when ``world`` is given)."""
    if sep.spec.n_salient != 2:
        raise ConfigError("multi_salient_losses needs a separator with two salient branches")
    tape = Tape()
    _, _, terms = separation_terms(sep, tape, tape.bind(sep.params, trainable=False),
                                   Batch(batch_x, batch_y, o_x, o_y), world)
    return float(sum(float(v.value) for v in terms.values()))


def total_separation_loss(batch: Batch, sep: SeparatorParams, adversaries, weights: LossWeights,
                          world=None, rng: np.random.Generator | None = None) -> tuple[float, dict[str, float]]:
    """Weighted total and the unweighted terms, adversaries frozen."""
    tape = Tape()
    total, terms = total_objective(sep, tape, batch, weights, world, adversaries, rng)
    return float(total.value), {k: float(v.value) for k, v in terms.items()}
