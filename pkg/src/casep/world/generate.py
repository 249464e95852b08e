"""Seeded generative worlds with known common and salient factors.

A world stands in for a pretrained encoder/generator pair: latent codes are
built as ``w = A_c f(c) + A_s f(s) + noise`` from orthonormal, mutually
orthogonal mixing bases, and observations are ``G*(w)`` for a fixed map G*.
The true factors travel with each dataset but are only reachable through
:func:`oracle_truths`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from casep.nn import tape as T
from casep.nn.tape import Node

MIXING_MODES = ("linear", "mlp-nonlinear")
X, Y = "X", "Y"

# stream ids keep every dataset on its own RNG stream
STREAMS = {"x_train": 1, "y_train": 2, "x_test": 3, "y_test": 4}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    d_w: int = 32
    d_c_true: int = 8
    d_s_true: int = 4
    mixing: str = "linear"
    noise_std: float = 0.01
    obs_dim: int = 32
    seed: int = 0
    n_salient: int = 1
    salient_mean: float = 2.0
    salient_std: float = 0.3
    common_attr_index: int = 0

    def validate(self) -> "WorldConfig":
        if min(self.d_w, self.d_c_true, self.d_s_true, self.obs_dim) < 1:
            raise ConfigError("all dimensions must be >= 1")
        if self.n_salient not in (1, 2):
            raise ConfigError("n_salient must be 1 or 2")
        need = self.d_c_true + self.n_salient * self.d_s_true
        if need > self.d_w:
            raise ConfigError(
                f"d_c_true + {self.n_salient}*d_s_true = {need} exceeds d_w = {self.d_w}")
        if self.noise_std < 0 or self.salient_std < 0:
            raise ConfigError("noise_std and salient_std must be >= 0")
        if self.mixing not in MIXING_MODES:
            raise ConfigError(f"mixing must be one of {MIXING_MODES}")
        if not 0 <= self.common_attr_index < self.d_c_true:
            raise ConfigError("common_attr_index out of range")
        return self


@dataclass(frozen=True)
class GroundTruth:
    c_true: np.ndarray
    s_true: np.ndarray
    attr_common: int
    attr_salient: int


@dataclass(frozen=True)
class _Truths:
    c_true: np.ndarray        # (n, d_c_true)
    s_true: np.ndarray        # (n, n_salient * d_s_true)
    attr_common: np.ndarray   # (n,) in {0, 1}
    attr_salient: np.ndarray  # (n,) 0 for X, 1 for Y

    def __getitem__(self, i) -> GroundTruth:
        return GroundTruth(self.c_true[i], self.s_true[i], int(self.attr_common[i]), int(self.attr_salient[i]))


@dataclass(frozen=True)
class LabeledDataset:
    latents: np.ndarray
    observations: np.ndarray
    domain: str
    _truths: _Truths = field(repr=False)

    def __len__(self):
        return self.latents.shape[0]

    def __post_init__(self):
        n = self.latents.shape[0]
        if self.observations.shape[0] != n or self._truths.c_true.shape[0] != n:
            raise ValueError("parallel arrays must have equal length")

    def subset(self, idx) -> "LabeledDataset":
        t = self._truths
        return LabeledDataset(self.latents[idx], self.observations[idx], self.domain,
                              _Truths(t.c_true[idx], t.s_true[idx], t.attr_common[idx], t.attr_salient[idx]))


def oracle_truths(ds: LabeledDataset) -> _Truths:
    """Ground-truth factors of a dataset. Evaluation code only."""
    return ds._truths


def _warp(u: np.ndarray) -> np.ndarray:
    # monotone, zero-preserving componentwise warp for the nonlinear mixing mode
    return u + 0.5 * np.tanh(u)


@dataclass(frozen=True)
class World:
    cfg: WorldConfig
    A_c: np.ndarray
    A_s: tuple[np.ndarray, ...]
    obs_layers: tuple[tuple[np.ndarray, np.ndarray], ...] = ()

    @property
    def has_observation_map(self) -> bool:
        return len(self.obs_layers) > 0

    @property
    def observation_slope(self) -> float:
        # linear worlds keep G* linear so edits stay affine in the latent
        return 1.0 if self.cfg.mixing == "linear" else 0.2

    def mix(self, c_true: np.ndarray, s_true: np.ndarray) -> np.ndarray:
        """Clean latent for true factors; ``s_true`` concatenates all salient blocks."""
        f = _warp if self.cfg.mixing == "mlp-nonlinear" else (lambda u: u)
        w = f(c_true) @ self.A_c.T
        d = self.cfg.d_s_true
        for j, A in enumerate(self.A_s):
            w = w + f(s_true[..., j * d:(j + 1) * d]) @ A.T
        return w

    def observe(self, w: np.ndarray) -> np.ndarray:
        h = np.asarray(w, dtype=np.float64)
        for i, (W, b) in enumerate(self.obs_layers):
            h = h @ W.T + b
            if i < len(self.obs_layers) - 1 and self.observation_slope != 1.0:
                h = np.where(h >= 0, h, self.observation_slope * h)
        return h

    def observe_node(self, w: Node) -> Node:
        """G* on the tape (weights frozen)."""
        h = w
        for i, (W, b) in enumerate(self.obs_layers):
            h = T.linear(h, W, b)
            if i < len(self.obs_layers) - 1 and self.observation_slope != 1.0:
                h = T.leaky_relu(h, self.observation_slope)
        return h

    def projector(self, which: str) -> np.ndarray:
        """Orthogonal projector onto span(A_c) ('c'), span(A_s) ('s'), or one salient block ('s1', 's2')."""
        if which == "c":
            A = self.A_c
        elif which == "s":
            A = np.concatenate(self.A_s, axis=1)
        else:
            A = self.A_s[int(which[1:]) - 1]
        return A @ A.T


def build_world(cfg: WorldConfig) -> World:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    k = cfg.d_c_true + cfg.n_salient * cfg.d_s_true
    Q, R = np.linalg.qr(rng.standard_normal((cfg.d_w, k)))
    Q = Q * np.sign(np.diag(R))
    A_c = Q[:, :cfg.d_c_true].copy()
    A_s = tuple(Q[:, cfg.d_c_true + j * cfg.d_s_true: cfg.d_c_true + (j + 1) * cfg.d_s_true].copy()
                for j in range(cfg.n_salient))
    if cfg.obs_dim == cfg.d_w:
        obs = ((np.eye(cfg.d_w), np.zeros(cfg.d_w)),)
    else:
        hidden = max(cfg.obs_dim, cfg.d_w)
        W1 = rng.standard_normal((hidden, cfg.d_w)) / np.sqrt(cfg.d_w)
        W2 = rng.standard_normal((cfg.obs_dim, hidden)) / np.sqrt(hidden)
        obs = ((W1, np.zeros(hidden)), (W2, np.zeros(cfg.obs_dim)))
    return World(cfg, A_c, A_s, obs)


def _rng(world: World, seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([world.cfg.seed, int(seed), tag]))


def _salient_draw(cfg: WorldConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """Two-mode salient distribution.

    Coordinate 0 takes +/- mean with equal odds (the salient sub-attribute);
    the remaining coordinates sit at +mean so the salient cloud lies
    strictly on one side of a hyperplane through the origin.
    """
    d = cfg.d_s_true
    centre = np.full((n, d), cfg.salient_mean)
    centre[:, 0] *= np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return centre + cfg.salient_std * rng.standard_normal((n, d))


def _make(world: World, c: np.ndarray, s: np.ndarray, rng: np.random.Generator, domain: str) -> LabeledDataset:
    cfg = world.cfg
    w = world.mix(c, s) + cfg.noise_std * rng.standard_normal((c.shape[0], cfg.d_w))
    truths = _Truths(
        c_true=c,
        s_true=s,
        attr_common=(c[:, cfg.common_attr_index] > 0).astype(np.int64),
        attr_salient=np.full(c.shape[0], 0 if domain == X else 1, dtype=np.int64),
    )
    return LabeledDataset(w, world.observe(w), domain, truths)


def sample_background(world: World, n: int, seed: int = 0) -> LabeledDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = world.cfg
    rng = _rng(world, seed, 11)
    c = rng.standard_normal((n, cfg.d_c_true))
    s = np.zeros((n, cfg.n_salient * cfg.d_s_true))
    return _make(world, c, s, rng, X)


def sample_target(world: World, n: int, seed: int = 0) -> LabeledDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = world.cfg
    rng = _rng(world, seed, 12)
    c = rng.standard_normal((n, cfg.d_c_true))
    s = np.zeros((n, cfg.n_salient * cfg.d_s_true))
    s[:, :cfg.d_s_true] = _salient_draw(cfg, rng, n)
    return _make(world, c, s, rng, Y)


def sample_multi_salient(world: World, n: int, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """X carries the first salient block only, Y the second only."""
    cfg = world.cfg
    if cfg.n_salient != 2:
        raise ConfigError("multiple-salient sampling needs a world with two salient subspaces")
    if n < 1:
        raise ValueError("n must be >= 1")
    d = cfg.d_s_true
    out = []
    for domain, block, tag in ((X, 0, 21), (Y, 1, 22)):
        rng = _rng(world, seed, tag)
        c = rng.standard_normal((n, cfg.d_c_true))
        s = np.zeros((n, 2 * d))
        s[:, block * d:(block + 1) * d] = _salient_draw(cfg, rng, n)
        out.append(_make(world, c, s, rng, domain))
    return out[0], out[1]


def clean_observation(world: World, truth: GroundTruth) -> np.ndarray:
    return world.observe(world.mix(truth.c_true, truth.s_true))


def oracle_swap(world: World, truth_x: GroundTruth, truth_y: GroundTruth) -> np.ndarray:
    """Noise-free observation with x's common factor and y's salient factor."""
    return world.observe(world.mix(truth_x.c_true, truth_y.s_true))


def oracle_swap_batch(world: World, tx: _Truths, ty: _Truths) -> np.ndarray:
    return world.observe(world.mix(tx.c_true, ty.s_true))


def make_splits(world: World, n_train: int, n_test: int) -> dict[str, LabeledDataset]:
    """Train/test X/Y datasets on fixed RNG streams."""
    if world.cfg.n_salient == 2:
        xtr, ytr = sample_multi_salient(world, n_train, STREAMS["x_train"])
        xte, yte = sample_multi_salient(world, n_test, STREAMS["x_test"])
    else:
        xtr = sample_background(world, n_train, STREAMS["x_train"])
        ytr = sample_target(world, n_train, STREAMS["y_train"])
        xte = sample_background(world, n_test, STREAMS["x_test"])
        yte = sample_target(world, n_test, STREAMS["y_test"])
    return {"x_train": xtr, "y_train": ytr, "x_test": xte, "y_test": yte}
