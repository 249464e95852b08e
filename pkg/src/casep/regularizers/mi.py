"""Mutual-information estimators between common and salient factors.

Three routes:

* ``knn_mi_estimate``: Kraskov k-nearest-neighbour estimator.
* ``mine_estimate``: Donsker-Varadhan lower bound with a trained critic.
* ``disc_mi_estimate``: log-odds of a joint-vs-shuffled discriminator, ReLU clamped.

The critic and discriminator objectives are also exposed as tape functions so
the separator can minimise them with the networks frozen.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from casep.nn import AdamState, MlpSpec, Tape, adam_step, init_random, mlp
from casep.nn import tape as T
from casep.nn.tape import Node

# D_mi outputs are clamped to [P_CLAMP, 1 - P_CLAMP] before the log-ratio
P_CLAMP = 1e-7
LOGIT_CLAMP = math.log((1.0 - P_CLAMP) / P_CLAMP)


@dataclass
class MiEstimate:
    value: float
    estimator: str
    n: int
    param: int
    flags: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"estimator": self.estimator, "value_nats": float(self.value), "n": int(self.n),
                "param": int(self.param)}


# digamma ---------------------------------------------------------------------

_ASYMPTOTIC = (1.0 / 12, -1.0 / 120, 1.0 / 252, -1.0 / 240, 1.0 / 132, -691.0 / 32760)


def digamma(x):
    """psi(x) for x > 0 by upward recurrence to x >= 10, then the asymptotic series."""
    x = np.array(x, dtype=np.float64, copy=True)
    if np.any(x <= 0):
        raise ValueError("digamma is only implemented for positive arguments")
    acc = np.zeros_like(x)
    small = x < 10.0
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < 10.0
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for coef in reversed(_ASYMPTOTIC):
        series = (series + coef) * inv2
    out = acc + np.log(x) - 0.5 / x - series
    return out if out.ndim else float(out)


# shuffling -------------------------------------------------------------------

def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation with no fixed points (a random n-cycle)."""
    if n < 2:
        raise ValueError("need at least 2 rows to shuffle pairs")
    order = rng.permutation(n)
    perm = np.empty(n, dtype=np.int64)
    perm[order] = np.roll(order, -1)
    return perm


def shuffle_pairs(c_batch, s_batch, seed) -> np.ndarray:
    """Salient rows re-paired with different common rows (product-of-marginals samples)."""
    s_batch = np.asarray(s_batch)
    if len(c_batch) != len(s_batch):
        raise ValueError("c and s batches must have equal length")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return s_batch[derangement(len(s_batch), rng)]


# kNN (Kraskov) ---------------------------------------------------------------

def _rms_scale(a: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=0)
    rms = np.sqrt(np.mean(a * a))
    return a / rms if rms > 0 else a


def _sq_dists(a: np.ndarray, rows: slice, sq: np.ndarray) -> np.ndarray:
    d2 = sq[rows, None] + sq[None, :] - 2.0 * (a[rows] @ a.T)
    return np.maximum(d2, 0.0)


def knn_mi_estimate(c_samples, s_samples, k: int = 5, standardize: bool = True,
                    joint_metric: str = "max", chunk: int = 256,
                    threads: int | None = None) -> MiEstimate:
    """Kraskov estimator psi(k) + psi(N) - <psi(n_c + 1) + psi(n_s + 1)>.

    Marginal distances are Euclidean. The joint radius eps_i is the distance
    to the k-th joint neighbour under ``joint_metric``: ``"max"`` uses
    max(|dc|, |ds|), under which the joint ball is the product of the marginal
    balls; ``"l2"`` uses sqrt(|dc|^2 + |ds|^2). n_c, n_s count other samples
    strictly inside eps_i in each marginal. With ``standardize`` each marginal
    is centred and divided by its overall RMS (one scalar per marginal).
    """
    c = np.asarray(c_samples, dtype=np.float64).reshape(len(c_samples), -1)
    s = np.asarray(s_samples, dtype=np.float64).reshape(len(s_samples), -1)
    n = c.shape[0]
    if s.shape[0] != n:
        raise ValueError("c and s must be paired")
    if not 1 <= k < n:
        raise ValueError(f"need n > k >= 1, got n={n}, k={k}")
    if joint_metric not in ("max", "l2"):
        raise ValueError("joint_metric must be 'max' or 'l2'")
    if standardize:
        c, s = _rms_scale(c), _rms_scale(s)
    flags = {}
    z = np.concatenate([c, s], axis=1)
    _, first, counts = np.unique(z, axis=0, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = np.ones(n, dtype=bool)
        dup[first[counts == 1]] = False
        jitter = np.random.default_rng(0).uniform(-1e-10, 1e-10, size=z.shape)
        c = c + np.where(dup[:, None], jitter[:, :c.shape[1]], 0.0)
        s = s + np.where(dup[:, None], jitter[:, c.shape[1]:], 0.0)
        flags["jittered"] = int(dup.sum())

    sq_c = np.einsum("ij,ij->i", c, c)
    sq_s = np.einsum("ij,ij->i", s, s)

    def block(start: int) -> tuple[np.ndarray, np.ndarray]:
        rows = slice(start, min(start + chunk, n))
        dc = np.sqrt(_sq_dists(c, rows, sq_c))
        ds = np.sqrt(_sq_dists(s, rows, sq_s))
        dz = np.maximum(dc, ds) if joint_metric == "max" else np.sqrt(dc * dc + ds * ds)
        idx = np.arange(rows.start, rows.stop)
        local = np.arange(len(idx))
        dz[local, idx] = np.inf
        dc[local, idx] = np.inf
        ds[local, idx] = np.inf
        eps = np.partition(dz, k - 1, axis=1)[:, k - 1]
        return (dc < eps[:, None]).sum(axis=1), (ds < eps[:, None]).sum(axis=1)

    starts = list(range(0, n, chunk))
    threads = threads or int(os.environ.get("CA_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(block, starts))
    else:
        parts = [block(st) for st in starts]
    n_c = np.concatenate([p[0] for p in parts])
    n_s = np.concatenate([p[1] for p in parts])
    value = digamma(k) + digamma(n) - float(np.mean(digamma(n_c + 1.0) + digamma(n_s + 1.0)))
    return MiEstimate(float(value), "knn", n, k, flags)


# critics ---------------------------------------------------------------------

def critic_spec(d_c: int, d_s: int, width: int = 64, activation: str = "leaky_relu") -> MlpSpec:
    return MlpSpec(d_c + d_s, 1, depth=2, width=width, activation=activation)


def _scores(z: Node, spec: MlpSpec, p: dict[str, Node], prefix: str) -> Node:
    return T.reshape(mlp(z, spec, p, prefix), (z.value.shape[0],))


def dv_bound(c: Node, s: Node, s_shuffled: Node, spec: MlpSpec, p: dict[str, Node], prefix: str = "T.") -> Node:
    """Donsker-Varadhan objective mean T(c, s) - log mean exp T(c, s~), log-sum-exp stabilised."""
    joint = _scores(T.concat([c, s], axis=1), spec, p, prefix)
    marg = _scores(T.concat([c, s_shuffled], axis=1), spec, p, prefix)
    return T.mean_all(joint) - (T.logsumexp(marg) - math.log(marg.value.shape[0]))


def disc_mi_value(c: Node, s: Node, spec: MlpSpec, p: dict[str, Node], prefix: str = "Dmi.") -> Node:
    """Mean over joint samples of ReLU(log(D / (1 - D))) with D clamped away from 0 and 1."""
    logits = _scores(T.concat([c, s], axis=1), spec, p, prefix)
    return T.mean_all(T.relu(T.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)))


def joint_vs_shuffled_bce(c: Node, s: Node, s_shuffled: Node, spec: MlpSpec, p: dict[str, Node],
                          prefix: str = "Dmi.") -> Node:
    """BCE for D_mi: joint pairs labelled 1, shuffled pairs labelled 0."""
    zj = _scores(T.concat([c, s], axis=1), spec, p, prefix)
    zm = _scores(T.concat([c, s_shuffled], axis=1), spec, p, prefix)
    return 0.5 * (T.mean_all(T.softplus(-zj)) + T.mean_all(T.softplus(zm)))


def _fit_critic(kind: str, c: np.ndarray, s: np.ndarray, spec: MlpSpec, params: dict[str, np.ndarray],
                steps: int, batch_size: int, lr: float, rng: np.random.Generator,
                state: AdamState | None = None) -> AdamState:
    n = c.shape[0]
    prefix = "T." if kind == "mine" else "Dmi."
    state = AdamState(lr=lr) if state is None else state
    batch_size = min(batch_size, n)
    order, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos + batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        tape = Tape()
        p = tape.bind(params)
        cb, sb = tape.const(c[idx]), tape.const(s[idx])
        sm = tape.const(s[idx][derangement(batch_size, rng)])
        if kind == "mine":
            loss = -dv_bound(cb, sb, sm, spec, p, prefix)
        else:
            loss = joint_vs_shuffled_bce(cb, sb, sm, spec, p, prefix)
        adam_step(state, params, tape.backward(loss))
    return state


def init_critic(d_c: int, d_s: int, rng: np.random.Generator, kind: str = "mine",
                width: int = 64) -> tuple[MlpSpec, dict[str, np.ndarray]]:
    if kind == "mine":
        spec = critic_spec(d_c, d_s, width, "leaky_relu")
        return spec, init_random(spec, rng, "T.")
    spec = critic_spec(d_c, d_s, width, "relu")
    return spec, init_random(spec, rng, "Dmi.")


def mine_value(c, s, spec: MlpSpec, params: dict[str, np.ndarray], rng: np.random.Generator) -> float:
    tape = Tape()
    p = tape.bind(params, trainable=False)
    s = np.asarray(s, dtype=np.float64)
    v = dv_bound(tape.const(c), tape.const(s), tape.const(s[derangement(len(s), rng)]), spec, p)
    return float(v.value)


def mine_estimate(c_samples, s_samples, critic: tuple[MlpSpec, dict] | None = None, train_steps: int = 2000,
                  batch_size: int = 256, lr: float = 1e-3, seed: int = 0) -> MiEstimate:
    """Train the DV critic for ``train_steps`` minibatch steps, then report the bound on all samples.

    A supplied ``critic`` (spec, params) is trained in place.
    """
    c = np.asarray(c_samples, dtype=np.float64).reshape(len(c_samples), -1)
    s = np.asarray(s_samples, dtype=np.float64).reshape(len(s_samples), -1)
    if min(batch_size, c.shape[0]) < 16:
        raise ValueError("MINE needs a batch size of at least 16")
    rng = np.random.default_rng(seed)
    spec, params = critic if critic is not None else init_critic(c.shape[1], s.shape[1], rng, "mine")
    if train_steps:
        _fit_critic("mine", c, s, spec, params, train_steps, batch_size, lr, rng)
    value = mine_value(c, s, spec, params, rng)
    return MiEstimate(value, "mine", c.shape[0], batch_size)


def disc_mi_value_np(c, s, spec: MlpSpec, params: dict[str, np.ndarray]) -> float:
    tape = Tape()
    p = tape.bind(params, trainable=False)
    return float(disc_mi_value(tape.const(c), tape.const(s), spec, p).value)


def disc_mi_estimate(c_samples, s_samples, critic: tuple[MlpSpec, dict] | None = None, train_steps: int = 1000,
                     batch_size: int = 256, lr: float = 1e-3, seed: int = 0) -> MiEstimate:
    """Fit D_mi joint-vs-shuffled, then average ReLU(logit) over the joint samples."""
    c = np.asarray(c_samples, dtype=np.float64).reshape(len(c_samples), -1)
    s = np.asarray(s_samples, dtype=np.float64).reshape(len(s_samples), -1)
    rng = np.random.default_rng(seed)
    spec, params = critic if critic is not None else init_critic(c.shape[1], s.shape[1], rng, "disc")
    if train_steps:
        _fit_critic("disc", c, s, spec, params, train_steps, batch_size, lr, rng)
    return MiEstimate(disc_mi_value_np(c, s, spec, params), "disc", c.shape[0], batch_size)
