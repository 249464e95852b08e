"""Probing classifiers, the separation metric, swap scoring, PCA traversal, interpolation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.model_selection import StratifiedKFold

from casep.regularizers import knn_mi_estimate
from casep.separator import FactorPair, SeparatorParams, split, swap
from casep.world import LabeledDataset, World, clean_observation, oracle_swap_batch, oracle_truths

SPACES = ("common", "salient", "salient1", "salient2")


class EvalContractError(ValueError):
    pass


@dataclass
class ProbeResult:
    space: str
    attribute: str
    fold_accuracies: list[float]
    mean: float
    std: float

    def to_json(self) -> dict:
        return {"space": self.space, "attribute": self.attribute, "fold_accuracies": list(self.fold_accuracies),
                "mean": self.mean, "std": self.std}


@dataclass
class DeltaMetric:
    value: float
    mode: str

    def to_json(self) -> dict:
        return {"value": self.value, "mode": self.mode}


# probes ----------------------------------------------------------------------

def _logistic_gd(X: np.ndarray, y: np.ndarray, iters: int, l2: float) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent on mean log-loss + (l2/2)|w|^2, step 1/L."""
    n, d = X.shape
    # the log-loss Hessian is bounded by X^T X / (4n)
    lip = 0.25 * float(np.linalg.eigvalsh(X.T @ X / n)[-1]) + 0.25 + l2
    lr = 1.0 / lip
    w, b = np.zeros(d), 0.0
    for _ in range(iters):
        z = X @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        r = p - y
        w -= lr * (X.T @ r / n + l2 * w)
        b -= lr * float(r.mean())
    return w, b


def fit_probe(features, labels, folds: int = 5, seed: int = 0, iters: int = 500, l2: float = 1e-4,
              space: str = "", attribute: str = "") -> ProbeResult:
    """Stratified k-fold logistic-regression probe; features standardized on each training fold."""
    X = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) != 2:
        raise EvalContractError(f"probe needs binary labels, got classes {classes.tolist()}")
    y = (y == classes[1]).astype(np.float64)
    if min(np.sum(y == 0), np.sum(y == 1)) < max(10, folds):
        raise EvalContractError("probe needs at least 10 samples per class")
    accs = []
    for tr, te in StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed).split(X, y):
        assert len(np.unique(y[tr])) == 2
        mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        w, b = _logistic_gd((X[tr] - mu) / sd, y[tr], iters, l2)
        pred = ((X[te] - mu) / sd @ w + b) > 0
        accs.append(float(np.mean(pred == (y[te] == 1))))
    return ProbeResult(space, attribute, accs, float(np.mean(accs)), float(np.std(accs)))


def delta_metric(C: float, S: float, mode: str) -> DeltaMetric:
    """|expected_C - C| + |expected_S - S|, rounded to 12 decimals to drop float noise.

    salient-attribute mode expects (C, S) = (0.5, 1.0); common-attribute mode (1.0, 0.5).
    """
    if not (0.0 <= C <= 1.0 and 0.0 <= S <= 1.0):
        raise EvalContractError("accuracies must lie in [0, 1]")
    if mode == "salient-attribute":
        value = abs(0.5 - C) + abs(1.0 - S)
    elif mode == "common-attribute":
        value = abs(1.0 - C) + abs(0.5 - S)
    else:
        raise EvalContractError(f"unknown delta mode {mode!r}")
    return DeltaMetric(round(value, 12), mode)


@dataclass
class SeparationRow:
    attribute: str
    probes: dict[str, ProbeResult]
    delta: DeltaMetric | None = None

    def to_json(self) -> dict:
        return {"attribute": self.attribute, "probes": {k: v.to_json() for k, v in self.probes.items()},
                "delta": None if self.delta is None else self.delta.to_json()}


def _sign_label(v: np.ndarray) -> np.ndarray:
    return (v > 0).astype(np.int64)


def separation_report(sep: SeparatorParams, world: World, x_test: LabeledDataset, y_test: LabeledDataset,
                      folds: int = 5, seed: int = 0) -> list[SeparationRow]:
    """Probe each learned space for each attribute.

    Single-salient: attributes "salient" (X vs Y membership, expects C 0.5, S 1.0)
    and "common" (sign of c_true[idx], expects C 1.0, S 0.5), on pooled X and Y.
    Multi-salient: "x-attribute" (sign of s1_true[0] within X) and
    "y-attribute" (sign of s2_true[0] within Y), probed on c, s1, s2.
    """
    fx, fy = split(x_test.latents, sep), split(y_test.latents, sep)
    tx, ty = oracle_truths(x_test), oracle_truths(y_test)
    rows = []
    if sep.spec.n_salient == 1:
        c = np.concatenate([fx.c, fy.c])
        s = np.concatenate([fx.s, fy.s])
        labels = {"salient": np.concatenate([tx.attr_salient, ty.attr_salient]),
                  "common": np.concatenate([tx.attr_common, ty.attr_common])}
        for attr, mode in (("salient", "salient-attribute"), ("common", "common-attribute")):
            pc = fit_probe(c, labels[attr], folds, seed, space="common", attribute=attr)
            ps = fit_probe(s, labels[attr], folds, seed, space="salient", attribute=attr)
            rows.append(SeparationRow(attr, {"common": pc, "salient": ps}, delta_metric(pc.mean, ps.mean, mode)))
        return rows
    d = world.cfg.d_s_true
    for attr, f, lab in (("x-attribute", fx, _sign_label(tx.s_true[:, 0])),
                         ("y-attribute", fy, _sign_label(ty.s_true[:, d]))):
        probes = {name: fit_probe(feat, lab, folds, seed, space=name, attribute=attr)
                  for name, feat in (("common", f.c), ("salient1", f.s1), ("salient2", f.s2))}
        rows.append(SeparationRow(attr, probes))
    return rows


# swaps -----------------------------------------------------------------------

def swap_score(sep: SeparatorParams, world: World, test_x: LabeledDataset, test_y: LabeledDataset) -> dict:
    """Oracle-scored swap quality on paired test samples (row i of X with row i of Y)."""
    if len(test_x) != len(test_y):
        raise EvalContractError("swap scoring needs paired test sets of equal length")
    fx, fy = split(test_x.latents, sep), split(test_y.latents, sep)
    tx, ty = oracle_truths(test_x), oracle_truths(test_y)
    target = oracle_swap_batch(world, tx, ty)
    x_to_y, _ = swap(fx, fy)
    clean_x = world.observe(world.mix(tx.c_true, tx.s_true))
    clean_y = world.observe(world.mix(ty.c_true, ty.s_true))

    def mse(a, b):
        return float(np.mean(np.sum((a - b) ** 2, axis=1)))

    return {
        "swap_mse": mse(world.observe(x_to_y), target),
        "recon_mse": 0.5 * (mse(world.observe(fx.reconstruction()), clean_x)
                            + mse(world.observe(fy.reconstruction()), clean_y)),
        "baseline_mse": mse(world.observe(test_x.latents), target),
    }


# PCA traversal and interpolation --------------------------------------------

@dataclass
class PcaBasis:
    components: np.ndarray              # (m, d), rows orthonormal
    explained_variances: np.ndarray     # (m,), non-increasing
    mean: np.ndarray
    flags: dict = field(default_factory=dict)


def pca_salient(salient_features, m: int) -> PcaBasis:
    """Top-m principal directions; each sign fixed so its largest-magnitude coordinate is positive."""
    F = np.asarray(salient_features, dtype=np.float64)
    n, d = F.shape
    if not 1 <= m < n or m > d:
        raise EvalContractError(f"need n > m >= 1 and m <= d, got n={n}, m={m}, d={d}")
    mean = F.mean(axis=0)
    Z = F - mean
    cov = Z.T @ Z / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:m]
    vals = np.clip(vals[order], 0.0, None)
    comps = vecs[:, order].T.copy()
    flags = {}
    if not np.any(Z):
        vals = np.zeros(m)
        comps = np.eye(d)[:m]
        flags["zero_variance"] = True
    for i in range(m):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PcaBasis(comps, vals, mean, flags)


def traverse_salient(sep: SeparatorParams, world: World, x_sample, basis: PcaBasis, direction_idx: int,
                     alphas) -> np.ndarray:
    """G*(c_x + alpha * sigma_j * v_j) for each alpha; one row per alpha."""
    if not 0 <= direction_idx < len(basis.explained_variances):
        raise EvalContractError(f"direction {direction_idx} out of range")
    alphas = np.asarray(alphas, dtype=np.float64)
    if not np.all(np.isfinite(alphas)):
        raise EvalContractError("alpha grid must be finite")
    c = split(np.asarray(x_sample, dtype=np.float64), sep).c
    step = np.sqrt(basis.explained_variances[direction_idx]) * basis.components[direction_idx]
    return world.observe(c[None, :] + alphas[:, None] * step[None, :])


def interpolate_salient(sep: SeparatorParams, world: World, x_sample, y_sample, alphas) -> np.ndarray:
    """G*(c_x + alpha * s_y) for alpha in [0, 1]; alpha=1 reproduces the swap path."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if np.any(alphas < 0) or np.any(alphas > 1):
        raise EvalContractError("interpolation alphas must lie in [0, 1]")
    fx = split(np.asarray(x_sample, dtype=np.float64), sep)
    s_y = split(np.asarray(y_sample, dtype=np.float64), sep).salient
    return world.observe(np.stack([fx.c + a * s_y for a in alphas]))


def reconstruct_common(sep: SeparatorParams, world: World, x_samples) -> np.ndarray:
    """G*(c_x): the alpha=0 endpoint shared by traversal and interpolation."""
    return world.observe(split(np.atleast_2d(np.asarray(x_samples, dtype=np.float64)), sep).c)


def swap_observation(sep: SeparatorParams, world: World, x_sample, y_sample) -> np.ndarray:
    x_to_y, _ = swap(split(np.asarray(x_sample, dtype=np.float64), sep),
                     split(np.asarray(y_sample, dtype=np.float64), sep))
    return world.observe(x_to_y)


def mi_on_y(sep: SeparatorParams, y_test: LabeledDataset, k: int = 5) -> dict:
    f = split(y_test.latents, sep)
    return knn_mi_estimate(f.c, f.salient, k=k).to_json()


def factor_pair(sep: SeparatorParams, w) -> FactorPair:
    return split(w, sep)


__all__ = [
    "ProbeResult", "DeltaMetric", "SeparationRow", "PcaBasis", "EvalContractError", "fit_probe", "delta_metric",
    "separation_report", "swap_score", "pca_salient", "traverse_salient", "interpolate_salient",
    "reconstruct_common", "swap_observation", "mi_on_y", "clean_observation",
]
