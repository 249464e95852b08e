import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casep.evaluation import (
    EvalContractError,
    delta_metric,
    fit_probe,
    interpolate_salient,
    pca_salient,
    reconstruct_common,
    separation_report,
    swap_observation,
    swap_score,
    traverse_salient,
)
from casep.separator import init_separator, leak_separator, oracle_separator, SeparatorSpec
from casep.world import WorldConfig, build_world, make_splits


@pytest.fixture(scope="module")
def default_world():
    world = build_world(WorldConfig())
    return world, make_splits(world, 100, 2000)


# probes ---------------------------------------------------------------------------

def test_probe_separable_blobs():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-3, 0.5, (100, 2)), rng.normal(3, 0.5, (100, 2))])
    y = np.repeat([0, 1], 100)
    res = fit_probe(X, y)
    assert res.mean == 1.0 and len(res.fold_accuracies) == 5


def test_probe_label_feature():
    y = np.tile([0, 1], 50)
    X = np.concatenate([y[:, None].astype(float), np.random.default_rng(0).standard_normal((100, 3))], axis=1)
    assert fit_probe(X, y).mean == 1.0


def test_probe_permuted_null_and_determinism():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((2000, 8))
    y = rng.permutation(np.repeat([0, 1], 1000))
    a = fit_probe(X, y, seed=3)
    assert 0.45 <= a.mean <= 0.55
    assert fit_probe(X, y, seed=3).fold_accuracies == a.fold_accuracies
    assert all(0 <= v <= 1 for v in a.fold_accuracies)
    assert a.std == pytest.approx(np.std(a.fold_accuracies))


def test_probe_contract_errors():
    with pytest.raises(EvalContractError):
        fit_probe(np.zeros((30, 2)), np.zeros(30))
    with pytest.raises(EvalContractError):
        fit_probe(np.zeros((30, 2)), np.r_[np.zeros(25), np.ones(5)])


# delta ------------------------------------------------------------------------------

def test_delta_examples():
    assert delta_metric(0.52, 0.98, "salient-attribute").value == 0.04
    assert delta_metric(0.80, 0.51, "common-attribute").value == 0.21
    assert delta_metric(0.5, 1.0, "salient-attribute").value == 0.0
    assert delta_metric(1.0, 0.5, "common-attribute").value == 0.0
    with pytest.raises(EvalContractError):
        delta_metric(1.2, 0.5, "common-attribute")
    with pytest.raises(EvalContractError):
        delta_metric(0.5, 0.5, "other")


@given(st.floats(0, 1), st.floats(0, 1))
def test_delta_properties(C, S):
    v = delta_metric(C, S, "salient-attribute").value
    assert v >= 0
    assert v == round(abs(0.5 - C) + abs(1 - S), 12)
    assert (v == 0) == (C == 0.5 and S == 1.0)


@given(st.floats(0, 0.5), st.floats(0, 0.5))
def test_delta_symmetric_in_error_magnitudes(a, b):
    assert delta_metric(0.5 + a, 1 - b, "salient-attribute").value == \
        pytest.approx(delta_metric(0.5 + b, 1 - a, "salient-attribute").value, abs=1e-12)
    assert delta_metric(1 - a, 0.5 + b, "common-attribute").value == \
        pytest.approx(delta_metric(1 - b, 0.5 + a, "common-attribute").value, abs=1e-12)


# separation report ---------------------------------------------------------------------

def test_oracle_separator_report(default_world):
    world, d = default_world
    rows = separation_report(oracle_separator(world), world, d["x_test"], d["y_test"])
    assert [r.attribute for r in rows] == ["salient", "common"]
    assert all(r.delta.value <= 0.02 for r in rows), [r.delta.value for r in rows]
    assert rows[0].probes["salient"].mean >= 0.99 and rows[1].probes["common"].mean >= 0.99


def test_leak_separator_report(default_world):
    world, d = default_world
    rows = separation_report(leak_separator(32), world, d["x_test"], d["y_test"])
    sal = rows[0]
    assert sal.probes["common"].mean >= 0.99
    # s = 0 carries nothing, so the salient probe sits at chance and the gap is |0.5-1| + |1-0.5|
    assert sal.probes["salient"].mean == 0.5
    assert abs(sal.delta.value - 1.0) <= 0.01


def test_multi_salient_report_layout():
    world = build_world(WorldConfig(n_salient=2))
    d = make_splits(world, 50, 400)
    rows = separation_report(oracle_separator(world), world, d["x_test"], d["y_test"])
    assert [r.attribute for r in rows] == ["x-attribute", "y-attribute"]
    assert set(rows[0].probes) == {"common", "salient1", "salient2"}
    assert rows[0].probes["salient1"].mean >= 0.95 and rows[1].probes["salient2"].mean >= 0.95
    assert rows[0].delta is None


# swaps ----------------------------------------------------------------------------

def test_swap_score_oracle_and_no_edit(default_world):
    world, d = default_world
    cfg = world.cfg
    sc = swap_score(oracle_separator(world), world, d["x_test"], d["y_test"])
    assert sc["swap_mse"] <= 2 * cfg.obs_dim * cfg.noise_std ** 2
    spec = SeparatorSpec(d_w=32, depth=4, width=64)
    sep = init_separator(spec, np.random.default_rng(0), noise=0.0)
    sc = swap_score(sep, world, d["x_test"], d["y_test"])
    assert abs(sc["swap_mse"] - sc["baseline_mse"]) <= 0.05 * sc["baseline_mse"]
    with pytest.raises(EvalContractError):
        swap_score(sep, world, d["x_test"], d["y_test"].subset(np.arange(10)))


# PCA --------------------------------------------------------------------------------

def test_pca_identical_rows():
    b = pca_salient(np.ones((10, 3)), 2)
    assert np.all(b.explained_variances == 0) and b.flags.get("zero_variance")
    np.testing.assert_allclose(b.components @ b.components.T, np.eye(2), atol=1e-12)


def test_pca_axis_aligned():
    rng = np.random.default_rng(0)
    F = np.stack([1e-6 * rng.standard_normal(500), rng.standard_normal(500)], axis=1)
    b = pca_salient(F, 1)
    np.testing.assert_allclose(b.components[0], [0.0, 1.0], atol=1e-5)
    b2 = pca_salient(-F, 1)
    assert b2.components[0][1] > 0


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 5))
@settings(max_examples=40, deadline=None)
def test_pca_orthonormal_and_sorted(seed, m):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((40, 6)) @ rng.standard_normal((6, 6))
    b = pca_salient(F, m)
    assert np.all(np.abs(b.components @ b.components.T - np.eye(m)) <= 1e-10)
    assert np.all(np.diff(b.explained_variances) <= 0)


def test_pca_contract():
    with pytest.raises(EvalContractError):
        pca_salient(np.zeros((3, 4)), 3)


# traversal / interpolation ----------------------------------------------------------------

def _affine_residual(rows: np.ndarray, alphas: np.ndarray) -> float:
    A = np.stack([np.ones_like(alphas), alphas], axis=1)
    coef, *_ = np.linalg.lstsq(A, rows, rcond=None)
    return float(np.max(np.abs(A @ coef - rows)))


def test_traversal_is_affine_and_starts_at_common(default_world):
    world, d = default_world
    sep = oracle_separator(world)
    from casep.separator import split
    basis = pca_salient(split(d["y_test"].latents, sep).s, 3)
    alphas = np.linspace(-2, 2, 9)
    rows = traverse_salient(sep, world, d["x_test"].latents[0], basis, 0, alphas)
    assert rows.shape == (9, world.cfg.obs_dim)
    assert _affine_residual(rows, alphas) <= 1e-10
    np.testing.assert_allclose(rows[4], reconstruct_common(sep, world, d["x_test"].latents[0])[0], atol=1e-12)
    with pytest.raises(EvalContractError):
        traverse_salient(sep, world, d["x_test"].latents[0], basis, 3, alphas)


def test_interpolation_endpoints(default_world):
    world, d = default_world
    sep = oracle_separator(world)
    x, y = d["x_test"].latents[1], d["y_test"].latents[2]
    alphas = np.linspace(0, 1, 5)
    rows = interpolate_salient(sep, world, x, y, alphas)
    assert np.max(np.abs(rows[0] - reconstruct_common(sep, world, x)[0])) <= 1e-10
    assert np.max(np.abs(rows[-1] - swap_observation(sep, world, x, y))) <= 1e-10
    assert _affine_residual(rows, alphas) <= 1e-10
    with pytest.raises(EvalContractError):
        interpolate_salient(sep, world, x, y, [1.5])
