"""Metrics, CV schemes, baselines, interpolation oracle, and the harnesses."""

import csv

import numpy as np
import pytest
from scipy.stats import spearmanr
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from spectm.core import Dataset
from spectm.errors import ConfigError, DataError
from spectm.masking import MaskVector, targeted_mask
from spectm.model import ModelConfig, init_model
from spectm.training import FinetuneConfig, PretrainConfig, pretrain
from spectm.evaluation import (ABLATION_CONFIGS, DEFAULT_FRACTIONS, EvalReport,
                               KNNRegressor, N_SUBSAMPLES, RidgeRegressor,
                               ablation_suite, default_boundary,
                               interpolate_bands, knn_regress, label_efficiency,
                               logo_cv, metrics, reconstruction_benchmark,
                               ridge_fit, ridge_predict, stratified_subsample,
                               temporal_split, write_ablation_csv,
                               write_cv_folds_csv, write_efficiency_csv,
                               write_reconstruction_csv)

SMALL = ModelConfig(encoder_layers=1, heads=2, d_model=16, d_ff=32,
                    decoder_layers=1, dropout_p=0.1)


@pytest.fixture(scope="module")
def tiny_state(tiny_scene, table):
    cfg = PretrainConfig(epochs=2, batch_size=16, lr=1e-3, warmup=1, seed=0)
    state, _ = pretrain(tiny_scene, cfg, SMALL, table)
    return state


# ---------------------------------------------------------------------------
# Metrics vs definitional oracles
# ---------------------------------------------------------------------------

def _average_ranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(v.shape[0])
    i = 0
    while i < v.shape[0]:
        j = i
        while j + 1 < v.shape[0] and sv[j + 1] == sv[i]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def test_metrics_match_brute_force():
    rng = np.random.default_rng(12)
    for trial in range(100):
        n = int(rng.integers(2, 51))
        if trial % 2:  # integer-valued vectors force rank ties
            pred = rng.integers(0, 4, size=n).astype(float)
            truth = rng.integers(0, 4, size=n).astype(float)
            if np.ptp(truth) == 0 or np.ptp(pred) == 0:
                continue
        else:
            pred = rng.normal(size=n)
            truth = rng.normal(size=n)
        rep = metrics(pred, truth)
        assert abs(rep.rmse - np.sqrt(((pred - truth) ** 2).mean())) <= 1e-12
        want_r2 = 1.0 - ((pred - truth) ** 2).sum() / ((truth - truth.mean()) ** 2).sum()
        assert abs(rep.r2 - want_r2) <= 1e-12
        assert abs(rep.pearson_r - np.corrcoef(pred, truth)[0, 1]) <= 1e-12
        want_rho = np.corrcoef(_average_ranks(pred), _average_ranks(truth))[0, 1]
        assert abs(rep.spearman_rho - want_rho) <= 1e-12


def test_metrics_hand_example():
    truth = np.array([0.0, 1.0, 2.0, 3.0])
    pred = truth + np.array([1.0, -1.0, 0.0, 0.0])
    rep = metrics(pred, truth)
    # ss_res=2 over ss_tot=5, rmse over 4 points
    assert rep.r2 == pytest.approx(0.6, abs=1e-15)
    assert rep.rmse == pytest.approx(np.sqrt(0.5), abs=1e-15)
    assert rep.n == 4 and rep.scale == "log"


def test_metrics_tied_spearman_matches_scipy():
    pred = np.array([1.0, 2.0, 2.0, 3.0, 1.0])
    truth = np.array([1.0, 2.0, 3.0, 3.0, 2.0])
    rep = metrics(pred, truth)
    assert rep.spearman_rho == pytest.approx(spearmanr(pred, truth).statistic,
                                             abs=1e-12)


def test_metrics_degenerate_and_errors():
    rep = metrics(np.array([1.0, 2.0]), np.array([3.0, 3.0]))
    assert np.isnan(rep.r2) and np.isnan(rep.pearson_r) and np.isnan(rep.spearman_rho)
    assert rep.rmse == pytest.approx(np.sqrt(2.5))
    with pytest.raises(DataError):
        metrics(np.array([1.0]), np.array([1.0]))
    with pytest.raises(DataError):
        metrics(np.zeros(3), np.zeros(4))
    with pytest.raises(DataError):
        metrics(np.zeros((2, 2)), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# LOGO-CV
# ---------------------------------------------------------------------------

def test_logo_cv_partitions_by_group(tiny_scene):
    seen = []

    def runner(train, test):
        seen.append(({s.composite_group for s in train},
                     {s.composite_group for s in test}))
        return np.log1p([s.microcystin for s in test])  # oracle predictions

    per_group, pooled = logo_cv(tiny_scene, runner)
    all_groups = set(range(10))
    assert len(seen) == 10
    for train_g, test_g in seen:
        assert len(test_g) == 1
        assert train_g == all_groups - test_g
    assert sorted(per_group) == sorted(all_groups)
    # perfect predictions pool to r2 == 1
    assert pooled.r2 == pytest.approx(1.0, abs=1e-15)
    assert pooled.n == len(tiny_scene.labeled())


def test_logo_cv_pooled_matches_manual(tiny_scene):
    def mean_runner(train, test):
        m = np.log1p([s.microcystin for s in train]).mean()
        return np.full(len(test), m)

    per_group, pooled = logo_cv(tiny_scene, mean_runner)
    preds, truths = [], []
    labeled = tiny_scene.labeled()
    for g in sorted({s.composite_group for s in labeled}):
        train = [s for s in labeled if s.composite_group != g]
        test = [s for s in labeled if s.composite_group == g]
        preds.extend(mean_runner(train, test))
        truths.extend(np.log1p([s.microcystin for s in test]))
    want = metrics(np.asarray(preds), np.asarray(truths))
    assert pooled == want


def test_logo_cv_runner_size_check(tiny_scene):
    with pytest.raises(DataError):
        logo_cv(tiny_scene, lambda train, test: np.zeros(len(test) + 1))


def test_logo_cv_needs_two_groups(tiny_scene, table):
    one = Dataset(tuple(s for s in tiny_scene.samples if s.composite_group == 0),
                  tiny_scene.band_table_hash)
    with pytest.raises(DataError):
        logo_cv(one, lambda train, test: np.zeros(len(test)))


# ---------------------------------------------------------------------------
# Temporal split
# ---------------------------------------------------------------------------

def test_default_boundary_quantile(tiny_scene):
    dates = sorted({s.date for s in tiny_scene.samples})
    assert default_boundary(tiny_scene) == dates[8]  # round(0.75 * 10)
    assert default_boundary(tiny_scene, 0.5) == dates[5]
    assert default_boundary(tiny_scene, 1.0) == dates[-1]


def test_temporal_split_severs_cross_boundary_links(tiny_scene):
    boundary = default_boundary(tiny_scene)
    train, test = temporal_split(tiny_scene, boundary)
    assert all(s.date < boundary for s in train.samples)
    assert all(s.date >= boundary for s in test.samples)
    assert len(train.samples) + len(test.samples) == len(tiny_scene.samples)
    date_of = {s.id: s.date for s in tiny_scene.samples}
    for s in train.samples:
        if s.next_id is not None:
            assert date_of[s.next_id] < boundary
    # the last pre-boundary composite pointed across the boundary originally
    last_train_group = max(s.composite_group for s in train.samples)
    originals = [s for s in tiny_scene.samples
                 if s.composite_group == last_train_group]
    assert any(s.next_id is not None for s in originals)
    severed = [s for s in train.samples if s.composite_group == last_train_group]
    assert all(s.next_id is None and s.next_spectrum is None for s in severed)


def test_temporal_split_empty_sides(tiny_scene):
    dates = sorted({s.date for s in tiny_scene.samples})
    with pytest.raises(DataError):
        temporal_split(tiny_scene, dates[0])  # nothing strictly before
    with pytest.raises(DataError):
        temporal_split(tiny_scene, "2099-01-01")


# ---------------------------------------------------------------------------
# Ridge
# ---------------------------------------------------------------------------

def test_ridge_alpha_zero_recovers_exact_linear_map():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(20, 3))
    y = X @ np.array([2.0, -1.0, 0.5]) + 4.0
    w = ridge_fit(X, y, alpha=0.0)
    assert not w.singular
    assert np.allclose(ridge_predict(w, X), y, atol=1e-10)
    Xq = rng.normal(size=(5, 3))
    assert np.allclose(ridge_predict(w, Xq), Xq @ [2.0, -1.0, 0.5] + 4.0, atol=1e-10)


def test_ridge_matches_closed_form():
    rng = np.random.default_rng(14)
    X = rng.normal(size=(30, 4))
    y = rng.normal(size=30)
    alpha = 2.5
    w = ridge_fit(X, y, alpha)
    mu, sd = X.mean(axis=0), X.std(axis=0)
    Z = (X - mu) / sd
    want = np.linalg.solve(Z.T @ Z + alpha * np.eye(4), Z.T @ (y - y.mean()))
    assert np.allclose(w.w, want, atol=1e-12)
    assert w.intercept == y.mean()
    assert np.allclose(ridge_predict(w, X), Z @ want + y.mean(), atol=1e-12)


def test_ridge_singular_warns_and_solves():
    rng = np.random.default_rng(15)
    col = rng.normal(size=(12, 1))
    X = np.hstack([col, col])  # rank 1
    y = 3.0 * col[:, 0] + 1.0
    with pytest.warns(RuntimeWarning, match="singular"):
        w = ridge_fit(X, y, alpha=0.0)
    assert w.singular
    assert np.allclose(ridge_predict(w, X), y, atol=1e-8)


def test_ridge_column_rescaling_invariance():
    rng = np.random.default_rng(16)
    X = rng.normal(size=(25, 3))
    y = rng.normal(size=25)
    base = ridge_predict(ridge_fit(X, y, 1.0), X)
    X2 = X.copy()
    X2[:, 1] *= 1000.0
    scaled = ridge_predict(ridge_fit(X2, y, 1.0), X2)
    assert np.allclose(base, scaled, atol=1e-9)


def test_ridge_validation():
    with pytest.raises(ConfigError):
        ridge_fit(np.zeros((4, 2)), np.zeros(4), alpha=-1.0)
    with pytest.raises(DataError):
        ridge_fit(np.zeros((4, 2)), np.zeros(5), alpha=1.0)
    with pytest.raises(DataError):
        ridge_fit(np.zeros(4), np.zeros(4), alpha=1.0)


# ---------------------------------------------------------------------------
# kNN
# ---------------------------------------------------------------------------

def test_knn_hand_oracle():
    X = np.array([[0.0], [1.0], [2.0], [10.0]])
    y = np.array([0.0, 1.0, 2.0, 10.0])
    # single-column standardization preserves distance order
    assert knn_regress(X, y, np.array([1.1]), k=1) == pytest.approx([1.0])
    assert knn_regress(X, y, np.array([1.1]), k=2) == pytest.approx([1.5])
    assert knn_regress(X, y, np.array([1.1]), k=4) == pytest.approx([y.mean()])


def test_knn_distance_tie_takes_lowest_index():
    X = np.array([[0.0], [2.0]])
    y = np.array([5.0, 9.0])
    assert knn_regress(X, y, np.array([1.0]), k=1) == pytest.approx([5.0])


def test_knn_batch_and_validation():
    rng = np.random.default_rng(17)
    X = rng.normal(size=(8, 3))
    y = rng.normal(size=8)
    out = knn_regress(X, y, rng.normal(size=(5, 3)), k=3)
    assert out.shape == (5,)
    for bad_k in (0, 9):
        with pytest.raises(ConfigError):
            knn_regress(X, y, X[:2], k=bad_k)


# ---------------------------------------------------------------------------
# Interpolation oracle
# ---------------------------------------------------------------------------

def test_interpolate_bands_exact_on_affine(table):
    lam = table.wavelengths
    x = 0.01 + 3e-5 * lam
    mask = targeted_mask(table)
    for mode in ("linear", "cubic_spline"):
        out = interpolate_bands(x, mask, mode, table)
        assert np.allclose(out, x, atol=1e-12)
        assert np.array_equal(out[~mask.flags], x[~mask.flags])


def test_interpolate_bands_passthrough_is_exact(table):
    rng = np.random.default_rng(18)
    x = rng.normal(size=table.B)
    mask = targeted_mask(table)
    out = interpolate_bands(x, mask, "cubic_spline", table)
    assert np.array_equal(out[~mask.flags], x[~mask.flags])
    assert not np.array_equal(out[mask.flags], x[mask.flags])


def test_interpolate_bands_clamps_edges(table):
    rng = np.random.default_rng(19)
    x = rng.normal(size=table.B)
    flags = np.zeros(table.B, dtype=bool)
    flags[:3] = True
    flags[-2:] = True
    mask = MaskVector(flags)
    for mode in ("linear", "cubic_spline"):
        out = interpolate_bands(x, mask, mode, table)
        # runs beyond the outermost anchors take the nearest anchor's value
        assert np.all(out[:3] == x[3])
        assert np.all(out[-2:] == x[-3])


def test_interpolate_bands_empty_mask_copies(table):
    x = np.random.default_rng(20).normal(size=table.B)
    out = interpolate_bands(x, MaskVector(np.zeros(table.B, dtype=bool)),
                            "linear", table)
    assert np.array_equal(out, x) and out is not x


def test_interpolate_bands_errors(table, toy_table):
    x = np.zeros(table.B)
    mask = targeted_mask(table)
    with pytest.raises(ConfigError):
        interpolate_bands(x, mask, "quadratic", table)
    with pytest.raises(DataError):
        interpolate_bands(np.zeros(10), mask, "linear", table)
    few = MaskVector(np.array([False, True] + [True] * 10))
    with pytest.raises(DataError):
        interpolate_bands(np.zeros(12), few, "linear", toy_table)
    three_anchors = MaskVector(np.array([False, False, False] + [True] * 9))
    with pytest.raises(DataError):
        interpolate_bands(np.zeros(12), three_anchors, "cubic_spline", toy_table)


# ---------------------------------------------------------------------------
# Reconstruction benchmark
# ---------------------------------------------------------------------------

def test_reconstruction_benchmark_rows(tiny_state, tiny_scene, table):
    rows = reconstruction_benchmark(tiny_state, tiny_scene, "targeted", table)
    assert [r["method"] for r in rows] == ["model", "cubic_spline", "linear"]
    mask = targeted_mask(table)
    n_pos = mask.masked_count * len(tiny_scene.samples)
    assert all(r["n_positions"] == n_pos for r in rows)
    # interpolation rows must agree with the oracle applied sample by sample
    est, truth = {"cubic_spline": [], "linear": []}, []
    for s in tiny_scene.samples:
        truth.append(s.spectrum[mask.flags])
        for mode in ("cubic_spline", "linear"):
            est[mode].append(interpolate_bands(s.spectrum, mask, mode, table)[mask.flags])
    truth = np.concatenate(truth)
    for row in rows[1:]:
        pool = np.concatenate(est[row["method"]])
        want = np.corrcoef(pool, truth)[0, 1]
        assert row["pearson_r"] == pytest.approx(want, abs=1e-12)
    assert np.isfinite(rows[0]["pearson_r"])


def test_reconstruction_benchmark_random_mode_is_seeded(tiny_state, tiny_scene, table):
    a = reconstruction_benchmark(tiny_state, tiny_scene, "random", table, seed=1)
    b = reconstruction_benchmark(tiny_state, tiny_scene, "random", table, seed=1)
    assert a == b
    c = reconstruction_benchmark(tiny_state, tiny_scene, "random", table, seed=2)
    assert a != c
    with pytest.raises(ConfigError):
        reconstruction_benchmark(tiny_state, tiny_scene, "checkerboard", table)


# ---------------------------------------------------------------------------
# Ablation suite
# ---------------------------------------------------------------------------

def test_ablation_suite_needs_three_seeds(tiny_scene, table):
    pre = PretrainConfig(epochs=1, batch_size=16, warmup=1)
    with pytest.raises(ConfigError):
        ablation_suite(tiny_scene, [0, 1], pre, SMALL, FinetuneConfig(), table)


def test_ablation_suite_structure(tiny_scene, table):
    pre = PretrainConfig(epochs=2, batch_size=16, lr=1e-3, warmup=1)
    ft = FinetuneConfig(max_epochs=4, patience=4, batch_size=16)
    res = ablation_suite(tiny_scene, [0, 1, 2], pre, SMALL, ft, table)
    s = res["summary"]
    assert set(ABLATION_CONFIGS) <= set(s)
    for config in ABLATION_CONFIGS:
        vals = s[config]["r2_values"]
        assert len(vals) == 3
        assert s[config]["r2_mean"] == pytest.approx(np.mean(vals), abs=1e-15)
        assert s[config]["r2_sd"] == pytest.approx(np.std(vals), abs=1e-15)
    assert s["delta_ssl_vs_random_init"] == pytest.approx(
        s["ssl_context"]["r2_mean"] - s["random_init"]["r2_mean"], abs=1e-15)
    assert s["delta_targeted_vs_random_mask"] == pytest.approx(
        s["mask_targeted"]["r2_mean"] - s["mask_random"]["r2_mean"], abs=1e-15)
    # the targeted-masking arm IS the ssl_context run, by construction
    assert s["mask_targeted"]["r2_values"] == s["ssl_context"]["r2_values"]
    for seed in (0, 1, 2):
        digests = res["per_seed"][seed]["digests"]
        assert len(digests["init"]) == 64 and len(digests["batch_order"]) == 64
    assert res["boundary_date"] == default_boundary(tiny_scene)


# ---------------------------------------------------------------------------
# Label efficiency
# ---------------------------------------------------------------------------

def test_stratified_subsample_properties(tiny_scene):
    labeled = tiny_scene.labeled()
    rng = np.random.default_rng(21)
    sub = stratified_subsample(labeled, 0.25, rng)
    assert 4 <= len(sub) <= len(labeled)
    ids = {s.id for s in sub}
    assert len(ids) == len(sub)
    y = np.log1p([s.microcystin for s in labeled])
    qs = np.quantile(y, [0.25, 0.5, 0.75])
    bins = np.digitize(y, qs)
    by_id = dict(zip([s.id for s in labeled], bins))
    for b in set(bins):
        assert any(by_id[s.id] == b for s in sub)
    full = stratified_subsample(labeled, 1.0, np.random.default_rng(0))
    assert [s.id for s in full] == [s.id for s in labeled]


def test_stratified_subsample_is_seeded(tiny_scene):
    labeled = tiny_scene.labeled()
    a = stratified_subsample(labeled, 0.3, np.random.default_rng(4))
    b = stratified_subsample(labeled, 0.3, np.random.default_rng(4))
    assert [s.id for s in a] == [s.id for s in b]


def test_label_efficiency_fraction_validation(tiny_state, tiny_scene, table):
    ft = FinetuneConfig(max_epochs=2, patience=2)
    for bad in ((0.0,), (-0.1, 0.5), (0.5, 1.5), ()):
        with pytest.raises(ConfigError):
            label_efficiency(tiny_scene, tiny_state, ft, fractions=bad, table=table)
    # 5% of the 24 labeled train samples is a single sample: too few to fit
    with pytest.raises(DataError):
        label_efficiency(tiny_scene, tiny_state, ft, fractions=(0.05,), table=table)


def test_label_efficiency_full_fraction_has_zero_sd(tiny_state, tiny_scene, table):
    ft = FinetuneConfig(max_epochs=3, patience=3, batch_size=16)
    curve = label_efficiency(tiny_scene, tiny_state, ft, fractions=(1.0,),
                             table=table)
    assert curve.fractions == (1.0,)
    assert len(curve.rows) == 2
    for method in ("ssl_all", "aux_only"):
        row = curve.row(1.0, method)
        # five subsamples of the full set are five identical runs
        assert row["r2_sd"] == 0.0
        assert len(set(row["r2_values"])) == 1
    with pytest.raises(KeyError):
        curve.row(0.5, "ssl_all")


def test_label_efficiency_jobs_parallel_matches_serial(tiny_state, tiny_scene, table):
    ft = FinetuneConfig(max_epochs=2, patience=2, batch_size=16)
    serial = label_efficiency(tiny_scene, tiny_state, ft, fractions=(0.5, 1.0),
                              table=table, jobs=1)
    parallel = label_efficiency(tiny_scene, tiny_state, ft, fractions=(0.5, 1.0),
                                table=table, jobs=3)
    assert serial == parallel


def test_default_fraction_grid():
    assert DEFAULT_FRACTIONS == (0.05, 0.10, 0.25, 0.50, 0.75, 1.00)
    assert N_SUBSAMPLES == 5


# ---------------------------------------------------------------------------
# Report CSVs
# ---------------------------------------------------------------------------

def test_reconstruction_csv_roundtrip(tiny_state, tiny_scene, table, tmp_path):
    rows = reconstruction_benchmark(tiny_state, tiny_scene, "targeted", table)
    path = tmp_path / "recon.csv"
    write_reconstruction_csv(rows, path)
    with open(path, newline="") as fh:
        back = list(csv.DictReader(fh))
    assert len(back) == 3
    for orig, parsed in zip(rows, back):
        assert parsed["method"] == orig["method"]
        assert float(parsed["pearson_r"]) == orig["pearson_r"]
        assert int(parsed["n_positions"]) == orig["n_positions"]


def test_ablation_csv_layout(tiny_scene, table, tmp_path):
    pre = PretrainConfig(epochs=2, batch_size=16, lr=1e-3, warmup=1)
    ft = FinetuneConfig(max_epochs=2, patience=2, batch_size=16)
    res = ablation_suite(tiny_scene, [0, 1, 2], pre, SMALL, ft, table)
    path = tmp_path / "ablation.csv"
    write_ablation_csv(res, path)
    with open(path, newline="") as fh:
        back = list(csv.DictReader(fh))
    assert len(back) == len(ABLATION_CONFIGS) * 5  # 3 seeds + mean + sd
    for config in ABLATION_CONFIGS:
        rows = [r for r in back if r["config"] == config]
        assert [r["seed"] for r in rows] == ["0", "1", "2", "mean", "sd"]
        mean = float(rows[3]["r2"])
        assert mean == res["summary"][config]["r2_mean"]
        assert np.isclose(mean, np.mean([float(r["r2"]) for r in rows[:3]]))


def test_efficiency_csv_roundtrip(tiny_state, tiny_scene, table, tmp_path):
    ft = FinetuneConfig(max_epochs=2, patience=2, batch_size=16)
    curve = label_efficiency(tiny_scene, tiny_state, ft, fractions=(1.0,),
                             table=table)
    path = tmp_path / "eff.csv"
    write_efficiency_csv(curve, path)
    with open(path, newline="") as fh:
        back = list(csv.DictReader(fh))
    assert len(back) == 2
    for parsed in back:
        row = curve.row(float(parsed["fraction"]), parsed["method"])
        assert float(parsed["r2_mean"]) == row["r2_mean"]
        assert float(parsed["r2_sd"]) == row["r2_sd"]
        assert int(parsed["n_subsamples"]) == N_SUBSAMPLES


def test_cv_folds_csv(tiny_scene, tmp_path):
    def mean_runner(train, test):
        m = np.log1p([s.microcystin for s in train]).mean()
        return np.full(len(test), m)

    per_group, pooled = logo_cv(tiny_scene, mean_runner)
    path = tmp_path / "folds.csv"
    write_cv_folds_csv(per_group, pooled, path)
    with open(path, newline="") as fh:
        back = list(csv.DictReader(fh))
    assert len(back) == len(per_group) + 1
    assert back[-1]["fold"] == "pooled"
    assert float(back[-1]["r2"]) == pooled.r2
    for row in back[:-1]:
        rep = per_group[int(row["fold"])]
        if rep is not None:
            assert float(row["rmse"]) == rep.rmse


# ---------------------------------------------------------------------------
# Baseline estimator wrappers
# ---------------------------------------------------------------------------

def test_ridge_estimator_wrapper():
    rng = np.random.default_rng(22)
    X = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    est = RidgeRegressor(alpha=0.5)
    assert clone(est).get_params() == {"alpha": 0.5}
    with pytest.raises(NotFittedError):
        est.predict(X)
    est.fit(X, y)
    want = ridge_predict(ridge_fit(X, y, 0.5), X)
    assert np.array_equal(est.predict(X), want)
    with pytest.raises(ValueError):
        est.set_params(beta=1)


def test_knn_estimator_wrapper():
    rng = np.random.default_rng(23)
    X = rng.normal(size=(10, 2))
    y = rng.normal(size=10)
    est = KNNRegressor(k=3)
    with pytest.raises(NotFittedError):
        est.predict(X)
    est.fit(X, y)
    assert np.array_equal(est.predict(X[:4]), knn_regress(X, y, X[:4], 3))
    assert clone(est).get_params() == {"k": 3}
