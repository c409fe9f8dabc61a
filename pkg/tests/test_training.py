"""Losses, pretraining, and frozen-encoder fine-tuning."""

import csv
import dataclasses
import warnings

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from spectm.core import Dataset
from spectm.errors import ConfigError, DataError
from spectm.indices import default_index_set, index_vector
from spectm.model import ModelConfig, init_model
from spectm.numerics import LrSchedule, Parameter, Tensor, cosine_warmup_lr
from spectm.synthgen import SceneConfig, simulate_scene
from spectm.training import (FEATURE_MODES, FinetuneConfig, LossWeights,
                             MicrocystinRegressor, PretrainConfig, SSLOutputs,
                             SSLTargets, SpecTMPretrainer, EarlyStopper,
                             aux_features, cls_features, extract_features,
                             finetune, masked_mse, predict_mc, predict_mc_log,
                             pretrain, split_groups, ssl_loss,
                             stratified_val_split, write_finetune_history,
                             write_pretrain_history)

SMALL = ModelConfig(encoder_layers=1, heads=2, d_model=16, d_ff=32,
                    decoder_layers=1, dropout_p=0.1)


@pytest.fixture(scope="module")
def pretrained(tiny_scene, table):
    cfg = PretrainConfig(epochs=3, batch_size=16, lr=1e-3, warmup=2, seed=0)
    return pretrain(tiny_scene, cfg, SMALL, table), cfg


# ---------------------------------------------------------------------------
# masked_mse
# ---------------------------------------------------------------------------

def test_masked_mse_hand_values():
    truth = np.array([1.0, 2.0, 3.0])
    # only the masked middle position counts: (5-2)^2 = 9
    assert masked_mse(np.array([1.0, 5.0, 3.0]), truth,
                      [False, True, False]).data == 9.0
    assert masked_mse(truth, truth, [True, True, True]).data == 0.0
    assert masked_mse(truth + 1.0, truth, [True, True, True]).data == 1.0


def test_masked_mse_matches_numpy_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pred = rng.normal(size=(4, 7))
        truth = rng.normal(size=(4, 7))
        flags = rng.random((4, 7)) < 0.4
        flags.flat[0] = True
        want = ((pred - truth) ** 2 * flags).sum() / flags.sum()
        assert masked_mse(pred, truth, flags).data == pytest.approx(want, abs=1e-15)


def test_masked_mse_broadcasts_shared_flags():
    rng = np.random.default_rng(4)
    pred = rng.normal(size=(5, 6))
    truth = rng.normal(size=(5, 6))
    flags = np.array([True, False, True, False, False, True])
    want = ((pred - truth) ** 2 * flags[None, :]).sum() / (5 * flags.sum())
    assert masked_mse(pred, truth, flags).data == pytest.approx(want, abs=1e-15)


def test_masked_mse_no_gradient_at_unmasked_positions():
    rng = np.random.default_rng(5)
    truth = rng.normal(size=(3, 4))
    flags = np.array([[True, False, False, True],
                      [False, False, True, False],
                      [True, True, False, False]])
    p = Parameter(rng.normal(size=(3, 4)), name="pred")
    masked_mse(p, truth, flags).backward()
    assert np.all(p.grad[~flags] == 0.0)
    want = 2.0 * (p.data - truth) / flags.sum()
    assert np.allclose(p.grad[flags], want[flags], atol=1e-14)


def test_masked_mse_errors():
    with pytest.raises(DataError):
        masked_mse(np.zeros(3), np.zeros(4), [True, True, True, True])
    with pytest.raises(DataError):
        masked_mse(np.zeros(3), np.zeros(3), [False, False, False])


# ---------------------------------------------------------------------------
# ssl_loss composition
# ---------------------------------------------------------------------------

def _random_triple(rng, weights):
    n, B, K = 3, 6, 4
    outputs = SSLOutputs(recon=Tensor(rng.normal(size=(n, B))),
                         phys=Tensor(rng.normal(size=(n, K))),
                         temp=Tensor(rng.normal(size=(n, B))))
    flags = rng.random((n, B)) < 0.4
    flags.flat[rng.integers(n * B)] = True
    partnered = rng.random(n) < 0.7
    targets = SSLTargets(spectrum=rng.normal(size=(n, B)),
                         phys=rng.normal(size=(n, K)),
                         next_spectrum=rng.normal(size=(n, B)),
                         partnered=partnered)
    want_recon = ((outputs.recon.data - targets.spectrum) ** 2 * flags).sum() / flags.sum()
    want_phys = ((outputs.phys.data - targets.phys) ** 2).mean()
    k = partnered.sum()
    if k == 0:
        want_temp = 0.0
    else:
        sq = (outputs.temp.data - targets.next_spectrum) ** 2
        want_temp = (sq * partnered[:, None]).sum() / (k * B)
    want_total = (weights.lambda1 * want_recon + weights.lambda2 * want_phys
                  + weights.lambda3 * want_temp)
    return outputs, targets, flags, (want_total, want_recon, want_phys, want_temp)


def test_ssl_loss_composition_against_numpy():
    rng = np.random.default_rng(6)
    for trial in range(100):
        weights = (LossWeights() if trial < 50
                   else LossWeights(*rng.uniform(0.0, 2.0, size=3)))
        outputs, targets, flags, want = _random_triple(rng, weights)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = ssl_loss(outputs, targets, flags, weights)
        for g, w in zip(got, want):
            assert abs(g.data.item() - w) <= 1e-12


def test_ssl_loss_default_weights_and_unit_terms():
    assert (LossWeights().lambda1, LossWeights().lambda2, LossWeights().lambda3) \
        == (1.0, 0.5, 0.3)
    n, B, K = 2, 5, 6
    # every term is exactly 1: unit offsets everywhere, all masked, all partnered
    outputs = SSLOutputs(recon=Tensor(np.ones((n, B))),
                         phys=Tensor(np.ones((n, K))),
                         temp=Tensor(np.ones((n, B))))
    targets = SSLTargets(np.zeros((n, B)), np.zeros((n, K)), np.zeros((n, B)),
                         np.ones(n, dtype=bool))
    total, recon, phys, temp = ssl_loss(outputs, targets, np.ones((n, B), dtype=bool))
    assert (recon.data, phys.data, temp.data) == (1.0, 1.0, 1.0)
    assert abs(total.data.item() - 1.8) <= 1e-12


def test_ssl_loss_zero_weights_reduce_to_reconstruction():
    rng = np.random.default_rng(7)
    outputs, targets, flags, _ = _random_triple(rng, LossWeights())
    targets = dataclasses.replace(targets, partnered=np.ones(3, dtype=bool))
    total, recon, _, _ = ssl_loss(outputs, targets, flags, LossWeights(1.0, 0.0, 0.0))
    assert total.data == recon.data


def test_ssl_loss_unpartnered_batch_warns_and_zeroes_temp():
    rng = np.random.default_rng(8)
    outputs, targets, flags, _ = _random_triple(rng, LossWeights())
    targets = dataclasses.replace(targets, partnered=np.zeros(3, dtype=bool))
    with pytest.warns(UserWarning, match="partnered"):
        total, _, _, temp = ssl_loss(outputs, targets, flags)
    assert temp.data.item() == 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")  # lambda3=0 must stay silent
        ssl_loss(outputs, targets, flags, LossWeights(1.0, 0.5, 0.0))


def test_ssl_loss_ignores_unpartnered_rows():
    rng = np.random.default_rng(9)
    n, B, K = 4, 5, 6
    outputs = SSLOutputs(Tensor(rng.normal(size=(n, B))),
                         Tensor(rng.normal(size=(n, K))),
                         Tensor(rng.normal(size=(n, B))))
    flags = np.ones((n, B), dtype=bool)
    partnered = np.array([True, False, True, False])
    base = rng.normal(size=(n, B))

    def run(garbage):
        nxt = base.copy()
        nxt[~partnered] = garbage
        targets = SSLTargets(rng.standard_normal((n, B)) * 0 + base,
                             np.zeros((n, K)), nxt, partnered)
        return ssl_loss(outputs, targets, flags)[3].data

    assert run(0.0) == run(1e12)


def test_loss_weights_validation():
    for bad in ({"lambda1": -0.1}, {"lambda2": -1.0}, {"lambda3": -1e-9}):
        with pytest.raises(ConfigError):
            LossWeights(**bad)


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def test_pretrain_config_validation():
    for bad in ({"epochs": 0}, {"batch_size": 0}, {"lr": 0.0},
                {"weight_decay": -0.1}, {"warmup": -1},
                {"warmup": 101}, {"mask_mode": "checkerboard"}):
        with pytest.raises(ConfigError):
            PretrainConfig(**bad)
    assert PretrainConfig(epochs=10, warmup=10).warmup == 10


def test_finetune_config_validation():
    for bad in ({"feature_mode": "everything"}, {"patience": 0},
                {"patience": 101}, {"lr": 0.0}):
        with pytest.raises(ConfigError):
            FinetuneConfig(**bad)
    assert set(FEATURE_MODES) == {"ssl_context", "ssl_all", "aux_only", "random_init"}


# ---------------------------------------------------------------------------
# Group split
# ---------------------------------------------------------------------------

def test_split_groups_holds_out_last_fraction(tiny_scene):
    train, val = split_groups(tiny_scene)
    # 10 groups -> 2 held out, and they are the LAST two composites
    assert {s.composite_group for s in val} == {8, 9}
    assert {s.composite_group for s in train} == set(range(8))
    assert len(train) + len(val) == len(tiny_scene.samples)


@pytest.mark.parametrize("n_groups", [2, 3, 7, 20])
def test_split_groups_sizes(table, n_groups):
    ds = simulate_scene(SceneConfig(n_locations=1, n_timesteps=n_groups,
                                    rng_seed=1, noise_sd=0.0), table)
    train, val = split_groups(ds)
    n_val = min(max(1, int(round(0.15 * n_groups))), n_groups - 1)
    assert {s.composite_group for s in val} == set(range(n_groups - n_val, n_groups))
    assert len(train) == n_groups - n_val


def test_split_groups_needs_two_groups(table):
    ds = simulate_scene(SceneConfig(n_locations=2, n_timesteps=1,
                                    rng_seed=1, noise_sd=0.0), table)
    with pytest.raises(DataError):
        split_groups(ds)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

def test_pretrain_history_rows(pretrained):
    (state, history), cfg = pretrained
    assert len(history) == cfg.epochs
    assert [h["epoch"] for h in history] == [1, 2, 3]
    sched = LrSchedule(peak_lr=cfg.lr, total_epochs=cfg.epochs,
                       warmup_epochs=cfg.warmup)
    for e, h in enumerate(history):
        assert h["lr"] == cosine_warmup_lr(e, sched)
        for key in ("loss_total", "loss_recon", "loss_phys", "loss_temp",
                    "val_pearson_r", "val_phys_r2"):
            assert np.isfinite(h[key])


def test_pretrain_metadata_records_train_split_stats(pretrained, tiny_scene, table):
    (state, _), cfg = pretrained
    md = state.metadata
    assert md["epochs_seen"] == cfg.epochs
    assert md["mask_mode"] == "targeted"
    assert md["loss_weights"] == [1.0, 0.5, 0.3]
    assert len(md["batch_order_digest"]) == 64
    assert md["init_digest"] == init_model(SMALL, state.tokenization,
                                           table.content_hash, cfg.seed).encoder_digest()
    # physics targets come from the un-masked spectra of the TRAIN split only
    train, _ = split_groups(tiny_scene)
    idx_set = default_index_set()
    raw = np.stack([index_vector(s.spectrum, table, idx_set) for s in train])
    assert np.allclose(md["phys_mu"], raw.mean(axis=0), atol=1e-12)
    sd = raw.std(axis=0)
    sd[sd < 1e-12] = 1.0
    assert np.allclose(md["phys_sd"], sd, atol=1e-12)


def test_pretrain_is_deterministic(pretrained, tiny_scene, table):
    (state, history), cfg = pretrained
    state2, history2 = pretrain(tiny_scene, cfg, SMALL, table)
    assert state2.encoder_digest() == state.encoder_digest()
    assert history2 == history
    state3, _ = pretrain(tiny_scene, dataclasses.replace(cfg, seed=1), SMALL, table)
    assert state3.encoder_digest() != state.encoder_digest()


def test_pretrain_mask_modes_share_initialization(pretrained, tiny_scene, table):
    (state, _), cfg = pretrained
    rnd_cfg = PretrainConfig(epochs=1, batch_size=16, lr=1e-3, warmup=1,
                             seed=cfg.seed, mask_mode="random")
    rnd_state, _ = pretrain(tiny_scene, rnd_cfg, SMALL, table)
    # same seed must start from bitwise-identical weights in both mask modes
    assert rnd_state.metadata["init_digest"] == state.metadata["init_digest"]
    assert rnd_state.encoder_digest() != state.encoder_digest()


def test_pretrain_rejects_foreign_band_table(tiny_scene, table):
    alien = Dataset(tiny_scene.samples, "0" * 64)
    cfg = PretrainConfig(epochs=1, batch_size=16, warmup=1)
    with pytest.raises(DataError):
        pretrain(alien, cfg, SMALL, table)


def test_pretrain_rejects_band_count_mismatch(tiny_scene, table):
    bad = ModelConfig(encoder_layers=1, heads=2, d_model=16, d_ff=32,
                      decoder_layers=1, dropout_p=0.1, band_count=64)
    with pytest.raises(ConfigError):
        pretrain(tiny_scene, PretrainConfig(epochs=1, warmup=1), bad, table)


# ---------------------------------------------------------------------------
# Early stopping and stratified split
# ---------------------------------------------------------------------------

def test_early_stopper_on_worsening_validation():
    stopper = EarlyStopper(patience=3)
    fired = [stopper.update(e, float(e)) for e in range(1, 5)]
    # stops after exactly 1 + patience epochs; epoch 1 stays the best
    assert fired == [False, False, False, True]
    assert stopper.best_epoch == 1


def test_early_stopper_never_fires_while_improving():
    stopper = EarlyStopper(patience=2)
    assert not any(stopper.update(e, 1.0 / e) for e in range(1, 11))
    assert stopper.best_epoch == 10


def test_early_stopper_ties_are_not_improvements():
    stopper = EarlyStopper(patience=2)
    assert stopper.update(1, 1.0) is False
    assert stopper.update(2, 1.0) is False
    assert stopper.update(3, 1.0) is True
    assert stopper.best_epoch == 1


def test_stratified_val_split_covers_quartiles():
    rng = np.random.default_rng(10)
    y = rng.normal(size=40)
    train_idx, val_idx = stratified_val_split(y, np.random.default_rng(0))
    assert set(train_idx) | set(val_idx) == set(range(40))
    assert not set(train_idx) & set(val_idx)
    assert len(val_idx) == 8  # 2 from each quartile of 10
    qs = np.quantile(y, [0.25, 0.5, 0.75])
    bins = np.digitize(y, qs)
    for b in range(4):
        assert np.isin(val_idx, np.flatnonzero(bins == b)).any()


def test_stratified_val_split_is_seeded():
    y = np.random.default_rng(11).normal(size=30)
    a = stratified_val_split(y, np.random.default_rng(5))
    b = stratified_val_split(y, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = stratified_val_split(y, np.random.default_rng(6))
    assert not np.array_equal(a[1], c[1])


def test_stratified_val_split_tiny_input():
    train_idx, val_idx = stratified_val_split(np.array([1.0, 2.0, 3.0]),
                                              np.random.default_rng(0))
    assert train_idx.size >= 1 and val_idx.size >= 1
    assert train_idx.size + val_idx.size == 3


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def test_aux_features_are_indices_plus_met(tiny_scene, table):
    X = aux_features(list(tiny_scene.samples[:4]), table)
    assert X.shape == (4, 58)
    s = tiny_scene.samples[0]
    want = np.concatenate([index_vector(s.spectrum, table, default_index_set()),
                           s.meteorology])
    assert np.array_equal(X[0], want)


def test_cls_features_never_see_diagnostic_bands(pretrained, tiny_scene, table):
    (state, _), _ = pretrained
    from spectm.masking import targeted_mask
    # the band nearest 620 nm sits inside the masked range AND feeds pc_ratio
    pos = int(np.argmin(np.abs(table.wavelengths - 620.0)))
    assert targeted_mask(table).flags[pos]
    s = tiny_scene.samples[0]
    spec = s.spectrum.copy()
    spec[pos] += 123.456
    bumped = dataclasses.replace(s, spectrum=spec)
    base = cls_features(state, [s], table)
    assert np.array_equal(cls_features(state, [bumped], table), base)
    # the auxiliary indices DO read the un-masked spectrum
    assert not np.array_equal(aux_features([bumped], table), aux_features([s], table))


def test_extract_features_dims_and_errors(pretrained, tiny_scene, table):
    (state, _), _ = pretrained
    samples = list(tiny_scene.samples[:5])
    d = SMALL.d_model
    assert extract_features(samples, table, "ssl_context", state).shape == (5, d)
    assert extract_features(samples, table, "ssl_all", state).shape == (5, d + 58)
    assert extract_features(samples, table, "aux_only").shape == (5, 58)
    both = extract_features(samples, table, "ssl_all", state)
    assert np.array_equal(both[:, :d], cls_features(state, samples, table))
    assert np.array_equal(both[:, d:], aux_features(samples, table))
    with pytest.raises(ConfigError):
        extract_features(samples, table, "ssl_context")
    with pytest.raises(ConfigError):
        extract_features(samples, table, "pca")


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

FAST_FT = dict(lr=1e-3, max_epochs=4, patience=4, batch_size=16, seed=0)


@pytest.mark.parametrize("mode,in_dim", [("ssl_context", 16), ("ssl_all", 74),
                                         ("aux_only", 58), ("random_init", 16)])
def test_finetune_feature_modes(pretrained, tiny_scene, table, mode, in_dim):
    (base, _), _ = pretrained
    cfg = FinetuneConfig(feature_mode=mode, **FAST_FT)
    state, history = finetune(tiny_scene, base, cfg, table)
    assert state.params["head_fc1_W"].shape == (in_dim, 128)
    assert state.metadata["head"]["feature_mode"] == mode
    assert state.metadata["head"]["best_epoch"] is not None
    assert len(history) <= cfg.max_epochs
    assert all(set(h) == {"epoch", "train_mse", "val_mse", "stopped"} for h in history)
    if mode in ("ssl_context", "ssl_all"):
        assert state.encoder_digest() == base.encoder_digest()
    else:
        assert state.encoder_digest() != base.encoder_digest()


def test_finetune_requires_base_for_ssl_modes(tiny_scene, table):
    with pytest.raises(ConfigError):
        finetune(tiny_scene, None, FinetuneConfig(feature_mode="ssl_all", **FAST_FT),
                 table)


def test_finetune_requires_labels(tiny_scene, table):
    unlabeled = Dataset(
        tuple(dataclasses.replace(s, microcystin=None) for s in tiny_scene.samples),
        tiny_scene.band_table_hash)
    cfg = FinetuneConfig(feature_mode="aux_only", **FAST_FT)
    with pytest.raises(DataError):
        finetune(unlabeled, None, cfg, table)


def test_finetune_is_deterministic(pretrained, tiny_scene, table):
    (base, _), _ = pretrained
    cfg = FinetuneConfig(feature_mode="ssl_all", **FAST_FT)
    s1, h1 = finetune(tiny_scene, base, cfg, table)
    s2, h2 = finetune(tiny_scene, base, cfg, table)
    assert h1 == h2
    for p1, p2 in zip(s1.head_parameters(), s2.head_parameters()):
        assert p1.name == p2.name and np.array_equal(p1.data, p2.data)


def test_finetune_restores_best_epoch_weights(pretrained, tiny_scene, table):
    (base, _), _ = pretrained
    cfg = FinetuneConfig(feature_mode="ssl_all", lr=1e-2, max_epochs=6,
                         patience=6, batch_size=16, seed=3)
    state, history = finetune(tiny_scene, base, cfg, table)
    labeled = tiny_scene.labeled()
    y = np.log1p(np.asarray([s.microcystin for s in labeled]))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 11))))
    _, val_idx = stratified_val_split(y, rng)
    pred = predict_mc_log(state, [labeled[i] for i in val_idx], table)
    val_mse = float(((pred - y[val_idx]) ** 2).mean())
    assert val_mse == pytest.approx(min(h["val_mse"] for h in history), abs=1e-12)


def test_predict_mc_is_clipped_expm1(pretrained, tiny_scene, table):
    (base, _), _ = pretrained
    cfg = FinetuneConfig(feature_mode="aux_only", **FAST_FT)
    state, _ = finetune(tiny_scene, None, cfg, table)
    samples = list(tiny_scene.samples)
    log_pred = predict_mc_log(state, samples, table)
    mc = predict_mc(state, samples, table)
    assert np.array_equal(mc, np.maximum(np.expm1(log_pred), 0.0))
    assert (mc >= 0).all()


def test_predict_requires_fitted_head(pretrained, tiny_scene, table):
    (state, _), _ = pretrained
    with pytest.raises(ConfigError):
        predict_mc_log(state, list(tiny_scene.samples[:2]), table)


# ---------------------------------------------------------------------------
# History CSV round-trips
# ---------------------------------------------------------------------------

def test_history_csvs_round_trip(pretrained, tiny_scene, table, tmp_path):
    (base, history), _ = pretrained
    p_path = tmp_path / "pre.csv"
    write_pretrain_history(history, p_path)
    with open(p_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(history)
    for row, h in zip(rows, history):
        assert int(row["epoch"]) == h["epoch"]
        for key in ("lr", "loss_total", "val_pearson_r", "val_phys_r2"):
            assert float(row[key]) == h[key]

    cfg = FinetuneConfig(feature_mode="aux_only", **FAST_FT)
    _, ft_history = finetune(tiny_scene, None, cfg, table)
    f_path = tmp_path / "fit.csv"
    write_finetune_history(ft_history, f_path)
    with open(f_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row, h in zip(rows, ft_history):
        assert float(row["val_mse"]) == h["val_mse"]
        assert int(row["stopped"]) == h["stopped"]


# ---------------------------------------------------------------------------
# Estimator wrappers
# ---------------------------------------------------------------------------

def test_pretrainer_estimator(tiny_scene):
    est = SpecTMPretrainer(encoder_layers=1, heads=2, d_model=16, d_ff=32,
                           decoder_layers=1, dropout_p=0.1, epochs=2,
                           batch_size=16, lr=1e-3, warmup=1)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(ValueError):
        est.set_params(window=3)
    est.fit(tiny_scene)
    assert est.transform(tiny_scene).shape == (len(tiny_scene.samples), 16)
    assert len(est.history_) == 2


def test_regressor_estimator(pretrained, tiny_scene):
    (base, _), _ = pretrained
    est = MicrocystinRegressor(base=base, feature_mode="ssl_context",
                               max_epochs=3, patience=3, batch_size=16)
    with pytest.raises(NotFittedError):
        est.predict(tiny_scene)
    est.fit(tiny_scene)
    pred = est.predict(tiny_scene)
    assert pred.shape == (len(tiny_scene.samples),)
    assert np.isfinite(pred).all() and (pred >= 0).all()
    assert np.array_equal(pred, np.maximum(np.expm1(est.predict_log(tiny_scene)), 0.0))
