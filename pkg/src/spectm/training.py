"""Multi-task SSL pretraining and frozen-encoder fine-tuning.

Pretraining optimizes the weighted sum of masked-band reconstruction,
bio-optical index regression (targets from the unmasked spectrum,
standardized with training-split stats), and next-composite spectral
forecasting. Fine-tuning freezes every pretrained parameter, precomputes
features once, and trains only the small regression head on
y = log(1 + microcystin) with early stopping.
"""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin

from .core import BandTable, Dataset, Sample, Tokenization, default_band_table, default_tokenization
from .errors import ConfigError, DataError, NumericError
from .indices import default_index_set, index_vector
from .masking import random_contiguous_mask, targeted_mask
from .model import (ModelConfig, ModelState, Tensor, add_downstream_head,
                    encode, decode_reconstruction, init_model,
                    predict_indices, predict_microcystin,
                    predict_next_spectrum, tokenize)
from .numerics import (LrSchedule, OptimizerState, adamw_step,
                       cosine_warmup_lr, mul, sum_, zero_grads)

MASK_MODES = ("targeted", "random")
FEATURE_MODES = ("ssl_context", "ssl_all", "aux_only", "random_init")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.3

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup: int = 5
    seed: int = 0
    mask_mode: str = "targeted"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not (self.lr > 0 and self.weight_decay >= 0):
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if not 0 <= self.warmup <= self.epochs:
            raise ConfigError("require 0 <= warmup <= epochs")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")


@dataclass(frozen=True)
class FinetuneConfig:
    feature_mode: str = "ssl_all"
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 20
    hidden: tuple[int, int] = (128, 64)
    dropout_p: float = 0.3
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError("require 1 <= patience <= max_epochs")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def masked_mse(pred, truth, mask_flags) -> Tensor:
    """Mean squared error over masked positions only. Unmasked positions
    contribute neither value nor gradient."""
    pred_t = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    truth = np.asarray(truth, dtype=np.float64)
    flags = np.asarray(mask_flags, dtype=bool)
    if pred_t.shape != truth.shape:
        raise DataError(f"pred shape {pred_t.shape} != truth shape {truth.shape}")
    if flags.shape != truth.shape:
        flags = np.broadcast_to(flags, truth.shape)
    count = int(flags.sum())
    if count == 0:
        raise DataError("masked_mse requires at least one masked position")
    diff = pred_t - Tensor(truth)
    sq = mul(diff, diff)
    return mul(sum_(mul(sq, Tensor(flags.astype(np.float64)))), 1.0 / count)


@dataclass
class SSLOutputs:
    recon: Tensor  # (n, B)
    phys: Tensor   # (n, n_indices)
    temp: Tensor   # (n, B)


@dataclass
class SSLTargets:
    spectrum: np.ndarray       # (n, B) pre-mask reflectance
    phys: np.ndarray           # (n, n_indices), standardized
    next_spectrum: np.ndarray  # (n, B); rows meaningless where not partnered
    partnered: np.ndarray      # (n,) bool


def ssl_loss(outputs: SSLOutputs, targets: SSLTargets, mask_flags,
             weights: LossWeights = LossWeights()):
    """Composite loss; returns (total, recon, phys, temp) scalar tensors.
    The temporal term averages over partnered samples only."""
    recon = masked_mse(outputs.recon, targets.spectrum, mask_flags)
    phys_diff = outputs.phys - Tensor(targets.phys)
    phys = mul(sum_(mul(phys_diff, phys_diff)), 1.0 / targets.phys.size)
    n_partnered = int(targets.partnered.sum())
    if n_partnered == 0:
        if weights.lambda3 > 0:
            warnings.warn("no partnered samples in batch; temporal term is 0",
                          stacklevel=2)
        temp = Tensor(0.0)
    else:
        row_mask = targets.partnered.astype(np.float64)[:, None]
        temp_diff = outputs.temp - Tensor(targets.next_spectrum)
        temp_sq = mul(mul(temp_diff, temp_diff), Tensor(row_mask))
        temp = mul(sum_(temp_sq), 1.0 / (n_partnered * targets.spectrum.shape[1]))
    total = mul(recon, weights.lambda1) + mul(phys, weights.lambda2) + mul(temp, weights.lambda3)
    return total, recon, phys, temp


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------

def _dataset_arrays(samples: list[Sample], B: int):
    n = len(samples)
    spectra = np.zeros((n, B))
    met = np.zeros((n, samples[0].meteorology.shape[0])) if n else np.zeros((0, 0))
    nxt = np.zeros((n, B))
    partnered = np.zeros(n, dtype=bool)
    for i, s in enumerate(samples):
        spectra[i] = s.spectrum
        met[i] = s.meteorology
        if s.next_spectrum is not None:
            nxt[i] = s.next_spectrum
            partnered[i] = True
    return spectra, met, nxt, partnered


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if denom < 1e-300:
        return float("nan")
    return float((a * b).sum()) / denom


def _r2(pred: np.ndarray, truth: np.ndarray) -> float:
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    if ss_tot < 1e-300:
        return float("nan")
    return 1.0 - float(((truth - pred) ** 2).sum()) / ss_tot


def split_groups(ds: Dataset, val_fraction: float = 0.15):
    """Hold out the last `val_fraction` of composite groups for validation."""
    groups = ds.groups()
    if len(groups) < 2:
        raise DataError("pretraining needs at least 2 composite groups")
    n_val = max(1, int(round(val_fraction * len(groups))))
    n_val = min(n_val, len(groups) - 1)
    val_groups = set(groups[-n_val:])
    train = [s for s in ds.samples if s.composite_group not in val_groups]
    val = [s for s in ds.samples if s.composite_group in val_groups]
    return train, val


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

def _forward_ssl(state: ModelState, masked, flags, met, train_mode, rng):
    seq = tokenize(state, masked, flags, met)
    emb, cls = encode(state, seq, train_mode, rng)
    recon = decode_reconstruction(state, emb, train_mode, rng)
    return SSLOutputs(recon=recon, phys=predict_indices(state, cls),
                      temp=predict_next_spectrum(state, cls))


def _batch_masks(mode: str, base_flags: np.ndarray, n: int, count: int,
                 table: BandTable, rng) -> np.ndarray:
    if mode == "targeted":
        return np.broadcast_to(base_flags, (n, base_flags.shape[0]))
    return np.stack([random_contiguous_mask(table, count, rng).flags for _ in range(n)])


def pretrain(ds: Dataset, cfg: PretrainConfig, model_cfg: ModelConfig,
             table: BandTable | None = None,
             tokenization: Tokenization | None = None,
             weights: LossWeights = LossWeights()):
    """Train the SSL model; returns (ModelState, history row dicts)."""
    table = table or default_band_table()
    if ds.band_table_hash != table.content_hash:
        raise DataError("dataset was generated against a different band table")
    if model_cfg.band_count != table.B:
        raise ConfigError(f"model band_count {model_cfg.band_count} != table B {table.B}")
    tokenization = tokenization or default_tokenization(table)
    train, val = split_groups(ds)

    state = init_model(model_cfg, tokenization, table.content_hash, cfg.seed)
    init_digest = state.encoder_digest()

    tr_spec, tr_met, tr_next, tr_part = _dataset_arrays(train, table.B)
    va_spec, va_met, va_next, va_part = _dataset_arrays(val, table.B)

    # physics targets from unmasked spectra; standardization from train split
    idx_set = default_index_set()
    tr_phys_raw = np.stack([index_vector(s, table, idx_set) for s in tr_spec])
    va_phys_raw = np.stack([index_vector(s, table, idx_set) for s in va_spec])
    phys_mu = tr_phys_raw.mean(axis=0)
    phys_sd = tr_phys_raw.std(axis=0)
    phys_sd[phys_sd < 1e-12] = 1.0
    tr_phys = (tr_phys_raw - phys_mu) / phys_sd
    va_phys = (va_phys_raw - phys_mu) / phys_sd

    base_mask = targeted_mask(table)
    mask_count = base_mask.masked_count
    if mask_count == 0:
        raise DataError("targeted mask is empty; cannot pretrain")

    shuffle_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 2))))
    dropout_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 3))))
    mask_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 4))))

    params = state.pretrain_parameters()
    opt = OptimizerState.for_params(params)
    sched = LrSchedule(peak_lr=cfg.lr, total_epochs=cfg.epochs, warmup_epochs=cfg.warmup)
    order_digest = hashlib.sha256()
    history = []
    n_train = len(train)

    for epoch in range(cfg.epochs):
        lr = cosine_warmup_lr(epoch, sched)
        perm = shuffle_rng.permutation(n_train)
        order_digest.update(perm.astype("<i8").tobytes())
        sums = np.zeros(4)
        seen = 0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            flags = _batch_masks(cfg.mask_mode, base_mask.flags, len(idx),
                                 mask_count, table, mask_rng)
            masked = np.where(flags, 0.0, tr_spec[idx])
            outputs = _forward_ssl(state, masked, flags, tr_met[idx], True, dropout_rng)
            targets = SSLTargets(tr_spec[idx], tr_phys[idx], tr_next[idx], tr_part[idx])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # all-unpartnered batches are expected
                total, recon, phys, temp = ssl_loss(outputs, targets, flags, weights)
            if not np.isfinite(total.data):
                raise NumericError(f"non-finite loss at epoch {epoch} "
                                   f"batch {start // cfg.batch_size}")
            zero_grads(params)
            total.backward()
            adamw_step(params, opt, lr, weight_decay=cfg.weight_decay)
            k = len(idx)
            sums += k * np.array([total.data.item(), recon.data.item(),
                                  phys.data.item(), temp.data.item()])
            seen += k

        val_flags = _batch_masks(
            cfg.mask_mode, base_mask.flags, len(val), mask_count, table,
            np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 5, epoch)))))
        va_masked = np.where(val_flags, 0.0, va_spec)
        va_out = _forward_ssl(state, va_masked, val_flags, va_met, False, None)
        sel = np.asarray(val_flags)
        val_r = _pearson(va_out.recon.data[sel], va_spec[sel])
        val_phys_r2 = _r2(va_out.phys.data.ravel(), va_phys.ravel())
        history.append({
            "epoch": epoch + 1, "lr": lr,
            "loss_total": sums[0] / seen, "loss_recon": sums[1] / seen,
            "loss_phys": sums[2] / seen, "loss_temp": sums[3] / seen,
            "val_pearson_r": val_r, "val_phys_r2": val_phys_r2,
        })

    state.metadata.update({
        "epochs_seen": cfg.epochs,
        "mask_mode": cfg.mask_mode,
        "seed": cfg.seed,
        "phys_mu": [float(v) for v in phys_mu],
        "phys_sd": [float(v) for v in phys_sd],
        "loss_weights": [weights.lambda1, weights.lambda2, weights.lambda3],
        "init_digest": init_digest,
        "batch_order_digest": order_digest.hexdigest(),
        "pretrain": {"epochs": cfg.epochs, "batch_size": cfg.batch_size,
                     "lr": cfg.lr, "weight_decay": cfg.weight_decay,
                     "warmup": cfg.warmup},
    })
    return state, history


# ---------------------------------------------------------------------------
# Feature extraction (frozen encoder)
# ---------------------------------------------------------------------------

def aux_features(samples: list[Sample], table: BandTable) -> np.ndarray:
    """6 bio-optical indices (from the unmasked spectrum) + 52 met features."""
    idx_set = default_index_set()
    rows = [np.concatenate([index_vector(s.spectrum, table, idx_set), s.meteorology])
            for s in samples]
    return np.stack(rows)


def cls_features(state: ModelState, samples: list[Sample], table: BandTable,
                 chunk: int = 256) -> np.ndarray:
    """Frozen-encoder CLS embeddings. The targeted mask is always applied, so
    downstream inputs match the pretraining distribution and never expose
    diagnostic-band values to the encoder."""
    flags = targeted_mask(table).flags
    spectra, met, _, _ = _dataset_arrays(samples, table.B)
    masked = np.where(flags[None, :], 0.0, spectra)
    out = []
    for start in range(0, len(samples), chunk):
        sl = slice(start, start + chunk)
        seq = tokenize(state, masked[sl], flags, met[sl])
        _, cls = encode(state, seq, False, None)
        out.append(cls.data)
    return np.concatenate(out, axis=0)


def extract_features(samples: list[Sample], table: BandTable, feature_mode: str,
                     state: ModelState | None = None) -> np.ndarray:
    if feature_mode not in FEATURE_MODES:
        raise ConfigError(f"unknown feature_mode {feature_mode!r}")
    if feature_mode == "aux_only":
        return aux_features(samples, table)
    if state is None:
        raise ConfigError(f"feature_mode {feature_mode!r} requires an encoder state")
    cls = cls_features(state, samples, table)
    if feature_mode == "ssl_all":
        return np.concatenate([cls, aux_features(samples, table)], axis=1)
    return cls  # ssl_context and random_init use CLS features alone


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Stop after `patience` consecutive epochs without val improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.since = 0

    def update(self, epoch: int, val: float) -> bool:
        if val < self.best:
            self.best = val
            self.best_epoch = epoch
            self.since = 0
            return False
        self.since += 1
        return self.since >= self.patience


def stratified_val_split(y: np.ndarray, rng: np.random.Generator,
                         val_fraction: float = 0.2):
    """Label-quartile stratified split; returns (train_idx, val_idx)."""
    n = y.shape[0]
    qs = np.quantile(y, [0.25, 0.5, 0.75])
    bins = np.digitize(y, qs)
    val_idx = []
    for b in range(4):
        members = np.flatnonzero(bins == b)
        if members.size < 2:
            continue
        members = members[rng.permutation(members.size)]
        take = max(1, int(round(val_fraction * members.size)))
        take = min(take, members.size - 1)
        val_idx.extend(members[:take])
    if not val_idx:  # tiny degenerate sets: peel one sample off the end
        val_idx = [n - 1]
    val_idx = np.asarray(sorted(val_idx), dtype=np.intp)
    train_idx = np.asarray([i for i in range(n) if i not in set(val_idx.tolist())],
                           dtype=np.intp)
    if train_idx.size == 0:
        raise DataError("validation split consumed every labeled sample")
    return train_idx, val_idx


def _head_forward(state: ModelState, X: np.ndarray, train_mode: bool, rng,
                  dropout_p: float = 0.3) -> Tensor:
    return predict_microcystin(state, None, Tensor(X), train_mode, rng, dropout_p)


def finetune(ds: Dataset, base: ModelState | None, cfg: FinetuneConfig,
             table: BandTable | None = None,
             model_cfg: ModelConfig | None = None,
             tokenization: Tokenization | None = None):
    """Train the downstream head on frozen features; returns (state, history).

    The returned state carries the head parameters; encoder parameters (when
    present) are bitwise those of `base` / the fresh random initialization.
    """
    table = table or default_band_table()
    labeled = ds.labeled()
    if not labeled:
        raise DataError("finetune requires labeled samples")

    if cfg.feature_mode in ("ssl_context", "ssl_all"):
        if base is None:
            raise ConfigError(f"feature_mode {cfg.feature_mode!r} requires a "
                              "pretrained model")
        encoder = base
    else:
        # aux_only carries an unused fresh encoder so every artifact has the
        # same shape; random_init's is the point of that configuration.
        mc = model_cfg or (base.config if base is not None else
                           ModelConfig(band_count=table.B))
        tok = tokenization or (base.tokenization if base is not None
                               else default_tokenization(table))
        encoder = init_model(mc, tok, table.content_hash, cfg.seed + 7919)
        encoder.metadata["mask_mode"] = None

    state = ModelState(encoder.config, encoder.tokenization, encoder.band_table_hash,
                       dict(encoder.params), dict(encoder.metadata))

    X = extract_features(labeled, table, cfg.feature_mode,
                         None if cfg.feature_mode == "aux_only" else state)
    y = np.log1p(np.asarray([s.microcystin for s in labeled]))

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 11))))
    train_idx, val_idx = stratified_val_split(y, rng)

    x_mu = X[train_idx].mean(axis=0)
    x_sd = X[train_idx].std(axis=0)
    x_sd[x_sd < 1e-12] = 1.0
    Xs = (X - x_mu) / x_sd

    add_downstream_head(state, X.shape[1], cfg.seed, cfg.hidden)
    state.metadata["head"].update({
        "feature_mode": cfg.feature_mode,
        "x_mu": [float(v) for v in x_mu],
        "x_sd": [float(v) for v in x_sd],
    })
    encoder_digest_before = state.encoder_digest()

    head_params = state.head_parameters()
    opt = OptimizerState.for_params(head_params)
    dropout_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 13))))
    stopper = EarlyStopper(cfg.patience)
    best_weights = None
    history = []

    Xtr, ytr = Xs[train_idx], y[train_idx]
    Xva, yva = Xs[val_idx], y[val_idx]
    n_train = Xtr.shape[0]

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            pred = _head_forward(state, Xtr[idx], True, dropout_rng, cfg.dropout_p)
            diff = pred - Tensor(ytr[idx][:, None])
            loss = mul(sum_(mul(diff, diff)), 1.0 / len(idx))
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite fine-tune loss at epoch {epoch}")
            zero_grads(head_params)
            loss.backward()
            adamw_step(head_params, opt, cfg.lr, weight_decay=cfg.weight_decay)

        train_pred = _head_forward(state, Xtr, False, None).data[:, 0]
        val_pred = _head_forward(state, Xva, False, None).data[:, 0]
        train_mse = float(((train_pred - ytr) ** 2).mean())
        val_mse = float(((val_pred - yva) ** 2).mean())
        stop = stopper.update(epoch, val_mse)
        if stopper.best_epoch == epoch:
            best_weights = {p.name: p.data.copy() for p in head_params}
        history.append({"epoch": epoch, "train_mse": train_mse,
                        "val_mse": val_mse, "stopped": int(stop)})
        if stop:
            break

    if best_weights is not None:
        for p in head_params:
            p.data = best_weights[p.name]
    state.metadata["head"]["best_epoch"] = stopper.best_epoch

    if state.encoder_digest() != encoder_digest_before:
        raise NumericError("frozen-encoder contract violated")
    return state, history


def predict_mc_log(state: ModelState, samples: list[Sample],
                   table: BandTable | None = None) -> np.ndarray:
    """Head predictions in log1p space for arbitrary samples."""
    table = table or default_band_table()
    head_meta = state.metadata.get("head")
    if head_meta is None:
        raise ConfigError("model has no fitted downstream head")
    mode = head_meta["feature_mode"]
    X = extract_features(samples, table, mode,
                         None if mode == "aux_only" else state)
    Xs = (X - np.asarray(head_meta["x_mu"])) / np.asarray(head_meta["x_sd"])
    return _head_forward(state, Xs, False, None).data[:, 0]


def predict_mc(state: ModelState, samples: list[Sample],
               table: BandTable | None = None) -> np.ndarray:
    """Predictions in original units (ug/L), clipped to be non-negative."""
    return np.maximum(np.expm1(predict_mc_log(state, samples, table)), 0.0)


# ---------------------------------------------------------------------------
# History CSVs
# ---------------------------------------------------------------------------

PRETRAIN_HISTORY_COLUMNS = ["epoch", "lr", "loss_total", "loss_recon",
                            "loss_phys", "loss_temp", "val_pearson_r", "val_phys_r2"]
FINETUNE_HISTORY_COLUMNS = ["epoch", "train_mse", "val_mse", "stopped"]


def _write_history(rows: list[dict], columns: list[str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(row[c])) if isinstance(row[c], float)
                             else str(row[c]) for c in columns])


def write_pretrain_history(rows: list[dict], path) -> None:
    _write_history(rows, PRETRAIN_HISTORY_COLUMNS, path)


def write_finetune_history(rows: list[dict], path) -> None:
    _write_history(rows, FINETUNE_HISTORY_COLUMNS, path)


# ---------------------------------------------------------------------------
# Estimator wrappers
# ---------------------------------------------------------------------------

class SpecTMPretrainer(TransformerMixin, BaseEstimator):
    """sklearn-style wrapper around pretrain(); fit takes a Dataset and
    transform yields frozen CLS features."""

    def __init__(self, encoder_layers=6, heads=8, d_model=256, d_ff=1024,
                 decoder_layers=2, dropout_p=0.1, epochs=100, batch_size=256,
                 lr=1e-4, weight_decay=0.01, warmup=5, seed=0,
                 mask_mode="targeted", lambda1=1.0, lambda2=0.5, lambda3=0.3):
        self.encoder_layers = encoder_layers
        self.heads = heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.decoder_layers = decoder_layers
        self.dropout_p = dropout_p
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.seed = seed
        self.mask_mode = mask_mode
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3

    def fit(self, ds: Dataset, y=None, table: BandTable | None = None):
        table = table or default_band_table()
        model_cfg = ModelConfig(
            encoder_layers=self.encoder_layers, heads=self.heads,
            d_model=self.d_model, d_ff=self.d_ff,
            decoder_layers=self.decoder_layers, dropout_p=self.dropout_p,
            band_count=table.B, met_dim=ds.samples[0].meteorology.shape[0] if ds.samples else 52)
        cfg = PretrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                             lr=self.lr, weight_decay=self.weight_decay,
                             warmup=self.warmup, seed=self.seed,
                             mask_mode=self.mask_mode)
        weights = LossWeights(self.lambda1, self.lambda2, self.lambda3)
        self.state_, self.history_ = pretrain(ds, cfg, model_cfg, table,
                                              weights=weights)
        self.table_ = table
        return self

    def transform(self, ds: Dataset) -> np.ndarray:
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "state_")
        return cls_features(self.state_, list(ds.samples), self.table_)


class MicrocystinRegressor(RegressorMixin, BaseEstimator):
    """Frozen-encoder downstream regressor. fit takes a labeled Dataset;
    predict returns concentrations in ug/L."""

    def __init__(self, base: ModelState | None = None, feature_mode="ssl_all",
                 lr=1e-3, max_epochs=100, patience=20, dropout_p=0.3,
                 batch_size=32, weight_decay=0.01, seed=0):
        self.base = base
        self.feature_mode = feature_mode
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.dropout_p = dropout_p
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, ds: Dataset, y=None, table: BandTable | None = None):
        cfg = FinetuneConfig(feature_mode=self.feature_mode, lr=self.lr,
                             max_epochs=self.max_epochs, patience=self.patience,
                             dropout_p=self.dropout_p, batch_size=self.batch_size,
                             weight_decay=self.weight_decay, seed=self.seed)
        self.table_ = table or default_band_table()
        self.state_, self.history_ = finetune(ds, self.base, cfg, self.table_)
        return self

    def predict(self, ds: Dataset) -> np.ndarray:
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "state_")
        return predict_mc(self.state_, list(ds.samples), self.table_)

    def predict_log(self, ds: Dataset) -> np.ndarray:
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "state_")
        return predict_mc_log(self.state_, list(ds.samples), self.table_)
