"""Metrics, cross-validation, baseline models, interpolation oracles, and the
three experiment harnesses: reconstruction benchmark, ablation suite, and the
label-efficiency study.

All harnesses run on immutable inputs; independent jobs (folds, seeds,
subsamples) can execute concurrently and results assemble in deterministic
key order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import LinAlgError, solve
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, RegressorMixin

from .core import BandTable, Dataset, Sample, default_band_table
from .errors import ConfigError, DataError
from .masking import MaskVector, random_contiguous_mask, targeted_mask
from .model import ModelConfig, ModelState, encode, decode_reconstruction, tokenize
from .training import (FinetuneConfig, PretrainConfig, _dataset_arrays,
                       finetune, predict_mc_log, pretrain)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    r2: float
    rmse: float
    pearson_r: float
    spearman_rho: float
    n: int
    scale: str = "log"


def _pearson_raw(a: np.ndarray, b: np.ndarray) -> float:
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom < 1e-300:
        return float("nan")
    return float((ac * bc).sum() / denom)


def metrics(pred, truth, scale: str = "log") -> EvalReport:
    """R^2, RMSE, Pearson r, and tie-aware Spearman rho. Degenerate cases
    (constant truth) yield NaN for the variance-normalized metrics."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise DataError(f"metrics needs equal-length vectors, got {pred.shape} "
                        f"and {truth.shape}")
    n = pred.shape[0]
    if n < 2:
        raise DataError("metrics needs at least 2 points")
    rmse = float(np.sqrt(((pred - truth) ** 2).mean()))
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    if ss_tot < 1e-300:
        r2 = float("nan")
        pr = float("nan")
        sr = float("nan")
    else:
        r2 = 1.0 - float(((pred - truth) ** 2).sum()) / ss_tot
        pr = _pearson_raw(pred, truth)
        sr = _pearson_raw(rankdata(pred), rankdata(truth))
    return EvalReport(r2=r2, rmse=rmse, pearson_r=pr, spearman_rho=sr,
                      n=n, scale=scale)


# ---------------------------------------------------------------------------
# Cross-validation schemes
# ---------------------------------------------------------------------------

def logo_cv(ds: Dataset, runner, scale: str = "log"):
    """Leave-one-composite-group-out CV over the labeled samples.

    runner(train_samples, test_samples) must return predictions for the test
    samples in order, in the same space as the labels handed to metrics
    (log1p space here). Returns (per-group reports, pooled report).
    """
    labeled = ds.labeled()
    groups = sorted({s.composite_group for s in labeled})
    if len(groups) < 2:
        raise DataError("logo_cv needs at least 2 composite groups")
    per_group: dict[int, EvalReport | None] = {}
    pooled_pred, pooled_truth = [], []
    for g in groups:
        train = [s for s in labeled if s.composite_group != g]
        test = [s for s in labeled if s.composite_group == g]
        pred = np.asarray(runner(train, test), dtype=np.float64)
        if pred.shape[0] != len(test):
            raise DataError(f"runner returned {pred.shape[0]} predictions for "
                            f"fold {g} of size {len(test)}")
        truth = np.log1p(np.asarray([s.microcystin for s in test]))
        pooled_pred.append(pred)
        pooled_truth.append(truth)
        per_group[g] = metrics(pred, truth, scale) if len(test) >= 2 else None
    pooled = metrics(np.concatenate(pooled_pred), np.concatenate(pooled_truth), scale)
    return per_group, pooled


def temporal_split(ds: Dataset, boundary_date: str) -> tuple[Dataset, Dataset]:
    """Train strictly before the boundary, test on/after. Train samples whose
    t+8 partner falls on/after the boundary lose the link (leakage guard)."""
    boundary = str(boundary_date)
    date_of = {s.id: s.date for s in ds.samples}
    train, test = [], []
    for s in ds.samples:
        if s.date < boundary:
            if s.next_id is not None and date_of.get(s.next_id, "") >= boundary:
                s = replace(s, next_id=None, next_spectrum=None)
            train.append(s)
        else:
            test.append(s)
    if not train:
        raise DataError(f"temporal_split at {boundary}: empty train side")
    if not test:
        raise DataError(f"temporal_split at {boundary}: empty test side")
    return (Dataset(tuple(train), ds.band_table_hash),
            Dataset(tuple(test), ds.band_table_hash))


def default_boundary(ds: Dataset, quantile: float = 0.75) -> str:
    """Boundary date putting roughly the last (1-quantile) of distinct dates
    into the test side."""
    dates = sorted({s.date for s in ds.samples})
    if len(dates) < 2:
        raise DataError("need at least 2 distinct dates for a temporal split")
    pos = min(int(round(quantile * len(dates))), len(dates) - 1)
    return dates[pos]


# ---------------------------------------------------------------------------
# Baseline models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RidgeWeights:
    w: np.ndarray
    intercept: float
    mu: np.ndarray
    sd: np.ndarray
    alpha: float
    singular: bool


def ridge_fit(X, y, alpha: float) -> RidgeWeights:
    """Closed-form ridge on internally standardized columns; the intercept is
    the (unpenalized) label mean. A singular system at alpha=0 is reported via
    RuntimeWarning and solved by minimum-norm least squares."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise DataError(f"ridge_fit shapes inconsistent: {X.shape} vs {y.shape}")
    if alpha < 0:
        raise ConfigError("ridge alpha must be >= 0")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    Z = (X - mu) / sd
    ybar = float(y.mean())
    yc = y - ybar
    p = Z.shape[1]
    singular = False
    gram = Z.T @ Z + alpha * np.eye(p)
    try:
        if alpha == 0.0 and np.linalg.matrix_rank(Z) < p:
            raise LinAlgError("rank deficient")
        w = solve(gram, Z.T @ yc, assume_a="pos")
    except LinAlgError:
        singular = True
        warnings.warn("singular ridge system at alpha=0; using minimum-norm "
                      "least squares", RuntimeWarning, stacklevel=2)
        w = np.linalg.lstsq(Z, yc, rcond=None)[0]
    return RidgeWeights(w=w, intercept=ybar, mu=mu, sd=sd,
                        alpha=float(alpha), singular=singular)


def ridge_predict(weights: RidgeWeights, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Z = (X - weights.mu) / weights.sd
    return Z @ weights.w + weights.intercept


def knn_regress(train_X, train_y, query, k: int) -> np.ndarray:
    """k-nearest-neighbor mean on standardized Euclidean distance. Distance
    ties resolve to the lower training index."""
    train_X = np.asarray(train_X, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if query.ndim == 1:
        query = query[None, :]
    n = train_X.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in 1..{n}, got {k}")
    mu = train_X.mean(axis=0)
    sd = train_X.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    Zt = (train_X - mu) / sd
    Zq = (query - mu) / sd
    out = np.empty(Zq.shape[0])
    idx = np.arange(n)
    for i, q in enumerate(Zq):
        d = np.sqrt(((Zt - q) ** 2).sum(axis=1))
        order = np.lexsort((idx, d))
        out[i] = train_y[order[:k]].mean()
    return out


# ---------------------------------------------------------------------------
# Interpolation oracle
# ---------------------------------------------------------------------------

def interpolate_bands(x, mask: MaskVector, mode: str,
                      table: BandTable | None = None) -> np.ndarray:
    """Fill masked bands by interpolating the unmasked (wavelength, value)
    anchors; masked runs beyond the outermost anchors clamp to the nearest
    anchor's value. Unmasked values pass through untouched."""
    table = table or default_band_table()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != mask.B or table.B != mask.B:
        raise DataError("spectrum, mask, and band table lengths must agree")
    anchors = ~mask.flags
    n_anchor = int(anchors.sum())
    lam = table.wavelengths
    out = x.copy()
    if mask.masked_count == 0:
        return out
    if mode == "linear":
        if n_anchor < 2:
            raise DataError("linear interpolation needs >= 2 unmasked bands")
        out[mask.flags] = np.interp(lam[mask.flags], lam[anchors], x[anchors])
        return out
    if mode == "cubic_spline":
        if n_anchor < 4:
            raise DataError("cubic spline interpolation needs >= 4 unmasked bands")
        spline = CubicSpline(lam[anchors], x[anchors], bc_type="natural")
        vals = spline(lam[mask.flags])
        lo, hi = lam[anchors][0], lam[anchors][-1]
        masked_lam = lam[mask.flags]
        vals = np.where(masked_lam < lo, x[anchors][0], vals)
        vals = np.where(masked_lam > hi, x[anchors][-1], vals)
        out[mask.flags] = vals
        return out
    raise ConfigError(f"unknown interpolation mode {mode!r}")


# ---------------------------------------------------------------------------
# Reconstruction benchmark
# ---------------------------------------------------------------------------

def reconstruction_benchmark(state: ModelState, ds: Dataset,
                             mask_mode: str = "targeted",
                             table: BandTable | None = None,
                             seed: int = 0) -> list[dict]:
    """Pooled Pearson r at masked positions for the model and the two
    interpolation baselines. Returns CSV-ready rows."""
    table = table or default_band_table()
    samples = list(ds.samples)
    spectra, met, _, _ = _dataset_arrays(samples, table.B)
    base = targeted_mask(table)
    if mask_mode == "targeted":
        masks = [base] * len(samples)
    elif mask_mode == "random":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 21))))
        masks = [random_contiguous_mask(table, base.masked_count, rng)
                 for _ in samples]
    else:
        raise ConfigError(f"unknown mask_mode {mask_mode!r}")

    flags = np.stack([m.flags for m in masks])
    masked = np.where(flags, 0.0, spectra)
    model_est = np.empty_like(spectra)
    chunk = 256
    for start in range(0, len(samples), chunk):
        sl = slice(start, start + chunk)
        seq = tokenize(state, masked[sl], flags[sl], met[sl])
        emb, _ = encode(state, seq, False, None)
        model_est[sl] = decode_reconstruction(state, emb, False, None).data

    truth_pool = spectra[flags]
    estimates = {"model": model_est[flags]}
    for mode, name in (("cubic_spline", "cubic_spline"), ("linear", "linear")):
        est = np.stack([interpolate_bands(spectra[i], masks[i], mode, table)
                        for i in range(len(samples))])
        estimates[name] = est[flags]
    rows = []
    for name in ("model", "cubic_spline", "linear"):
        rows.append({"method": name,
                     "pearson_r": _pearson_raw(estimates[name], truth_pool),
                     "n_positions": int(flags.sum())})
    return rows


# ---------------------------------------------------------------------------
# Ablation suite
# ---------------------------------------------------------------------------

ABLATION_CONFIGS = ("ssl_context", "ssl_all", "aux_only", "random_init",
                    "mask_targeted", "mask_random")


def _finetune_and_score(train_ds: Dataset, test_ds: Dataset,
                        base: ModelState | None, feature_mode: str,
                        ft_cfg: FinetuneConfig, table: BandTable,
                        model_cfg: ModelConfig) -> dict:
    cfg = replace(ft_cfg, feature_mode=feature_mode)
    fitted, _ = finetune(train_ds, base, cfg, table, model_cfg)
    test_labeled = test_ds.labeled()
    pred = predict_mc_log(fitted, test_labeled, table)
    truth = np.log1p(np.asarray([s.microcystin for s in test_labeled]))
    rep = metrics(pred, truth, "log")
    rep_orig = metrics(np.maximum(np.expm1(pred), 0.0),
                       np.asarray([s.microcystin for s in test_labeled]), "original")
    return {"report": rep, "report_original": rep_orig}


def ablation_suite(ds: Dataset, seeds: list[int], pre_cfg: PretrainConfig,
                   model_cfg: ModelConfig, ft_cfg: FinetuneConfig,
                   table: BandTable | None = None,
                   boundary_date: str | None = None,
                   jobs: int = 1) -> dict:
    """Per seed: pretrain targeted and random-mask twins from identical
    initialization, then fine-tune the six reported configurations on the
    temporal split. The masking rows rerun ssl_context features against each
    pretraining twin so the only differing upstream input is the mask."""
    table = table or default_band_table()
    if len(seeds) < 3:
        raise ConfigError("ablation_suite needs at least 3 seeds")
    boundary = boundary_date or default_boundary(ds)
    train_ds, test_ds = temporal_split(ds, boundary)

    def run_seed(seed: int) -> dict:
        state_t, _ = pretrain(ds, replace(pre_cfg, seed=seed, mask_mode="targeted"),
                              model_cfg, table)
        state_r, _ = pretrain(ds, replace(pre_cfg, seed=seed, mask_mode="random"),
                              model_cfg, table)
        if state_t.metadata["init_digest"] != state_r.metadata["init_digest"]:
            raise RuntimeError("ablation fairness violated: init digests differ")
        if state_t.metadata["batch_order_digest"] != state_r.metadata["batch_order_digest"]:
            raise RuntimeError("ablation fairness violated: batch order differs")
        ft = replace(ft_cfg, seed=seed)
        results = {
            "ssl_context": _finetune_and_score(train_ds, test_ds, state_t,
                                               "ssl_context", ft, table, model_cfg),
            "ssl_all": _finetune_and_score(train_ds, test_ds, state_t,
                                           "ssl_all", ft, table, model_cfg),
            "aux_only": _finetune_and_score(train_ds, test_ds, None,
                                            "aux_only", ft, table, model_cfg),
            "random_init": _finetune_and_score(train_ds, test_ds, None,
                                               "random_init", ft, table, model_cfg),
            "mask_random": _finetune_and_score(train_ds, test_ds, state_r,
                                               "ssl_context", ft, table, model_cfg),
        }
        # targeted-masking row is definitionally the ssl_context run
        results["mask_targeted"] = results["ssl_context"]
        results["digests"] = {
            "init": state_t.metadata["init_digest"],
            "batch_order": state_t.metadata["batch_order_digest"],
        }
        return results

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_seed = dict(zip(seeds, pool.map(run_seed, seeds)))
    else:
        per_seed = {seed: run_seed(seed) for seed in seeds}

    summary = {}
    for config in ABLATION_CONFIGS:
        vals = np.asarray([per_seed[s][config]["report"].r2 for s in seeds])
        summary[config] = {"r2_mean": float(vals.mean()),
                           "r2_sd": float(vals.std()),
                           "r2_values": [float(v) for v in vals]}
    summary["delta_ssl_vs_random_init"] = (summary["ssl_context"]["r2_mean"]
                                           - summary["random_init"]["r2_mean"])
    summary["delta_targeted_vs_random_mask"] = (summary["mask_targeted"]["r2_mean"]
                                                - summary["mask_random"]["r2_mean"])
    return {"per_seed": per_seed, "summary": summary, "seeds": list(seeds),
            "boundary_date": boundary}


# ---------------------------------------------------------------------------
# Label efficiency
# ---------------------------------------------------------------------------

DEFAULT_FRACTIONS = (0.05, 0.10, 0.25, 0.50, 0.75, 1.00)
N_SUBSAMPLES = 5
EFFICIENCY_METHODS = ("ssl_all", "aux_only")


@dataclass(frozen=True)
class EfficiencyCurve:
    fractions: tuple[float, ...]
    rows: tuple[dict, ...]  # one per (fraction, method): mean, sd, values

    def row(self, fraction: float, method: str) -> dict:
        for r in self.rows:
            if r["fraction"] == fraction and r["method"] == method:
                return r
        raise KeyError((fraction, method))


def stratified_subsample(labeled: list[Sample], fraction: float,
                         rng: np.random.Generator) -> list[Sample]:
    """Label-quartile stratified subsample of about fraction * n samples,
    at least one per non-empty quartile."""
    y = np.log1p(np.asarray([s.microcystin for s in labeled]))
    qs = np.quantile(y, [0.25, 0.5, 0.75])
    bins = np.digitize(y, qs)
    chosen: list[int] = []
    for b in range(4):
        members = np.flatnonzero(bins == b)
        if members.size == 0:
            continue
        take = max(1, int(round(fraction * members.size)))
        take = min(take, members.size)
        perm = rng.permutation(members.size)
        chosen.extend(members[perm[:take]])
    chosen = sorted(chosen)
    return [labeled[i] for i in chosen]


def label_efficiency(ds: Dataset, base: ModelState, ft_cfg: FinetuneConfig,
                     fractions=DEFAULT_FRACTIONS,
                     table: BandTable | None = None,
                     boundary_date: str | None = None,
                     model_cfg: ModelConfig | None = None,
                     seed: int = 0, jobs: int = 1) -> EfficiencyCurve:
    """SSL+all vs AUX-only test R^2 as a function of labeled-train fraction,
    with exactly 5 stratified subsamples per point. The fine-tune seed is held
    fixed so fraction 1.0 degenerates to five identical runs (SD = 0)."""
    table = table or default_band_table()
    fractions = tuple(sorted(float(f) for f in fractions))
    if not fractions or fractions[0] <= 0 or fractions[-1] > 1.0:
        raise ConfigError("fractions must lie in (0, 1]")
    boundary = boundary_date or default_boundary(ds)
    train_ds, test_ds = temporal_split(ds, boundary)
    labeled = train_ds.labeled()
    model_cfg = model_cfg or base.config

    if int(round(fractions[0] * len(labeled))) < 4:
        raise DataError(f"fraction {fractions[0]} of {len(labeled)} labeled "
                        "samples yields fewer than 4 training samples")

    def run_point(args):
        fi, j = args
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((seed, fi, j, 31))))
        subset = stratified_subsample(labeled, fractions[fi], rng)
        sub_ds = Dataset(tuple(subset), ds.band_table_hash)
        out = {}
        for method in EFFICIENCY_METHODS:
            res = _finetune_and_score(sub_ds, test_ds,
                                      base if method == "ssl_all" else None,
                                      method, ft_cfg, table, model_cfg)
            out[method] = res["report"].r2
        return (fi, j), out

    keys = [(fi, j) for fi in range(len(fractions)) for j in range(N_SUBSAMPLES)]
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(run_point, keys))
    else:
        results = dict(run_point(k) for k in keys)

    rows = []
    for fi, fraction in enumerate(fractions):
        for method in EFFICIENCY_METHODS:
            vals = np.asarray([results[(fi, j)][method] for j in range(N_SUBSAMPLES)])
            rows.append({"fraction": fraction, "method": method,
                         "r2_mean": float(vals.mean()), "r2_sd": float(vals.std()),
                         "r2_values": [float(v) for v in vals]})
    return EfficiencyCurve(fractions=fractions, rows=tuple(rows))


# ---------------------------------------------------------------------------
# Report CSVs
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    # float() strips numpy scalar wrappers so repr round-trips cleanly
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_reconstruction_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "pearson_r", "n_positions"])
        for r in rows:
            w.writerow([r["method"], _fmt(r["pearson_r"]), r["n_positions"]])


def write_ablation_csv(result: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "seed", "r2", "rmse", "pearson_r", "spearman_rho", "scale"])
        for config in ABLATION_CONFIGS:
            for seed in result["seeds"]:
                rep = result["per_seed"][seed][config]["report"]
                w.writerow([config, seed, _fmt(rep.r2), _fmt(rep.rmse),
                            _fmt(rep.pearson_r), _fmt(rep.spearman_rho), rep.scale])
            s = result["summary"][config]
            w.writerow([config, "mean", _fmt(s["r2_mean"]), "", "", "", "log"])
            w.writerow([config, "sd", _fmt(s["r2_sd"]), "", "", "", "log"])


def write_efficiency_csv(curve: EfficiencyCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "method", "r2_mean", "r2_sd", "n_subsamples"])
        for r in curve.rows:
            w.writerow([_fmt(r["fraction"]), r["method"], _fmt(r["r2_mean"]),
                        _fmt(r["r2_sd"]), N_SUBSAMPLES])


def write_cv_folds_csv(per_group: dict, pooled: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "r2", "rmse", "pearson_r", "spearman_rho", "n", "scale"])
        for g in sorted(per_group):
            rep = per_group[g]
            if rep is None:
                w.writerow([g, "", "", "", "", 1, "log"])
            else:
                w.writerow([g, _fmt(rep.r2), _fmt(rep.rmse), _fmt(rep.pearson_r),
                            _fmt(rep.spearman_rho), rep.n, rep.scale])
        w.writerow(["pooled", _fmt(pooled.r2), _fmt(pooled.rmse),
                    _fmt(pooled.pearson_r), _fmt(pooled.spearman_rho),
                    pooled.n, pooled.scale])


# ---------------------------------------------------------------------------
# Baseline estimator wrappers
# ---------------------------------------------------------------------------

class RidgeRegressor(RegressorMixin, BaseEstimator):
    """Closed-form ridge with internal column standardization."""

    def __init__(self, alpha: float = 1.0):
        self.alpha = alpha

    def fit(self, X, y):
        self.weights_ = ridge_fit(X, y, self.alpha)
        return self

    def predict(self, X):
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "weights_")
        return ridge_predict(self.weights_, X)


class KNNRegressor(RegressorMixin, BaseEstimator):
    """k-nearest-neighbor mean on standardized Euclidean distance."""

    def __init__(self, k: int = 5):
        self.k = k

    def fit(self, X, y):
        self.X_ = np.asarray(X, dtype=np.float64)
        self.y_ = np.asarray(y, dtype=np.float64)
        return self

    def predict(self, X):
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "X_")
        return knn_regress(self.X_, self.y_, X, self.k)
