"""Command-line entry point.

Subcommands mirror the experiment graph: generate -> pretrain -> finetune ->
evaluate / ablate / efficiency / reconstruct. Every run resolves its settings
from defaults, then an optional TOML config file, then explicit flags (flags
win), and writes a manifest.json capturing input digests, the resolved
config, and output digests; nothing in any output depends on wall-clock time.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import __version__
from .core import (default_band_table, load_band_table, load_dataset_csv,
                   save_dataset_csv, validate_dataset)
from .errors import ConfigError, DataError, SpecTMError
from .evaluation import (DEFAULT_FRACTIONS, ablation_suite, default_boundary,
                         label_efficiency, logo_cv, metrics,
                         reconstruction_benchmark, temporal_split,
                         write_ablation_csv, write_cv_folds_csv,
                         write_efficiency_csv, write_reconstruction_csv)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .synthgen import SceneConfig, simulate_scene
from .training import (FinetuneConfig, LossWeights, PretrainConfig, finetune,
                       predict_mc_log, pretrain, write_finetune_history,
                       write_pretrain_history)

import numpy as np


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


class Resolver:
    """defaults < config-file section < explicit flag."""

    def __init__(self, args: argparse.Namespace, config: dict):
        self.args = args
        self.config = config
        self.resolved: dict[str, dict] = {}

    def section(self, name: str, allowed: set[str]) -> dict:
        sect = self.config.get(name, {})
        if not isinstance(sect, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        for key in sect:
            if key not in allowed:
                raise ConfigError(f"unknown config key {key!r} in section [{name}]")
        return sect

    def get(self, section: str, key: str, default, allowed: set[str],
            attr: str | None = None):
        flag = getattr(self.args, attr or key, None)
        if flag is not None:
            value = flag
        else:
            sect = self.section(section, allowed)
            value = sect.get(key, default)
        self.resolved.setdefault(section, {})[key] = value
        return value


def _resolve_seed(res: Resolver, section: str, default: int, allowed: set[str]) -> int:
    value = res.get(section, "seed", None, allowed)
    if value is None:
        env = os.environ.get("SPECTM_SEED")
        if env is not None:
            try:
                value = int(env)
            except ValueError as exc:
                raise ConfigError(f"SPECTM_SEED must be an integer, got {env!r}") from exc
        else:
            value = default
    value = int(value)
    res.resolved.setdefault(section, {})["seed"] = value
    return value


MODEL_KEYS = {"encoder_layers", "heads", "d_model", "d_ff", "decoder_layers",
              "dropout_p"}


def _model_config(res: Resolver, band_count: int) -> ModelConfig:
    # the dropout flag is spelled --model-dropout so it cannot collide with
    # the fine-tuning head's --dropout-p
    kw = {key: res.get("model", key, getattr(ModelConfig, key), MODEL_KEYS,
                       attr="model_dropout" if key == "dropout_p" else key)
          for key in MODEL_KEYS}
    return ModelConfig(band_count=band_count, **kw)


def _band_table(args):
    if getattr(args, "band_table", None):
        return load_band_table(args.band_table)
    return default_band_table()


def _load_dataset(args, table):
    if not getattr(args, "data", None):
        raise ConfigError("--data is required")
    ds = load_dataset_csv(args.data, table)
    report = validate_dataset(ds, table)
    if not report.ok:
        raise DataError(f"{args.data}: invalid dataset: {report.issues[0]} "
                        f"({len(report.issues)} issues)")
    return ds


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out", None) or "runs/latest")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, command: str, seed: int, res: Resolver,
                    inputs: dict[str, str], outputs: list[Path]) -> None:
    manifest = {
        "artifact": "spectm",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": res.resolved,
        "inputs": {name: _sha256(p) for name, p in inputs.items()},
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    path = out / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    snap = out / "config.json"
    with open(snap, "w", encoding="utf-8") as fh:
        json.dump({"command": command, "seed": seed, "config": res.resolved},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

GENERATE_KEYS = {"seed", "locations", "timesteps", "noise_sd"}


def cmd_generate(args, config) -> int:
    res = Resolver(args, config)
    seed = _resolve_seed(res, "generate", 42, GENERATE_KEYS)
    locations = int(res.get("generate", "locations", 8, GENERATE_KEYS))
    timesteps = int(res.get("generate", "timesteps", 40, GENERATE_KEYS))
    noise_sd = float(res.get("generate", "noise_sd", 5e-4, GENERATE_KEYS))
    table = _band_table(args)
    scene = SceneConfig(n_locations=locations, n_timesteps=timesteps,
                        rng_seed=seed, noise_sd=noise_sd)
    ds = simulate_scene(scene, table)
    out = _out_dir(args)
    data_path = out / "dataset.csv"
    save_dataset_csv(ds, data_path, table)
    scene_path = out / "scene_config.json"
    with open(scene_path, "w", encoding="utf-8") as fh:
        json.dump({"n_locations": locations, "n_timesteps": timesteps,
                   "rng_seed": seed, "noise_sd": noise_sd,
                   "band_table_hash": table.content_hash},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")
    inputs = {}
    if getattr(args, "band_table", None):
        inputs["band_table"] = args.band_table
    _write_manifest(out, "generate", seed, res, inputs, [data_path, scene_path])
    print(f"wrote {data_path} ({len(ds)} samples)")
    return 0


PRETRAIN_KEYS = {"seed", "mask", "epochs", "batch_size", "lr", "weight_decay",
                 "warmup", "lambda1", "lambda2", "lambda3"}


def cmd_pretrain(args, config) -> int:
    res = Resolver(args, config)
    seed = _resolve_seed(res, "pretrain", 0, PRETRAIN_KEYS)
    table = _band_table(args)
    ds = _load_dataset(args, table)
    cfg = PretrainConfig(
        epochs=int(res.get("pretrain", "epochs", 100, PRETRAIN_KEYS)),
        batch_size=int(res.get("pretrain", "batch_size", 256, PRETRAIN_KEYS)),
        lr=float(res.get("pretrain", "lr", 1e-4, PRETRAIN_KEYS)),
        weight_decay=float(res.get("pretrain", "weight_decay", 0.01, PRETRAIN_KEYS)),
        warmup=int(res.get("pretrain", "warmup", 5, PRETRAIN_KEYS)),
        seed=seed,
        mask_mode=str(res.get("pretrain", "mask", "targeted", PRETRAIN_KEYS)))
    weights = LossWeights(
        float(res.get("pretrain", "lambda1", 1.0, PRETRAIN_KEYS)),
        float(res.get("pretrain", "lambda2", 0.5, PRETRAIN_KEYS)),
        float(res.get("pretrain", "lambda3", 0.3, PRETRAIN_KEYS)))
    model_cfg = _model_config(res, table.B)
    state, history = pretrain(ds, cfg, model_cfg, table, weights=weights)
    out = _out_dir(args)
    ckpt = out / "checkpoint.spectm"
    save_checkpoint(state, ckpt)
    hist = out / "pretrain_history.csv"
    write_pretrain_history(history, hist)
    inputs = {"data": args.data}
    if getattr(args, "band_table", None):
        inputs["band_table"] = args.band_table
    _write_manifest(out, "pretrain", seed, res, inputs, [ckpt, hist])
    print(f"wrote {ckpt} (mask={cfg.mask_mode}, epochs={cfg.epochs})")
    return 0


FINETUNE_KEYS = {"seed", "mode", "lr", "max_epochs", "patience", "dropout_p",
                 "batch_size", "weight_decay"}


def _finetune_config(res: Resolver, seed: int) -> FinetuneConfig:
    return FinetuneConfig(
        feature_mode=str(res.get("finetune", "mode", "ssl_all", FINETUNE_KEYS)),
        lr=float(res.get("finetune", "lr", 1e-3, FINETUNE_KEYS)),
        max_epochs=int(res.get("finetune", "max_epochs", 100, FINETUNE_KEYS)),
        patience=int(res.get("finetune", "patience", 20, FINETUNE_KEYS)),
        dropout_p=float(res.get("finetune", "dropout_p", 0.3, FINETUNE_KEYS)),
        batch_size=int(res.get("finetune", "batch_size", 32, FINETUNE_KEYS)),
        weight_decay=float(res.get("finetune", "weight_decay", 0.01, FINETUNE_KEYS)),
        seed=seed)


def _load_base(args, table, needed: bool):
    path = getattr(args, "checkpoint", None)
    if path is None:
        if needed:
            raise ConfigError("--checkpoint is required for this mode")
        return None
    return load_checkpoint(path, table.content_hash)


def cmd_finetune(args, config) -> int:
    res = Resolver(args, config)
    seed = _resolve_seed(res, "finetune", 0, FINETUNE_KEYS)
    table = _band_table(args)
    ds = _load_dataset(args, table)
    cfg = _finetune_config(res, seed)
    base = _load_base(args, table, cfg.feature_mode in ("ssl_context", "ssl_all"))
    model_cfg = base.config if base is not None else _model_config(res, table.B)
    state, history = finetune(ds, base, cfg, table, model_cfg)
    out = _out_dir(args)
    ckpt = out / "finetuned.spectm"
    save_checkpoint(state, ckpt)
    hist = out / "finetune_history.csv"
    write_finetune_history(history, hist)
    inputs = {"data": args.data}
    if getattr(args, "checkpoint", None):
        inputs["checkpoint"] = args.checkpoint
    _write_manifest(out, "finetune", seed, res, inputs, [ckpt, hist])
    print(f"wrote {ckpt} (mode={cfg.feature_mode}, best epoch "
          f"{state.metadata['head']['best_epoch']})")
    return 0


EVALUATE_KEYS = {"seed", "mode", "cv", "boundary", "lr", "max_epochs",
                 "patience", "dropout_p", "batch_size", "weight_decay"}


def cmd_evaluate(args, config) -> int:
    res = Resolver(args, config)
    seed = _resolve_seed(res, "evaluate", 0, EVALUATE_KEYS)
    table = _band_table(args)
    ds = _load_dataset(args, table)
    mode = str(res.get("evaluate", "mode", "ssl_all", EVALUATE_KEYS))
    cv = str(res.get("evaluate", "cv", "temporal", EVALUATE_KEYS))
    ft_keys = EVALUATE_KEYS
    cfg = FinetuneConfig(
        feature_mode=mode,
        lr=float(res.get("evaluate", "lr", 1e-3, ft_keys)),
        max_epochs=int(res.get("evaluate", "max_epochs", 100, ft_keys)),
        patience=int(res.get("evaluate", "patience", 20, ft_keys)),
        dropout_p=float(res.get("evaluate", "dropout_p", 0.3, ft_keys)),
        batch_size=int(res.get("evaluate", "batch_size", 32, ft_keys)),
        weight_decay=float(res.get("evaluate", "weight_decay", 0.01, ft_keys)),
        seed=seed)
    base = _load_base(args, table, mode in ("ssl_context", "ssl_all"))
    model_cfg = base.config if base is not None else _model_config(res, table.B)
    out = _out_dir(args)
    outputs = []

    if cv == "logo":
        from .core import Dataset

        def runner(train_samples, test_samples):
            sub = Dataset(tuple(train_samples), ds.band_table_hash)
            fitted, _ = finetune(sub, base, cfg, table, model_cfg)
            return predict_mc_log(fitted, test_samples, table)

        per_group, pooled = logo_cv(ds, runner)
        path = out / "cv_folds.csv"
        write_cv_folds_csv(per_group, pooled, path)
        outputs.append(path)
        print(f"logo cv pooled r2={pooled.r2:.4f} over {pooled.n} samples")
    elif cv == "temporal":
        boundary = res.get("evaluate", "boundary", None, EVALUATE_KEYS) or \
            default_boundary(ds)
        train_ds, test_ds = temporal_split(ds, boundary)
        fitted, _ = finetune(train_ds, base, cfg, table, model_cfg)
        test = test_ds.labeled()
        if len(test) < 2:
            raise DataError("test side has fewer than 2 labeled samples")
        pred_log = predict_mc_log(fitted, test, table)
        truth = np.asarray([s.microcystin for s in test])
        rep_log = metrics(pred_log, np.log1p(truth), "log")
        rep_orig = metrics(np.maximum(np.expm1(pred_log), 0.0), truth, "original")
        path = out / "report.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            import csv as _csv
            w = _csv.writer(fh)
            w.writerow(["scale", "r2", "rmse", "pearson_r", "spearman_rho", "n",
                        "boundary"])
            for rep in (rep_log, rep_orig):
                w.writerow([rep.scale, repr(float(rep.r2)), repr(float(rep.rmse)),
                            repr(float(rep.pearson_r)),
                            repr(float(rep.spearman_rho)), rep.n, boundary])
        outputs.append(path)
        print(f"temporal split r2_log={rep_log.r2:.4f} on n={rep_log.n}")
    else:
        raise ConfigError(f"unknown cv scheme {cv!r} (choose logo or temporal)")

    inputs = {"data": args.data}
    if getattr(args, "checkpoint", None):
        inputs["checkpoint"] = args.checkpoint
    _write_manifest(out, "evaluate", seed, res, inputs, outputs)
    return 0


ABLATE_KEYS = {"seed", "seeds", "boundary", "epochs", "batch_size", "lr",
               "warmup"}


def cmd_ablate(args, config) -> int:
    res = Resolver(args, config)
    seed = _resolve_seed(res, "ablate", 0, ABLATE_KEYS)
    table = _band_table(args)
    ds = _load_dataset(args, table)
    n_seeds = int(res.get("ablate", "seeds", 3, ABLATE_KEYS))
    epochs = int(res.get("ablate", "epochs", 60, ABLATE_KEYS))
    pre_cfg = PretrainConfig(
        epochs=epochs,
        batch_size=int(res.get("ablate", "batch_size", 64, ABLATE_KEYS)),
        lr=float(res.get("ablate", "lr", 1e-3, ABLATE_KEYS)),
        warmup=int(res.get("ablate", "warmup", min(5, epochs), ABLATE_KEYS)),
        seed=seed)
    model_cfg = _model_config(res, table.B)
    # head settings come from the [finetune] config section only; ablate's own
    # flags configure pretraining
    ft_res = Resolver(argparse.Namespace(), config)
    ft_cfg = _finetune_config(ft_res, seed)
    res.resolved["finetune"] = ft_res.resolved.get("finetune", {})
    boundary = res.get("ablate", "boundary", None, ABLATE_KEYS)
    result = ablation_suite(ds, [seed + i for i in range(n_seeds)], pre_cfg,
                            model_cfg, ft_cfg, table, boundary,
                            jobs=getattr(args, "jobs", 1) or 1)
    out = _out_dir(args)
    path = out / "ablation.csv"
    write_ablation_csv(result, path)
    _write_manifest(out, "ablate", seed, res, {"data": args.data}, [path])
    s = result["summary"]
    print(f"ssl_context mean r2={s['ssl_context']['r2_mean']:.4f}  "
          f"random_init mean r2={s['random_init']['r2_mean']:.4f}")
    return 0


EFFICIENCY_KEYS = {"seed", "fractions", "boundary"}


def cmd_efficiency(args, config) -> int:
    res = Resolver(args, config)
    seed = _resolve_seed(res, "efficiency", 0, EFFICIENCY_KEYS)
    table = _band_table(args)
    ds = _load_dataset(args, table)
    base = _load_base(args, table, True)
    raw = res.get("efficiency", "fractions", None, EFFICIENCY_KEYS)
    if raw is None:
        fractions = DEFAULT_FRACTIONS
    elif isinstance(raw, str):
        try:
            fractions = tuple(float(v) for v in raw.split(",") if v)
        except ValueError as exc:
            raise ConfigError(f"bad fractions list {raw!r}") from exc
    else:
        fractions = tuple(float(v) for v in raw)
    ft_res = Resolver(argparse.Namespace(), config)
    ft_cfg = _finetune_config(ft_res, seed)
    res.resolved["finetune"] = ft_res.resolved.get("finetune", {})
    boundary = res.get("efficiency", "boundary", None, EFFICIENCY_KEYS)
    curve = label_efficiency(ds, base, ft_cfg, fractions, table, boundary,
                             seed=seed, jobs=getattr(args, "jobs", 1) or 1)
    out = _out_dir(args)
    path = out / "efficiency.csv"
    write_efficiency_csv(curve, path)
    _write_manifest(out, "efficiency", seed, res,
                    {"data": args.data, "checkpoint": args.checkpoint}, [path])
    print(f"wrote {path} ({len(curve.rows)} rows)")
    return 0


RECONSTRUCT_KEYS = {"seed", "mask"}


def cmd_reconstruct(args, config) -> int:
    res = Resolver(args, config)
    seed = _resolve_seed(res, "reconstruct", 0, RECONSTRUCT_KEYS)
    table = _band_table(args)
    ds = _load_dataset(args, table)
    base = _load_base(args, table, True)
    mask_mode = str(res.get("reconstruct", "mask", "targeted", RECONSTRUCT_KEYS))
    rows = reconstruction_benchmark(base, ds, mask_mode, table, seed)
    out = _out_dir(args)
    path = out / "reconstruction.csv"
    write_reconstruction_csv(rows, path)
    _write_manifest(out, "reconstruct", seed, res,
                    {"data": args.data, "checkpoint": args.checkpoint}, [path])
    for r in rows:
        print(f"{r['method']}: r={r['pearson_r']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, data: bool = True,
                checkpoint: bool = False) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--out", help="output directory (created if missing)")
    p.add_argument("--seed", type=int, help="run seed (SPECTM_SEED env as fallback)")
    p.add_argument("--band-table", dest="band_table",
                   help="band table CSV (default: shipped table)")
    if data:
        p.add_argument("--data", help="dataset CSV")
    if checkpoint:
        p.add_argument("--checkpoint", help="model checkpoint")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--encoder-layers", dest="encoder_layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--d-model", dest="d_model", type=int)
    g.add_argument("--d-ff", dest="d_ff", type=int)
    g.add_argument("--decoder-layers", dest="decoder_layers", type=int)
    g.add_argument("--model-dropout", dest="model_dropout", type=float)


def _add_finetune_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("fine-tuning")
    g.add_argument("--mode", choices=["ssl_context", "ssl_all", "aux_only",
                                      "random_init"])
    g.add_argument("--lr", type=float)
    g.add_argument("--max-epochs", dest="max_epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--dropout-p", dest="dropout_p", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectm",
        description="Targeted-masking SSL for hyperspectral spectra: synthetic "
                    "scenes, pretraining, fine-tuning, and evaluation harnesses.")
    parser.add_argument("--version", action="version", version=f"spectm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a synthetic scene")
    _add_common(p, data=False)
    p.add_argument("--locations", type=int)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _add_common(p)
    p.add_argument("--mask", choices=["targeted", "random"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    _add_model_flags(p)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the downstream head")
    _add_common(p, checkpoint=True)
    _add_finetune_flags(p)
    _add_model_flags(p)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("evaluate", help="logo or temporal-split evaluation")
    _add_common(p, checkpoint=True)
    p.add_argument("--cv", choices=["logo", "temporal"])
    p.add_argument("--boundary", help="temporal split boundary date (ISO)")
    p.add_argument("--jobs", type=int, default=1)
    _add_finetune_flags(p)
    _add_model_flags(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation suite")
    _add_common(p)
    p.add_argument("--seeds", type=int, help="number of seeds (>= 3)")
    p.add_argument("--boundary")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--jobs", type=int, default=1)
    _add_model_flags(p)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("efficiency", help="label-efficiency curve")
    _add_common(p, checkpoint=True)
    p.add_argument("--fractions", help="comma-separated fractions in (0, 1]")
    p.add_argument("--boundary")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(handler=cmd_efficiency)

    p = sub.add_parser("reconstruct", help="masked-band reconstruction benchmark")
    _add_common(p, checkpoint=True)
    p.add_argument("--mask", choices=["targeted", "random"])
    p.set_defaults(handler=cmd_reconstruct)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config_file(getattr(args, "config", None))
        return args.handler(args, config)
    except SpecTMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
