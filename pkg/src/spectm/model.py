"""Network definition: spectral tokenizer, pre-norm transformer encoder with
CLS and meteorology tokens, 2-block reconstruction decoder with per-segment
de-projections, physics head, temporal head, optional downstream regression
head, and the binary checkpoint format.

All forward ops build a fresh autodiff tape; a ModelState is immutable during
inference and may be shared across threads, but a training step needs
exclusive ownership (it mutates parameter data and gradients).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import Tokenization
from .errors import ConfigError, DataError, NumericError
from .numerics import (Parameter, Tensor, add, concat, dropout, gelu,
                       layer_norm, matmul, reshape, slice_, softmax, transpose)

CHECKPOINT_MAGIC = b"SPECTM01"

SEQ_EXTRA = 2  # CLS + meteorology tokens ahead of the spectral tokens


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 6
    heads: int = 8
    d_model: int = 256
    d_ff: int = 1024
    decoder_layers: int = 2
    dropout_p: float = 0.1
    n_spectral_tokens: int = 12
    n_indices: int = 6
    met_dim: int = 52
    band_count: int = 122

    def __post_init__(self):
        for name in ("encoder_layers", "heads", "d_model", "d_ff",
                     "decoder_layers", "n_spectral_tokens", "n_indices",
                     "met_dim", "band_count"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def seq_len(self) -> int:
        return self.n_spectral_tokens + SEQ_EXTRA

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "encoder_layers", "heads", "d_model", "d_ff", "decoder_layers",
            "dropout_p", "n_spectral_tokens", "n_indices", "met_dim", "band_count")}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Parameter manifest
# ---------------------------------------------------------------------------

def _block_entries(prefix: str, d: int, d_ff: int):
    yield f"{prefix}ln1_g", (d,), "ln_gain"
    yield f"{prefix}ln1_b", (d,), "bias"
    for proj in ("q", "k", "v", "o"):
        yield f"{prefix}attn_W{proj}", (d, d), "weight"
        if proj != "k":
            # a key bias shifts every score of a query by the same constant,
            # which softmax cancels; it would be untrainable dead weight
            yield f"{prefix}attn_b{proj}", (d,), "bias"
    yield f"{prefix}ln2_g", (d,), "ln_gain"
    yield f"{prefix}ln2_b", (d,), "bias"
    yield f"{prefix}ff1_W", (d, d_ff), "weight"
    yield f"{prefix}ff1_b", (d_ff,), "bias"
    yield f"{prefix}ff2_W", (d_ff, d), "weight"
    yield f"{prefix}ff2_b", (d,), "bias"


def _pretrain_manifest(cfg: ModelConfig, widths: list[int]):
    """(name, shape, init kind) for every pretraining parameter, in the fixed
    order that checkpoints and initializer draws both follow."""
    d = cfg.d_model
    yield "cls_token", (1, 1, d), "embed"
    yield "met_proj_W", (cfg.met_dim, d), "weight"
    yield "met_proj_b", (d,), "bias"
    for s, w in enumerate(widths, start=1):
        yield f"seg{s:02d}_proj_W", (w + 1, d), "weight"  # +1: mask-fraction channel
        yield f"seg{s:02d}_proj_b", (d,), "bias"
    yield "pos_embed", (1, cfg.seq_len, d), "embed"
    for i in range(cfg.encoder_layers):
        yield from _block_entries(f"enc{i:02d}_", d, cfg.d_ff)
    yield "enc_final_g", (d,), "ln_gain"
    yield "enc_final_b", (d,), "bias"
    for j in range(cfg.decoder_layers):
        yield from _block_entries(f"dec{j:02d}_", d, cfg.d_ff)
    yield "dec_final_g", (d,), "ln_gain"
    yield "dec_final_b", (d,), "bias"
    for s, w in enumerate(widths, start=1):
        yield f"seg{s:02d}_deproj_W", (d, w), "weight"
        yield f"seg{s:02d}_deproj_b", (w,), "bias"
    yield "phys1_W", (d, 128), "weight"
    yield "phys1_b", (128,), "bias"
    yield "phys2_W", (128, cfg.n_indices), "weight"
    yield "phys2_b", (cfg.n_indices,), "bias"
    yield "temp_W", (d, cfg.band_count), "weight"
    yield "temp_b", (cfg.band_count,), "bias"


def _head_manifest(input_dim: int, hidden: tuple[int, int] = (128, 64)):
    h1, h2 = hidden
    yield "head_fc1_W", (input_dim, h1), "weight"
    yield "head_fc1_b", (h1,), "bias"
    yield "head_fc2_W", (h1, h2), "weight"
    yield "head_fc2_b", (h2,), "bias"
    yield "head_fc3_W", (h2, 1), "weight"
    yield "head_fc3_b", (1,), "bias"


def _even_widths(B: int, n: int) -> list[int]:
    base, rem = divmod(B, n)
    return [base + (1 if i < rem else 0) for i in range(n)]


def param_count(cfg: ModelConfig) -> int:
    """Exact trainable-parameter total of the pretraining model. The total is
    independent of how bands are split into segments (only their sum enters)."""
    widths = _even_widths(cfg.band_count, cfg.n_spectral_tokens)
    return sum(int(np.prod(shape)) for _, shape, _ in _pretrain_manifest(cfg, widths))


# ---------------------------------------------------------------------------
# Model state
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    config: ModelConfig
    tokenization: Tokenization
    band_table_hash: str
    params: dict[str, Parameter]
    metadata: dict = field(default_factory=dict)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def pretrain_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if not n.startswith("head_")]

    def head_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith("head_")]

    def encoder_digest(self) -> str:
        """Digest over every non-head parameter, in manifest order."""
        h = hashlib.sha256()
        for name, p in self.params.items():
            if name.startswith("head_"):
                continue
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


_OUTPUT_WEIGHT_MARKERS = ("deproj", "phys2", "temp_w", "head_fc3")


def _init_param(name: str, shape: tuple[int, ...], kind: str,
                rng: np.random.Generator) -> Parameter:
    if kind == "weight":
        # trunk weights fan-in scaled (laid out (in, out) for x @ W); output
        # layers start small so initial predictions sit near zero
        if len(shape) == 2 and not any(m in name for m in _OUTPUT_WEIGHT_MARKERS):
            sd = 1.0 / np.sqrt(shape[0])
        else:
            sd = 0.02
        data = rng.normal(0.0, sd, size=shape)
    elif kind == "embed":
        data = rng.normal(0.0, 0.02, size=shape)
    elif kind == "ln_gain":
        data = np.ones(shape)
    else:
        data = np.zeros(shape)
    return Parameter(data, name)


def init_model(cfg: ModelConfig, tokenization: Tokenization, band_table_hash: str,
               seed: int) -> ModelState:
    if tokenization.B != cfg.band_count:
        raise ConfigError(f"tokenization covers {tokenization.B} bands, "
                          f"config says {cfg.band_count}")
    if len(tokenization.segments) != cfg.n_spectral_tokens:
        raise ConfigError("tokenization segment count != n_spectral_tokens")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), 0x1717))))
    params = {name: _init_param(name, shape, kind, rng)
              for name, shape, kind in _pretrain_manifest(cfg, tokenization.widths())}
    meta = {"seed": int(seed), "epochs_seen": 0, "mask_mode": None}
    return ModelState(cfg, tokenization, band_table_hash, params, meta)


def add_downstream_head(state: ModelState, input_dim: int, seed: int,
                        hidden: tuple[int, int] = (128, 64)) -> None:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), 0xD04E))))
    for name, shape, kind in _head_manifest(input_dim, hidden):
        state.params[name] = _init_param(name, shape, kind, rng)
    state.metadata["head"] = {"input_dim": int(input_dim), "hidden": list(hidden)}


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _linear(x: Tensor, W: Parameter, b: Parameter) -> Tensor:
    return add(matmul(x, W), b)


def _as_batch(arr, name: str, width: int) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise DataError(f"{name}: expected (n, {width}), got {a.shape}")
    return a


def tokenize(state: ModelState, x_masked, mask_flags, met) -> Tensor:
    """Masked spectra + mask flags + meteorology -> (n, 14, d_model) sequence.

    Each spectral token projects [segment band values ; segment masked
    fraction]; the fraction channel is what lets the encoder tell masked-zero
    from true-zero, band values themselves stay zero-filled.
    """
    cfg = state.config
    x = _as_batch(x_masked, "x_masked", cfg.band_count)
    met = _as_batch(met, "meteorology", cfg.met_dim)
    flags = np.asarray(mask_flags, dtype=bool)
    if flags.ndim == 1:
        flags = np.broadcast_to(flags[None, :], x.shape)
    if flags.shape != x.shape:
        raise DataError(f"mask flags shape {flags.shape} != spectra shape {x.shape}")
    if met.shape[0] != x.shape[0]:
        raise DataError("meteorology batch size != spectra batch size")
    n = x.shape[0]
    p = state.params
    tokens = [add(p["cls_token"], Tensor(np.zeros((n, 1, cfg.d_model)))),
              reshape(_linear(Tensor(met), p["met_proj_W"], p["met_proj_b"]),
                      (n, 1, cfg.d_model))]
    for s, sl in enumerate(state.tokenization.slices(), start=1):
        frac = flags[:, sl].mean(axis=1, keepdims=True)
        seg_in = Tensor(np.concatenate([x[:, sl], frac], axis=1))
        tok = _linear(seg_in, p[f"seg{s:02d}_proj_W"], p[f"seg{s:02d}_proj_b"])
        tokens.append(reshape(tok, (n, 1, cfg.d_model)))
    seq = concat(tokens, axis=1)
    return add(seq, p["pos_embed"])


def _attention(x: Tensor, p: dict, prefix: str, cfg: ModelConfig,
               train_mode: bool, rng) -> Tensor:
    n, S, d = x.shape
    H = cfg.heads
    dh = d // H
    q = _linear(x, p[f"{prefix}attn_Wq"], p[f"{prefix}attn_bq"])
    k = matmul(x, p[f"{prefix}attn_Wk"])
    v = _linear(x, p[f"{prefix}attn_Wv"], p[f"{prefix}attn_bv"])
    q = transpose(reshape(q, (n, S, H, dh)), (0, 2, 1, 3))
    kt = transpose(reshape(k, (n, S, H, dh)), (0, 2, 3, 1))
    v = transpose(reshape(v, (n, S, H, dh)), (0, 2, 1, 3))
    scores = matmul(q, kt) * (1.0 / math.sqrt(dh))
    ctx = matmul(softmax(scores), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (n, S, d))
    out = _linear(ctx, p[f"{prefix}attn_Wo"], p[f"{prefix}attn_bo"])
    return dropout(out, cfg.dropout_p, rng, train_mode)


def _ff(x: Tensor, p: dict, prefix: str, cfg: ModelConfig,
        train_mode: bool, rng) -> Tensor:
    h = gelu(_linear(x, p[f"{prefix}ff1_W"], p[f"{prefix}ff1_b"]))
    out = _linear(h, p[f"{prefix}ff2_W"], p[f"{prefix}ff2_b"])
    return dropout(out, cfg.dropout_p, rng, train_mode)


def _transformer_stack(x: Tensor, state: ModelState, prefixes: list[str],
                       final_g: str, final_b: str, train_mode: bool, rng,
                       stack_name: str) -> Tensor:
    p = state.params
    cfg = state.config
    for i, prefix in enumerate(prefixes):
        normed = layer_norm(x, p[f"{prefix}ln1_g"], p[f"{prefix}ln1_b"])
        x = add(x, _attention(normed, p, prefix, cfg, train_mode, rng))
        normed = layer_norm(x, p[f"{prefix}ln2_g"], p[f"{prefix}ln2_b"])
        x = add(x, _ff(normed, p, prefix, cfg, train_mode, rng))
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activation in {stack_name} block {i}")
    return layer_norm(x, p[final_g], p[final_b])


def encode(state: ModelState, seq: Tensor, train_mode: bool = False,
           rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Run the encoder; returns (all token embeddings, CLS embedding)."""
    prefixes = [f"enc{i:02d}_" for i in range(state.config.encoder_layers)]
    out = _transformer_stack(seq, state, prefixes, "enc_final_g", "enc_final_b",
                             train_mode, rng, "encoder")
    cls = slice_(out, (slice(None), 0))
    return out, cls


def decode_reconstruction(state: ModelState, token_embeddings: Tensor,
                          train_mode: bool = False,
                          rng: np.random.Generator | None = None) -> Tensor:
    """Decode the 12 spectral tokens back to a full length-B spectrum."""
    spectral = slice_(token_embeddings, (slice(None), slice(SEQ_EXTRA, None)))
    prefixes = [f"dec{j:02d}_" for j in range(state.config.decoder_layers)]
    out = _transformer_stack(spectral, state, prefixes, "dec_final_g", "dec_final_b",
                             train_mode, rng, "decoder")
    p = state.params
    pieces = []
    for s in range(1, state.config.n_spectral_tokens + 1):
        tok = slice_(out, (slice(None), s - 1))
        pieces.append(_linear(tok, p[f"seg{s:02d}_deproj_W"], p[f"seg{s:02d}_deproj_b"]))
    return concat(pieces, axis=1)


def predict_indices(state: ModelState, cls_embedding: Tensor) -> Tensor:
    p = state.params
    h = gelu(_linear(cls_embedding, p["phys1_W"], p["phys1_b"]))
    return _linear(h, p["phys2_W"], p["phys2_b"])


def predict_next_spectrum(state: ModelState, cls_embedding: Tensor) -> Tensor:
    return _linear(cls_embedding, state.params["temp_W"], state.params["temp_b"])


HEAD_DROPOUT = 0.3


def predict_microcystin(state: ModelState, cls_embedding: Tensor | None,
                        aux: Tensor | None, train_mode: bool = False,
                        rng: np.random.Generator | None = None,
                        dropout_p: float = HEAD_DROPOUT) -> Tensor:
    """Downstream head on [cls ; aux] (either part optional, not both absent).
    Output is in log1p-microcystin space."""
    if cls_embedding is None and aux is None:
        raise ConfigError("downstream head needs cls features, aux features, or both")
    if "head_fc1_W" not in state.params:
        raise ConfigError("model has no downstream head; call add_downstream_head first")
    parts = [t for t in (cls_embedding, aux) if t is not None]
    x = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    if x.shape[-1] != state.params["head_fc1_W"].shape[0]:
        raise DataError(f"head input dim {x.shape[-1]} != "
                        f"{state.params['head_fc1_W'].shape[0]}")
    p = state.params
    h = gelu(_linear(x, p["head_fc1_W"], p["head_fc1_b"]))
    h = dropout(h, dropout_p, rng, train_mode)
    h = gelu(_linear(h, p["head_fc2_W"], p["head_fc2_b"]))
    h = dropout(h, dropout_p, rng, train_mode)
    return _linear(h, p["head_fc3_W"], p["head_fc3_b"])


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
# magic "SPECTM01" | uint64 LE header length | canonical JSON header |
# float32 LE parameter buffers in manifest order.

def save_checkpoint(state: ModelState, path) -> None:
    manifest = []
    offset = 0
    buffers = []
    for name, p in state.params.items():
        buf = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(p.data.shape),
                         "offset": offset, "size": len(buf)})
        buffers.append(buf)
        offset += len(buf)
    header = {
        "config": state.config.to_dict(),
        "tokenization": [list(seg) for seg in state.tokenization.segments],
        "band_table_hash": state.band_table_hash,
        "metadata": state.metadata,
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(path, expected_band_table_hash: str | None = None) -> ModelState:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise DataError(f"{path}: truncated checkpoint")
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic bytes (wrong file or format version)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header: {exc}") from exc
    for key in ("config", "tokenization", "band_table_hash", "metadata", "manifest"):
        if key not in header:
            raise DataError(f"{path}: header missing {key!r}")
    if expected_band_table_hash is not None and \
            header["band_table_hash"] != expected_band_table_hash:
        raise DataError(f"{path}: checkpoint band_table_hash does not match the "
                        "active band table")
    cfg = ModelConfig.from_dict(header["config"])
    tok = Tokenization(tuple((a, b) for a, b in header["tokenization"]))
    body = raw[16 + hlen:]
    params: dict[str, Parameter] = {}
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        off, size = entry["offset"], entry["size"]
        if off + size > len(body):
            raise DataError(f"{path}: truncated buffer for parameter {name!r}")
        flat = np.frombuffer(body[off:off + size], dtype="<f4")
        if flat.size != int(np.prod(shape)):
            raise DataError(f"{path}: size mismatch for parameter {name!r}")
        params[name] = Parameter(flat.astype(np.float64).reshape(shape), name)
    expected = {n: s for n, s, _ in _pretrain_manifest(cfg, tok.widths())}
    stored = {n: tuple(p.data.shape) for n, p in params.items() if not n.startswith("head_")}
    if stored != expected:
        raise DataError(f"{path}: parameter manifest inconsistent with config")
    return ModelState(cfg, tok, header["band_table_hash"], params, header["metadata"])
