"""Band masking: the targeted diagnostic mask and the random-contiguous baseline.

A mask is a boolean vector over bands; True means the band's reflectance is
hidden from the encoder (replaced by zero before tokenization).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import BandTable, DiagnosticSet, DiagnosticSpec, resolve_diagnostic_set
from .errors import ConfigError, DataError
from .validation import as_bool_vector, as_float_vector, frozen


@dataclass(frozen=True)
class MaskVector:
    flags: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "flags", frozen(as_bool_vector(self.flags, "mask flags")))

    @property
    def B(self) -> int:
        return int(self.flags.shape[0])

    @property
    def masked_count(self) -> int:
        return int(self.flags.sum())

    @property
    def masked_fraction(self) -> float:
        return self.masked_count / self.B


def targeted_mask(table: BandTable, diagnostics: DiagnosticSet | None = None) -> MaskVector:
    """Mask exactly the diagnostic bands: flags[b-1] = (b in D)."""
    if diagnostics is None:
        diagnostics = resolve_diagnostic_set(table, DiagnosticSpec())
    return MaskVector(diagnostics.flags(table.B))


def random_contiguous_mask(table: BandTable, count: int, rng: np.random.Generator,
                           n_runs: int | None = None) -> MaskVector:
    """Mask `count` bands as 1 to 3 contiguous runs at random positions.

    Run count is drawn uniformly from {1, 2, 3} unless pinned via n_runs.
    Run lengths split `count` as evenly as possible (earlier runs take the
    remainder); placements are drawn without overlap by rejection, which is
    cheap at the mask sizes used here. count = 0 gives the all-false mask.
    """
    B = table.B
    count = int(count)
    if not 0 <= count <= B:
        raise ConfigError(f"masked band count must be in 0..{B}, got {count}")
    if count == 0:
        return MaskVector(np.zeros(B, dtype=bool))
    if n_runs is None:
        n_runs = int(rng.integers(1, 4))
    if not 1 <= n_runs <= 3:
        raise ConfigError(f"n_runs must be in 1..3, got {n_runs}")
    n_runs = min(n_runs, count)
    base, rem = divmod(count, n_runs)
    lengths = [base + (1 if i < rem else 0) for i in range(n_runs)]
    for _ in range(10_000):
        flags = np.zeros(B, dtype=bool)
        ok = True
        for length in lengths:
            start = int(rng.integers(0, B - length + 1))
            if flags[start:start + length].any():
                ok = False
                break
            flags[start:start + length] = True
        if ok:
            return MaskVector(flags)
    # Dense masks can make disjoint placement improbable; fall back to one run.
    flags = np.zeros(B, dtype=bool)
    start = int(rng.integers(0, B - count + 1))
    flags[start:start + count] = True
    return MaskVector(flags)


def apply_mask(spectrum: np.ndarray, mask: MaskVector) -> np.ndarray:
    """Zero-fill masked bands. Returns a new array; the input is untouched."""
    spec = as_float_vector(spectrum, "spectrum")
    if spec.shape[0] != mask.B:
        raise DataError(f"spectrum length {spec.shape[0]} != mask length {mask.B}")
    out = spec.copy()
    out[mask.flags] = 0.0
    return out


# ---------------------------------------------------------------------------
# Estimator wrappers
# ---------------------------------------------------------------------------

class _BaseMasker(BaseEstimator, TransformerMixin):
    """Shared sklearn plumbing for the two maskers."""

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DataError("expected a 2d array of spectra")
        self.n_features_in_ = X.shape[1]
        self._check_table(X.shape[1])
        self.is_fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "is_fitted_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise DataError("transform input does not match the fitted band count")
        return np.stack([apply_mask(row, self._mask_for(i)) for i, row in enumerate(X)])


class TargetedMasker(_BaseMasker):
    """Transformer that zero-fills the diagnostic bands of each spectrum."""

    def __init__(self, table: BandTable | None = None, diagnostics: DiagnosticSet | None = None):
        self.table = table
        self.diagnostics = diagnostics

    def _check_table(self, n_cols: int):
        from .core import default_band_table
        table = self.table or default_band_table()
        if table.B != n_cols:
            raise DataError(f"band table has {table.B} bands but data has {n_cols} columns")
        self.mask_ = targeted_mask(table, self.diagnostics)

    def _mask_for(self, i: int) -> MaskVector:
        return self.mask_


class RandomContiguousMasker(_BaseMasker):
    """Transformer that zero-fills `count` bands in 1-3 random contiguous runs.

    A fresh mask is drawn per row from a generator seeded by random_state,
    so transform is deterministic for a fixed fit.
    """

    def __init__(self, table: BandTable | None = None, count: int = 28, random_state: int = 0):
        self.table = table
        self.count = count
        self.random_state = random_state

    def _check_table(self, n_cols: int):
        from .core import default_band_table
        table = self.table or default_band_table()
        if table.B != n_cols:
            raise DataError(f"band table has {table.B} bands but data has {n_cols} columns")
        self._table_resolved = table

    def transform(self, X):
        check_is_fitted(self, "is_fitted_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise DataError("transform input does not match the fitted band count")
        rng = np.random.default_rng(self.random_state)
        out = np.empty_like(X)
        for i, row in enumerate(X):
            out[i] = apply_mask(row, random_contiguous_mask(self._table_resolved, self.count, rng))
        return out

    def _mask_for(self, i: int):  # pragma: no cover - transform is overridden
        raise NotImplementedError
