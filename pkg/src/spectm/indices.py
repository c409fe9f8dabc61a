"""Bio-optical index registry and evaluation.

Six red/NIR cyanobacteria diagnostics are built in. Each index references
wavelengths in nm and is resolved against the active band table at evaluation
time (nearest band within 5 nm). These values serve two roles: regression
targets during self-supervised pretraining (always computed from the unmasked
spectrum) and auxiliary input features downstream.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .core import BandTable
from .errors import DataError
from .validation import as_float_vector

FORMS = ("band_ratio", "normalized_difference", "line_height")
RESOLVE_TOLERANCE_NM = 5.0
DENOM_GUARD = 1e-9


@dataclass(frozen=True)
class IndexDefinition:
    name: str
    form: str
    wavelengths: tuple[float, ...]

    def __post_init__(self):
        if self.form not in FORMS:
            raise DataError(f"unknown index form {self.form!r}")
        waves = tuple(float(w) for w in self.wavelengths)
        need = 3 if self.form == "line_height" else 2
        if len(waves) != need:
            raise DataError(f"{self.name}: form {self.form} takes {need} wavelengths")
        if self.form == "line_height" and not (waves[0] < waves[1] < waves[2]):
            raise DataError(f"{self.name}: line_height requires lambda_a < lambda_b < lambda_c")
        object.__setattr__(self, "wavelengths", waves)


def _resolve(table: BandTable, lam: float, name: str) -> int:
    band, dist = table.nearest_band(lam)
    if dist > RESOLVE_TOLERANCE_NM:
        raise DataError(f"{name}: no band within {RESOLVE_TOLERANCE_NM} nm of {lam} nm "
                        f"(nearest is {table.wavelength_of(band)} nm)")
    return band


def _evaluate(defn: IndexDefinition, x: np.ndarray, table: BandTable) -> tuple[float, bool]:
    """Returns (value, guarded) where guarded marks a zeroed near-singular denominator."""
    bands = [_resolve(table, lam, defn.name) for lam in defn.wavelengths]
    r = [float(x[b - 1]) for b in bands]
    if defn.form == "band_ratio":
        if abs(r[1]) < DENOM_GUARD:
            return 0.0, True
        return r[0] / r[1], False
    if defn.form == "normalized_difference":
        denom = r[0] + r[1]
        if abs(denom) < DENOM_GUARD:
            return 0.0, True
        return (r[0] - r[1]) / denom, False
    # line_height: peak minus the chord between the shoulders. The chord uses
    # the wavelengths of the resolved bands, not the nominal ones, so an
    # affine-in-wavelength spectrum scores exactly zero.
    la, lb, lc = (table.wavelength_of(b) for b in bands)
    if abs(lc - la) < DENOM_GUARD:
        return 0.0, True
    baseline = r[0] + (r[2] - r[0]) * (lb - la) / (lc - la)
    return r[1] - baseline, False


def evaluate_index(defn: IndexDefinition, x, table: BandTable) -> float:
    spec = as_float_vector(x, "spectrum", table.B)
    value, _ = _evaluate(defn, spec, table)
    return value


def default_index_set() -> list[IndexDefinition]:
    return [
        IndexDefinition("ndci", "normalized_difference", (709.0, 665.0)),
        IndexDefinition("pc_ratio", "band_ratio", (709.0, 620.0)),
        IndexDefinition("chl_red_ratio", "band_ratio", (709.0, 665.0)),
        IndexDefinition("mci", "line_height", (681.0, 709.0, 754.0)),
        IndexDefinition("ci_shape", "line_height", (620.0, 665.0, 681.0)),
        IndexDefinition("red_edge_height", "line_height", (665.0, 709.0, 754.0)),
    ]


def index_vector(x, table: BandTable, index_set: list[IndexDefinition] | None = None,
                 with_flags: bool = False):
    """Evaluate every index in fixed order on the (unmasked) spectrum."""
    defs = default_index_set() if index_set is None else list(index_set)
    spec = as_float_vector(x, "spectrum", table.B)
    values = np.empty(len(defs), dtype=np.float64)
    flags = np.zeros(len(defs), dtype=bool)
    for i, defn in enumerate(defs):
        values[i], flags[i] = _evaluate(defn, spec, table)
    if with_flags:
        return values, flags
    return values


def load_index_set(path) -> list[IndexDefinition]:
    """Read a `name,form,lambda_a,lambda_b,lambda_c` CSV (lambda_c blank for
    two-wavelength forms). Sets of any size parse, but sizes other than 6
    force a physics-head resize, so warn."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read index file {path}: {exc}") from exc
    defs = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["name", "form", "lambda_a", "lambda_b", "lambda_c"]:
            raise DataError(f"{path}: expected header 'name,form,lambda_a,lambda_b,lambda_c'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields")
            name, form = row[0], row[1]
            try:
                waves = [float(v) for v in row[2:] if v != ""]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad wavelength: {exc}") from exc
            defs.append(IndexDefinition(name, form, tuple(waves)))
    if not defs:
        raise DataError(f"{path}: no index definitions")
    names = [d.name for d in defs]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate index names")
    if len(defs) != 6:
        warnings.warn(f"index set has {len(defs)} entries, not 6; the physics head "
                      "will be resized and existing checkpoints become incompatible",
                      stacklevel=2)
    return defs
