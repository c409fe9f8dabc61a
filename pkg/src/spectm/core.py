"""Domain types: band tables, diagnostic band sets, tokenization layouts,
samples/datasets, and the CSV file formats that carry them.

Band indices are 1-based everywhere in the public API, matching the file
formats; helpers convert to 0-based array positions at numpy boundaries.
All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import hashlib
import io
import warnings
from dataclasses import dataclass, field
from datetime import date as _isodate
from functools import lru_cache
from importlib import resources as _pkg_resources

import numpy as np

from .errors import DataError
from .validation import as_float_vector, frozen

MET_DIM = 52
N_SEGMENTS = 12

DEFAULT_DIAGNOSTIC_RANGES = ((615.0, 640.0), (660.0, 680.0), (695.0, 720.0))


# ---------------------------------------------------------------------------
# Band table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BandTable:
    """Ordered wavelength grid; band b (1..B) has center wavelength_nm[b-1]."""

    wavelengths: np.ndarray

    def __post_init__(self):
        arr = as_float_vector(self.wavelengths, "wavelengths")
        if arr.shape[0] < 2:
            raise DataError("band table must define at least 2 bands")
        if np.any(arr <= 0):
            raise DataError("wavelengths must be positive")
        if np.any(np.diff(arr) <= 0):
            raise DataError("wavelengths must be strictly increasing with band index")
        object.__setattr__(self, "wavelengths", frozen(arr))

    @property
    def B(self) -> int:
        return int(self.wavelengths.shape[0])

    @property
    def content_hash(self) -> str:
        text = "\n".join(f"{i},{float(w)!r}"
                         for i, w in enumerate(self.wavelengths, start=1))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def wavelength_of(self, band: int) -> float:
        if not 1 <= band <= self.B:
            raise DataError(f"band index {band} outside 1..{self.B}")
        return float(self.wavelengths[band - 1])

    def nearest_band(self, lam: float) -> tuple[int, float]:
        """Band index closest to wavelength `lam` (ties toward the lower index)."""
        dist = np.abs(self.wavelengths - lam)
        pos = int(np.argmin(dist))  # argmin takes the first minimum: lower index
        return pos + 1, float(dist[pos])


def load_band_table(path) -> BandTable:
    """Read a `band_index,wavelength_nm` CSV into a validated BandTable."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return _parse_band_table(fh, str(path))
    except OSError as exc:
        raise DataError(f"cannot read band table {path}: {exc}") from exc


def _parse_band_table(fh, source: str) -> BandTable:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header != ["band_index", "wavelength_nm"]:
        raise DataError(f"{source}: expected header 'band_index,wavelength_nm'")
    waves = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{source}:{lineno}: expected 2 fields, got {len(row)}")
        try:
            idx, wave = int(row[0]), float(row[1])
        except ValueError as exc:
            raise DataError(f"{source}:{lineno}: unparseable row: {exc}") from exc
        if idx != len(waves) + 1:
            raise DataError(f"{source}:{lineno}: band indices must run 1..B, got {idx}")
        waves.append(wave)
    if not waves:
        raise DataError(f"{source}: empty band table")
    if len(waves) == 1:
        raise DataError(f"{source}: band table must define at least 2 bands")
    return BandTable(np.asarray(waves))


@lru_cache(maxsize=1)
def default_band_table() -> BandTable:
    """The shipped 122-band table (345-2260 nm)."""
    text = _pkg_resources.files("spectm.resources").joinpath("pace_oci_bands.csv").read_text()
    table = _parse_band_table(io.StringIO(text), "pace_oci_bands.csv")
    if table.B != 122:
        raise DataError("shipped band table is corrupt")
    return table


# ---------------------------------------------------------------------------
# Diagnostic band sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiagnosticSpec:
    """Closed wavelength intervals whose member bands get masked."""

    ranges: tuple[tuple[float, float], ...] = DEFAULT_DIAGNOSTIC_RANGES

    def __post_init__(self):
        rs = tuple((float(lo), float(hi)) for lo, hi in self.ranges)
        for lo, hi in rs:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise DataError(f"invalid diagnostic range ({lo}, {hi})")
        ordered = sorted(rs)
        for (_, hi_a), (lo_b, _) in zip(ordered, ordered[1:]):
            if lo_b <= hi_a:
                raise DataError("diagnostic ranges must be pairwise disjoint")
        object.__setattr__(self, "ranges", rs)


@dataclass(frozen=True)
class DiagnosticSet:
    """Resolved 1-based band indices of the diagnostic wavelengths."""

    indices: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "indices", frozenset(int(i) for i in self.indices))

    def __len__(self) -> int:
        return len(self.indices)

    def positions(self) -> np.ndarray:
        """Sorted 0-based array positions."""
        return np.asarray(sorted(self.indices), dtype=np.intp) - 1

    def flags(self, B: int) -> np.ndarray:
        out = np.zeros(B, dtype=bool)
        if self.indices:
            out[self.positions()] = True
        return out


def resolve_diagnostic_set(table: BandTable, spec: DiagnosticSpec) -> DiagnosticSet:
    """Bands b with lo <= wavelength_b <= hi for some range (closed intervals)."""
    member = np.zeros(table.B, dtype=bool)
    for lo, hi in spec.ranges:
        member |= (table.wavelengths >= lo) & (table.wavelengths <= hi)
    indices = frozenset(int(i) + 1 for i in np.flatnonzero(member))
    if not indices:
        warnings.warn("diagnostic set is empty for this band table", stacklevel=2)
    return DiagnosticSet(indices)


def default_diagnostic_set(table: BandTable | None = None) -> DiagnosticSet:
    return resolve_diagnostic_set(table or default_band_table(), DiagnosticSpec())


# ---------------------------------------------------------------------------
# Tokenization layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tokenization:
    """12 contiguous inclusive band ranges exactly covering 1..B."""

    segments: tuple[tuple[int, int], ...]

    def __post_init__(self):
        segs = tuple((int(a), int(b)) for a, b in self.segments)
        if len(segs) != N_SEGMENTS:
            raise DataError(f"expected {N_SEGMENTS} segments, got {len(segs)}")
        if segs[0][0] != 1:
            raise DataError("first segment must start at band 1")
        for (a, b) in segs:
            if b < a:
                raise DataError(f"segment ({a}, {b}) is empty")
        for (_, b), (a2, _) in zip(segs, segs[1:]):
            if a2 != b + 1:
                raise DataError("segments must be contiguous and in order")
        object.__setattr__(self, "segments", segs)

    @property
    def B(self) -> int:
        return self.segments[-1][1]

    def widths(self) -> list[int]:
        return [b - a + 1 for a, b in self.segments]

    def slices(self) -> list[slice]:
        """0-based numpy slices, one per segment."""
        return [slice(a - 1, b) for a, b in self.segments]


def load_token_layout(path) -> Tokenization:
    """Read a `segment,start_band,end_band` CSV."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return _parse_token_layout(fh, str(path))
    except OSError as exc:
        raise DataError(f"cannot read token layout {path}: {exc}") from exc


def _parse_token_layout(fh, source: str) -> Tokenization:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header != ["segment", "start_band", "end_band"]:
        raise DataError(f"{source}: expected header 'segment,start_band,end_band'")
    segs = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            seg, a, b = (int(v) for v in row)
        except ValueError as exc:
            raise DataError(f"{source}:{lineno}: unparseable row: {exc}") from exc
        if seg != len(segs) + 1:
            raise DataError(f"{source}:{lineno}: segment numbers must run 1..12")
        segs.append((a, b))
    return Tokenization(tuple(segs))


def default_tokenization(table: BandTable) -> Tokenization:
    """Shipped layout for the default table; near-equal splits otherwise.

    The fallback gives each segment B // 12 bands and hands the remainder,
    one band each, to the earliest segments.
    """
    if table.B < N_SEGMENTS:
        raise DataError(f"cannot tokenize {table.B} bands into {N_SEGMENTS} segments")
    if table.content_hash == default_band_table().content_hash:
        text = _pkg_resources.files("spectm.resources").joinpath("token_layout.csv").read_text()
        return _parse_token_layout(io.StringIO(text), "token_layout.csv")
    base, rem = divmod(table.B, N_SEGMENTS)
    segs, start = [], 1
    for s in range(N_SEGMENTS):
        width = base + (1 if s < rem else 0)
        segs.append((start, start + width - 1))
        start += width
    return Tokenization(tuple(segs))


# ---------------------------------------------------------------------------
# Samples and datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    """One pixel observation: spectrum, meteorology, optional t+8 partner and label."""

    id: str
    date: str
    composite_group: int
    location_id: str
    spectrum: np.ndarray
    meteorology: np.ndarray
    microcystin: float | None = None
    next_id: str | None = None
    next_spectrum: np.ndarray | None = None

    def __post_init__(self):
        try:
            _isodate.fromisoformat(self.date)
        except ValueError as exc:
            raise DataError(f"sample {self.id}: bad ISO date {self.date!r}") from exc
        object.__setattr__(self, "spectrum", frozen(as_float_vector(self.spectrum, f"sample {self.id} spectrum")))
        object.__setattr__(self, "meteorology",
                           frozen(as_float_vector(self.meteorology, f"sample {self.id} meteorology", MET_DIM)))
        if self.next_spectrum is not None:
            object.__setattr__(self, "next_spectrum",
                               frozen(as_float_vector(self.next_spectrum, f"sample {self.id} next_spectrum")))
        if self.microcystin is not None:
            mc = float(self.microcystin)
            if not np.isfinite(mc) or mc < 0:
                raise DataError(f"sample {self.id}: microcystin must be finite and >= 0")
            object.__setattr__(self, "microcystin", mc)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    band_table_hash: str

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    def labeled(self) -> list[Sample]:
        return [s for s in self.samples if s.microcystin is not None]

    def groups(self) -> list[int]:
        return sorted({s.composite_group for s in self.samples})

    def content_digest(self) -> str:
        """Order-sensitive digest over every stored field; used by determinism checks."""
        h = hashlib.sha256()
        for s in self.samples:
            h.update(f"{s.id},{s.date},{s.composite_group},{s.location_id},{s.microcystin!r},{s.next_id}".encode())
            h.update(s.spectrum.tobytes())
            h.update(s.meteorology.tobytes())
            if s.next_spectrum is not None:
                h.update(s.next_spectrum.tobytes())
        h.update(self.band_table_hash.encode())
        return h.hexdigest()


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.issues


def validate_dataset(ds: Dataset, table: BandTable) -> ValidationReport:
    """Report (not raise) structural violations; valid iff the report is empty."""
    issues: list[str] = []
    seen: set[str] = set()
    by_id = {}
    for s in ds.samples:
        if s.id in seen:
            issues.append(f"duplicate sample id {s.id!r}")
        seen.add(s.id)
        by_id[s.id] = s
    if ds.band_table_hash != table.content_hash:
        issues.append("dataset band_table_hash does not match the provided table")
    for s in ds.samples:
        if s.spectrum.shape[0] != table.B:
            issues.append(f"sample {s.id}: spectrum length {s.spectrum.shape[0]} != B={table.B}")
        if not np.all(np.isfinite(s.spectrum)):
            issues.append(f"sample {s.id}: non-finite reflectance")
        if s.meteorology.shape[0] != MET_DIM:
            issues.append(f"sample {s.id}: meteorology length {s.meteorology.shape[0]} != {MET_DIM}")
        if not np.all(np.isfinite(s.meteorology)):
            issues.append(f"sample {s.id}: non-finite meteorology")
        if s.next_id is not None:
            partner = by_id.get(s.next_id)
            if partner is None:
                issues.append(f"sample {s.id}: dangling next_id {s.next_id!r}")
            elif s.next_spectrum is None:
                issues.append(f"sample {s.id}: next_id set but next_spectrum missing")
        if s.next_spectrum is not None and s.next_spectrum.shape[0] != table.B:
            issues.append(f"sample {s.id}: next_spectrum length != B={table.B}")
        if s.microcystin is not None and s.microcystin < 0:
            issues.append(f"sample {s.id}: negative microcystin")
    return ValidationReport(tuple(issues))


# ---------------------------------------------------------------------------
# Dataset file format
# ---------------------------------------------------------------------------

def _refl_columns(B: int) -> list[str]:
    width = max(3, len(str(B)))
    return [f"r_{i:0{width}d}" for i in range(1, B + 1)]


def _met_columns() -> list[str]:
    return [f"met_{i:02d}" for i in range(1, MET_DIM + 1)]


def save_dataset_csv(ds: Dataset, path, table: BandTable) -> None:
    """Write the dataset CSV; floats use repr so the round trip is bit-exact."""
    header = ["id", "date", "composite_group", "location_id"]
    header += _refl_columns(table.B) + _met_columns() + ["mc", "next_id"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in ds.samples:
            row = [s.id, s.date, str(s.composite_group), s.location_id]
            row += [repr(v) for v in s.spectrum.tolist()]
            row += [repr(v) for v in s.meteorology.tolist()]
            row.append("" if s.microcystin is None else repr(s.microcystin))
            row.append("" if s.next_id is None else s.next_id)
            writer.writerow(row)


def load_dataset_csv(path, table: BandTable) -> Dataset:
    """Read a dataset CSV, resolving t+8 links into next_spectrum arrays."""
    expected = ["id", "date", "composite_group", "location_id"]
    expected += _refl_columns(table.B) + _met_columns() + ["mc", "next_id"]
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DataError(f"{path}: dataset header does not match the schema for B={table.B}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            rows.append(row)
    B = table.B
    records = []
    for row in rows:
        sid, date, group, loc = row[0], row[1], row[2], row[3]
        try:
            spectrum = np.asarray([float(v) for v in row[4:4 + B]])
            met = np.asarray([float(v) for v in row[4 + B:4 + B + MET_DIM]])
            mc = None if row[4 + B + MET_DIM] == "" else float(row[4 + B + MET_DIM])
            group = int(group)
        except ValueError as exc:
            raise DataError(f"{path}: sample {sid!r}: {exc}") from exc
        next_id = row[4 + B + MET_DIM + 1] or None
        records.append((sid, date, group, loc, spectrum, met, mc, next_id))
    spectra = {sid: spec for sid, _, _, _, spec, _, _, _ in records}
    samples = []
    for sid, date, group, loc, spectrum, met, mc, next_id in records:
        next_spec = spectra.get(next_id) if next_id is not None else None
        samples.append(Sample(id=sid, date=date, composite_group=group, location_id=loc,
                              spectrum=spectrum, meteorology=met, microcystin=mc,
                              next_id=next_id, next_spectrum=next_spec))
    return Dataset(tuple(samples), band_table_hash=table.content_hash)
