"""Synthetic bio-optical scene generator.

Produces per-pixel time series with physically motivated structure: AR(1)
constituent dynamics under a seasonal bloom envelope, a forward reflectance
model with pigment absorption troughs and a red-edge peak, meteorology with
composite-step lag structure, 8-day-ahead partner links, and a power-law
microcystin label. Everything is a pure function of (config, band table).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import MET_DIM, BandTable, Dataset, Sample, default_band_table
from .errors import ConfigError

MET_BASE_NAMES = ("tmax", "tmin", "precip", "wind", "srad",
                  "rh_min", "rh_max", "vpd", "eto", "bi")
MET_LAG_STEPS = (0, 1, 2, 4)
MET_DERIVED_VARS = ("tmax", "precip", "wind")

START_DATE = np.datetime64("2024-04-01")
STEP_DAYS = 8

MC_FLOOR = 0.10
MC_CEILING = 10.70


@dataclass(frozen=True)
class ConstituentState:
    """Instantaneous water-column drivers of the reflectance signal."""

    chl: float
    pc: float
    cdom: float = 0.0
    turbidity: float = 0.0

    def __post_init__(self):
        for name in ("chl", "pc", "cdom", "turbidity"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"constituent {name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class ConstituentDynamics:
    phi: float
    scale: float

    def __post_init__(self):
        if not 0.0 <= self.phi < 1.0:
            raise ConfigError(f"AR(1) persistence must be in [0, 1), got {self.phi}")
        if not self.scale >= 0.0:
            raise ConfigError(f"innovation scale must be >= 0, got {self.scale}")


@dataclass(frozen=True)
class SceneDynamics:
    chl: ConstituentDynamics = ConstituentDynamics(0.85, 0.25)
    pc: ConstituentDynamics = ConstituentDynamics(0.80, 0.30)
    cdom: ConstituentDynamics = ConstituentDynamics(0.90, 0.05)
    turbidity: ConstituentDynamics = ConstituentDynamics(0.70, 0.20)


@dataclass(frozen=True)
class ToxinParams:
    a: float = 1.2
    gamma: float = 1.4
    eps_sd: float = 0.25

    def __post_init__(self):
        if not self.a > 0:
            raise ConfigError(f"toxin scale a must be > 0, got {self.a}")
        if not self.gamma > 0:
            raise ConfigError(f"toxin exponent gamma must be > 0, got {self.gamma}")
        if not self.eps_sd >= 0:
            raise ConfigError(f"toxin noise sd must be >= 0, got {self.eps_sd}")


@dataclass(frozen=True)
class SceneConfig:
    n_locations: int = 8
    n_timesteps: int = 40
    rng_seed: int = 42
    noise_sd: float = 5e-4
    dynamics: SceneDynamics = field(default_factory=SceneDynamics)
    toxin: ToxinParams = field(default_factory=ToxinParams)

    def __post_init__(self):
        if self.n_locations < 1:
            raise ConfigError("n_locations must be >= 1")
        if self.n_timesteps < 1:
            raise ConfigError("n_timesteps must be >= 1")
        if not self.noise_sd >= 0:
            raise ConfigError("noise_sd must be >= 0")


# ---------------------------------------------------------------------------
# Forward model
# ---------------------------------------------------------------------------

def baseline_spectrum(table: BandTable) -> np.ndarray:
    """Constituent-free water reflectance: low, smooth, green-peaked."""
    lam = table.wavelengths
    return (0.032
            + 0.054 * np.exp(-((lam - 560.0) / 72.0) ** 2)
            + 0.006 * np.exp(-((lam - 810.0) / 120.0) ** 2))


def _gauss(lam: np.ndarray, center: float, sigma: float) -> np.ndarray:
    return np.exp(-((lam - center) / sigma) ** 2)


def reflectance_forward(state: ConstituentState, table: BandTable,
                        rng: np.random.Generator | None = None,
                        noise_sd: float = 0.0) -> np.ndarray:
    """Reflectance spectrum for one constituent state.

    Absorption troughs sit at 620 nm (phycocyanin) and 443/665 nm
    (chlorophyll); the red-edge peak at 709 nm grows with total biomass.
    Trough tails reach the bands just outside the diagnostic ranges, so the
    constituent signal is recoverable from unmasked neighbors.
    """
    lam = table.wavelengths
    r = baseline_spectrum(table).copy()
    r -= 0.0112 * state.pc * _gauss(lam, 620.0, 10.0)
    r -= 0.0074 * state.chl * _gauss(lam, 665.0, 12.0)
    r -= 0.0062 * state.chl * _gauss(lam, 443.0, 15.0)
    r += 0.0074 * (state.chl + state.pc) * _gauss(lam, 709.0, 8.0)
    r -= 0.0056 * state.cdom * np.exp(-0.01 * (lam - 400.0))
    r += 0.0043 * state.turbidity
    if noise_sd > 0:
        if rng is None:
            raise ConfigError("noise_sd > 0 requires an rng")
        r = r + rng.normal(0.0, noise_sd, size=lam.shape[0])
    return np.clip(r, 0.0, None)


def microcystin_from_state(state: ConstituentState, params: ToxinParams,
                           rng: np.random.Generator | None = None) -> float:
    """Power law in phycocyanin with lognormal noise, clipped to the
    reporting range [0.10, 10.70] ug/L."""
    eps = 0.0
    if params.eps_sd > 0:
        if rng is None:
            raise ConfigError("eps_sd > 0 requires an rng")
        eps = float(rng.normal(0.0, params.eps_sd))
    mc = params.a * state.pc ** params.gamma * math.exp(eps)
    return float(min(max(mc, MC_FLOOR), MC_CEILING))


# ---------------------------------------------------------------------------
# Meteorology
# ---------------------------------------------------------------------------

def _met_base_series(T: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """10 base driver series at composite resolution, one location."""
    doy = (91 + STEP_DAYS * np.arange(T)) % 365  # series starts April 1
    season = np.cos(2.0 * np.pi * (doy - 196) / 365.0)  # peaks mid July

    def ar(phi=0.7, sd=0.5):
        z = np.empty(T)
        z[0] = rng.normal(0.0, sd / math.sqrt(max(1.0 - phi * phi, 1e-9)))
        for t in range(1, T):
            z[t] = phi * z[t - 1] + rng.normal(0.0, sd)
        return z

    tmax_ar, srad_ar, precip_ar = ar(), ar(), ar(0.3, 0.8)
    series = {
        "tmax": 15.0 + 12.0 * season + 2.0 * tmax_ar,
        "tmin": 5.0 + 10.0 * season + 2.0 * ar(),
        "precip": np.maximum(0.0, 2.0 + 3.0 * precip_ar),
        "wind": 4.0 + 1.5 * ar(0.5, 0.7),
        "srad": 220.0 + 90.0 * season + 20.0 * srad_ar,
        "rh_min": 35.0 - 8.0 * season + 4.0 * ar(),
        "rh_max": 85.0 - 5.0 * season + 3.0 * ar(),
        "vpd": 1.2 + 0.8 * season + 0.2 * ar(),
        "eto": 4.0 + 2.5 * season + 0.5 * ar(),
        "bi": 20.0 + 15.0 * season + 5.0 * ar(0.6, 0.8),
    }
    # anomaly channels that feed the constituent dynamics
    series["_growth_anom"] = np.tanh(0.4 * (tmax_ar + srad_ar))
    series["_precip_anom"] = np.maximum(0.0, precip_ar)
    return series


def _met_features(series: dict[str, np.ndarray], t: int) -> np.ndarray:
    """52 raw features for timestep t: 10 vars x 4 composite lags + 12 derived."""
    out = np.empty(MET_DIM)
    k = 0
    for name in MET_BASE_NAMES:
        s = series[name]
        for lag in MET_LAG_STEPS:
            out[k] = s[max(t - lag, 0)]
            k += 1
    for name in MET_DERIVED_VARS:
        s = series[name]
        out[k] = s[max(t - 6, 0):t + 1].mean()       # 7-step rolling mean
        out[k + 1] = s[max(t - 13, 0):t + 1].mean()  # 14-step rolling mean
        out[k + 2] = s[t] - s[max(t - 7, 0)]
        out[k + 3] = s[t] - s[max(t - 14, 0)]
        k += 4
    return out


# ---------------------------------------------------------------------------
# Scene simulation
# ---------------------------------------------------------------------------

def _bloom_envelope(T: int) -> np.ndarray:
    if T == 1:
        return np.ones(1)
    t = np.arange(T)
    return 0.15 + 0.85 * 0.5 * (1.0 - np.cos(2.0 * np.pi * t / (T - 1)))


def simulate_scene(config: SceneConfig, table: BandTable | None = None) -> Dataset:
    """Simulate every location independently and assemble in location-major,
    time-major order. Each location draws from its own rng stream keyed by
    (seed, location), so the per-location series do not depend on how many
    locations the scene has."""
    table = table or default_band_table()
    T = config.n_timesteps
    env = _bloom_envelope(T)
    dyn, tox = config.dynamics, config.toxin

    raw_met = np.empty((config.n_locations * T, MET_DIM))
    records = []  # (loc, t, state, spectrum, mc)
    for loc in range(config.n_locations):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((config.rng_seed, loc))))
        affinity = float(rng.uniform(0.6, 1.4))  # location-level bloom propensity
        series = _met_base_series(T, rng)
        growth_anom, precip_anom = series["_growth_anom"], series["_precip_anom"]

        chl = pc = cdom = turb = 0.0
        for t in range(T):
            growth = env[t] * (1.0 + 0.25 * growth_anom[t])
            chl = dyn.chl.phi * chl + dyn.chl.scale * growth * abs(rng.normal())
            pc = dyn.pc.phi * pc + dyn.pc.scale * affinity * growth * abs(rng.normal())
            cdom = dyn.cdom.phi * cdom + dyn.cdom.scale * abs(rng.normal())
            turb = (dyn.turbidity.phi * turb
                    + dyn.turbidity.scale * (0.7 * abs(rng.normal()) + 0.3 * precip_anom[t]))
            state = ConstituentState(chl=chl, pc=pc, cdom=cdom, turbidity=turb)
            spectrum = reflectance_forward(state, table, rng, config.noise_sd)
            mc = microcystin_from_state(state, tox, rng if tox.eps_sd > 0 else None)
            raw_met[loc * T + t] = _met_features(series, t)
            records.append((loc, t, spectrum, mc))

    mu = raw_met.mean(axis=0)
    sd = raw_met.std(axis=0)
    sd[sd < 1e-12] = 1.0
    met_std = (raw_met - mu) / sd

    spectra = {(loc, t): spec for loc, t, spec, _ in records}
    samples = []
    for i, (loc, t, spectrum, mc) in enumerate(records):
        date = str(START_DATE + STEP_DAYS * t)
        next_key = (loc, t + 1)
        next_id = f"L{loc:02d}T{t + 1:03d}" if next_key in spectra else None
        samples.append(Sample(
            id=f"L{loc:02d}T{t:03d}",
            date=date,
            composite_group=t,
            location_id=f"loc_{loc:02d}",
            spectrum=spectrum,
            meteorology=met_std[i],
            microcystin=mc,
            next_id=next_id,
            next_spectrum=spectra.get(next_key),
        ))
    return Dataset(tuple(samples), band_table_hash=table.content_hash)
