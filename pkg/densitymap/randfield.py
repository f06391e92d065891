"""
densitymap — Random fields
Stationary isotropic covariances held as binned power spectra, log-normal
field synthesis, parameter estimation from (masked) latent fields and
Poisson sampling.

Σ is diagonal in the Fourier domain: applying Σ^a multiplies every non-DC
mode by (bin power)^a. Spectra are in periodogram units (see core.power_grid),
so a flat spectrum σ² is white noise of variance σ².
"""

import logging
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from densitymap.core import (
    DensityField,
    RadialBinning,
    Raster,
    as_raster,
    power_grid,
    radial_average,
)
from densitymap.exceptions import DimensionError, DomainError, EmptyMaskError

log = logging.getLogger("densitymap.randfield")

SPECTRUM_FLOOR = 1e-12

BIT_GENERATORS = {
    "PCG64": np.random.PCG64,
    "PCG64DXSM": np.random.PCG64DXSM,
    "Philox": np.random.Philox,
}


# ---------------------------------------------------------------------------
# Parameter types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StationaryCovariance:
    """Σ as one positive power value per radial bin."""

    spectrum: np.ndarray
    binning: RadialBinning

    def __post_init__(self):
        spectrum = np.array(self.spectrum, dtype=np.float64, copy=True)
        if spectrum.shape != (self.binning.n_bins,):
            raise DimensionError(
                f"spectrum has shape {spectrum.shape}, binning has {self.binning.n_bins} bins"
            )
        if not np.all(np.isfinite(spectrum)) or np.any(spectrum <= 0):
            raise DomainError("covariance spectrum must be finite and > 0 in every bin")
        spectrum.setflags(write=False)
        object.__setattr__(self, "spectrum", spectrum)

    @classmethod
    def flat(cls, binning: RadialBinning, variance: float) -> "StationaryCovariance":
        """Σ = σ²I."""
        return cls(np.full(binning.n_bins, float(variance)), binning)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.binning.shape

    @property
    def variance(self) -> float:
        """Pixel variance of a field with this spectrum (DC excluded)."""
        n = self.shape[0] * self.shape[1]
        return float(np.sum(self.spectrum * self.binning.mode_counts) / n)

    @property
    def is_flat(self) -> bool:
        return bool(np.ptp(self.spectrum) <= 1e-12 * self.spectrum.max())

    def mode_power(self, exponent: float, dc: str = "pass") -> np.ndarray:
        """Per-mode multiplier grid for Σ^exponent.

        dc="pass" leaves the DC mode untouched (multiplier 1); dc="extend"
        gives it the lowest bin's value so that a flat spectrum is exactly σ²I.
        """
        values = self.spectrum ** exponent
        if dc == "pass":
            return self.binning.expand(values, dc=1.0)
        if dc == "extend":
            return self.binning.expand(values, dc=float(values[0]))
        raise DomainError(f"unknown dc handling '{dc}' (expected pass or extend)")


@dataclass(frozen=True, eq=False)
class LogNormalParams:
    """(1 + δ) ~ LN(μ, Σ) with a scalar latent mean."""

    mu: float
    cov: StationaryCovariance

    def __post_init__(self):
        mu = float(self.mu)
        if not np.isfinite(mu):
            raise DomainError(f"mu must be finite, got {self.mu}")
        object.__setattr__(self, "mu", mu)

    @property
    def binning(self) -> RadialBinning:
        return self.cov.binning


@dataclass(frozen=True)
class SeededRng:
    """Reproducible random stream named by (seed, derivation path).

    Each call to generator() starts the stream afresh; children from
    derive() are statistically independent of the parent and of each other.
    """

    seed: int
    algorithm: str = "PCG64"
    path: Tuple[int, ...] = ()

    def __post_init__(self):
        if int(self.seed) < 0:
            raise DomainError(f"seed must be >= 0, got {self.seed}")
        if self.algorithm not in BIT_GENERATORS:
            raise DomainError(
                f"unknown RNG algorithm '{self.algorithm}' (available: {', '.join(BIT_GENERATORS)})"
            )

    def derive(self, tag: str, *index: int) -> "SeededRng":
        key = (zlib.crc32(tag.encode("utf-8")),) + tuple(int(i) for i in index)
        return SeededRng(seed=self.seed, algorithm=self.algorithm, path=self.path + key)

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(int(self.seed), spawn_key=self.path)
        return np.random.Generator(BIT_GENERATORS[self.algorithm](sequence))


RngLike = Union[SeededRng, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, SeededRng):
        return rng.generator()
    return rng


# ---------------------------------------------------------------------------
# Covariance algebra and synthesis
# ---------------------------------------------------------------------------

def apply_cov_power(
    field: Raster,
    cov: StationaryCovariance,
    exponent: float,
    dc: str = "pass",
) -> np.ndarray:
    """Multiply every Fourier mode of field by its bin power raised to exponent."""
    x = as_raster(field)
    if x.shape != cov.shape:
        raise DimensionError(f"field {x.shape} != covariance grid {cov.shape}")
    spectrum = np.fft.fft2(x)
    spectrum *= cov.mode_power(exponent, dc=dc)
    return np.fft.ifft2(spectrum).real


def sample_lognormal_field(params: LogNormalParams, rng: RngLike) -> DensityField:
    """δ = exp(μ + Σ^{1/2} w) − 1 with w zero-mean white noise."""
    gen = as_generator(rng)
    white = gen.standard_normal(params.cov.shape)
    white -= white.mean()
    z = params.mu + apply_cov_power(white, params.cov, 0.5)
    return DensityField(np.expm1(z))


def power_law_spectrum(
    binning: RadialBinning,
    amplitude: float,
    slope: float,
    variance: Optional[float] = None,
) -> StationaryCovariance:
    """P(k) = A·(k/k_f)^slope at each bin's mean mode frequency, the average |k| over its modes.

    k_f is the fundamental (smallest non-zero) frequency of the grid. With
    `variance`, the spectrum is rescaled so the field has that pixel variance.
    """
    if not amplitude > 0:
        raise DomainError(f"amplitude must be > 0, got {amplitude}")
    k_f = float(binning.k[binning.k > 0].min())
    k_eff = radial_average(binning.k, binning)
    spectrum = amplitude * (k_eff / k_f) ** slope
    cov = StationaryCovariance(spectrum, binning)
    if variance is not None:
        if not variance > 0:
            raise DomainError(f"variance must be > 0, got {variance}")
        cov = StationaryCovariance(spectrum * (variance / cov.variance), binning)
    return cov


def tabulated_spectrum(
    binning: RadialBinning,
    k: Sequence[float],
    power: Sequence[float],
) -> StationaryCovariance:
    """Spectrum interpolated log-linearly from a (k, power) table."""
    k = np.asarray(k, dtype=np.float64)
    power = np.asarray(power, dtype=np.float64)
    if k.shape != power.shape or k.ndim != 1 or k.size < 1:
        raise DimensionError("spectrum table needs matching non-empty k and power columns")
    if np.any(power <= 0):
        raise DomainError("tabulated power must be > 0")
    order = np.argsort(k)
    k_eff = radial_average(binning.k, binning)
    log_power = np.interp(k_eff, k[order], np.log(power[order]))
    return StationaryCovariance(np.exp(log_power), binning)


def zero_mean_contrast(cov: StationaryCovariance) -> LogNormalParams:
    """Log-normal parameters with μ = −σ²/2, so that E[δ] = 0."""
    return LogNormalParams(mu=-0.5 * cov.variance, cov=cov)


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------

def _observed(mask, shape) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != shape:
        raise DimensionError(f"mask shape {mask.shape} != field shape {shape}")
    if not np.any(mask == 1):
        raise EmptyMaskError("mask has no observed pixels")
    return mask == 1


def estimate_mean(z: Raster, mask=None) -> float:
    x = as_raster(z)
    if mask is None:
        return float(np.mean(x))
    return float(np.mean(x[_observed(mask, x.shape)]))


def estimate_spectrum(
    z: Raster,
    binning: RadialBinning,
    mask=None,
    floor: float = SPECTRUM_FLOOR,
) -> StationaryCovariance:
    """Mean-subtracted binned periodogram.

    With a mask the field is zeroed on missing pixels and the periodogram is
    divided by the observed fraction.
    """
    x = as_raster(z)
    if x.shape != binning.shape:
        raise DimensionError(f"field {x.shape} != binning grid {binning.shape}")
    if mask is None:
        power = power_grid(x - x.mean())
    else:
        observed = _observed(mask, x.shape)
        fraction = float(np.mean(observed))
        centred = np.where(observed, x - x[observed].mean(), 0.0)
        power = power_grid(centred) / fraction
    spectrum = radial_average(power, binning)
    low = ~(spectrum > floor)
    if np.any(low):
        log.debug(f"[spectrum] {int(low.sum())}/{binning.n_bins} bins at floor {floor:g}")
        spectrum = np.where(low, floor, spectrum)
    return StationaryCovariance(spectrum, binning)


def estimate_latent_spectrum(
    counts,
    binning: RadialBinning,
    mask=None,
    floor: float = SPECTRUM_FLOOR,
) -> StationaryCovariance:
    """Spectrum of z = log(1 + δ) read off counts y ~ Poisson(m̄(1 + δ)).

    The contrast d = y/ȳ − 1 has the circular autocovariance of δ plus shot
    noise 1/ȳ at zero lag only. Each lag is averaged over the observed pixel
    pairs it joins, the shot noise is removed, and the log-normal relation
    ξ_z = log(1 + ξ_δ) maps the result to the latent field.
    """
    y = np.asarray(counts, dtype=np.float64)
    if y.shape != binning.shape:
        raise DimensionError(f"counts {y.shape} != binning grid {binning.shape}")
    observed = np.ones(y.shape, dtype=bool) if mask is None else _observed(mask, y.shape)
    y_bar = float(y[observed].mean())
    if not y_bar > 0:
        raise DomainError("mean observed count must be > 0")

    d = np.where(observed, y / y_bar - 1.0, 0.0)
    pairs = np.fft.ifft2(np.abs(np.fft.fft2(observed.astype(np.float64))) ** 2).real
    lagged = np.fft.ifft2(np.abs(np.fft.fft2(d)) ** 2).real
    xi = np.where(pairs > 0.5, lagged / np.maximum(pairs, 0.5), 0.0)
    xi[0, 0] = max(xi[0, 0] - 1.0 / y_bar, 0.0)
    xi_z = np.log1p(np.clip(xi, -1.0 + 1e-6, None))

    spectrum = radial_average(np.fft.fft2(xi_z).real, binning)
    low = ~(spectrum > floor)
    if np.any(low):
        log.debug(f"[spectrum] latent: {int(low.sum())}/{binning.n_bins} bins at floor {floor:g}")
        spectrum = np.where(low, floor, spectrum)
    return StationaryCovariance(spectrum, binning)


def poisson_sample(intensity, rng: RngLike) -> np.ndarray:
    """Independent Poisson draws per pixel."""
    lam = np.asarray(intensity, dtype=np.float64)
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise DomainError("Poisson intensity must be finite and >= 0")
    return as_generator(rng).poisson(lam).astype(np.int64)
