"""
densitymap — Texture-synthesis imputation (E-step)
Fills the missing area of a count map with draws that keep the observed
pixels, the latent mean and the latent power spectrum, by cycling through
the three projections mean → covariance → observed.
"""

import logging
from typing import Optional

import numpy as np

from densitymap.config import ImputationConfig
from densitymap.core import CountMap, DensityField, Raster, as_raster, power_grid, radial_average
from densitymap.exceptions import DimensionError, EmptyMaskError
from densitymap.randfield import (
    LogNormalParams,
    RngLike,
    SeededRng,
    StationaryCovariance,
    apply_cov_power,
    as_generator,
    estimate_spectrum,
    poisson_sample,
    sample_lognormal_field,
)

log = logging.getLogger("densitymap.synthesis")


def project_observed(delta: Raster, reference: Raster, mask) -> DensityField:
    """M·reference + (I − M)·delta."""
    d = as_raster(delta)
    ref = as_raster(reference)
    m = np.asarray(mask)
    if not (d.shape == ref.shape == m.shape):
        raise DimensionError(f"delta {d.shape}, reference {ref.shape}, mask {m.shape} disagree")
    return DensityField(np.where(m == 1, ref, d))


def project_mean(z: Raster, mu: float) -> np.ndarray:
    x = as_raster(z)
    return x - x.mean() + mu


def project_cov(z: Raster, target: StationaryCovariance) -> np.ndarray:
    """Rescale every bin of z so its binned spectrum becomes the target; DC untouched."""
    x = as_raster(z)
    if x.shape != target.shape:
        raise DimensionError(f"field {x.shape} != target grid {target.shape}")
    current = estimate_spectrum(x, target.binning)
    ratio = StationaryCovariance(target.spectrum / current.spectrum, target.binning)
    return apply_cov_power(x, ratio, 0.5)


def texture_loop(
    delta_hat: Raster,
    mask,
    prior: LogNormalParams,
    n_tex: int,
    rng: RngLike,
    start: Optional[LogNormalParams] = None,
) -> np.ndarray:
    """Alternating projections from a log-normal draw; returns the final density p.

    Observed pixels always carry delta_hat. Missing pixels start from a draw
    of `start` (default: prior) and are projected toward the prior's mean and
    spectrum. The latent field is kept for the missing pixels between
    iterations, so p there stays > −1.
    """
    reference = as_raster(delta_hat)
    m = np.asarray(mask) == 1
    start = start or prior
    if not (reference.shape == m.shape == prior.cov.shape == start.cov.shape):
        raise DimensionError(
            f"delta_hat {reference.shape}, mask {m.shape}, prior {prior.cov.shape}, "
            f"start {start.cov.shape} disagree"
        )
    gen = as_generator(rng)
    z_observed = np.log1p(reference)
    z = np.where(m, z_observed, np.log1p(sample_lognormal_field(start, gen).delta))
    for t in range(n_tex):
        z = project_mean(z, prior.mu)
        z = project_cov(z, prior.cov)
        z = np.where(m, z_observed, z)
        log.debug(f"[E-step] texture {t + 1}/{n_tex}")
    return np.where(m, reference, np.expm1(z))


def completion_target(delta_hat: Raster, mask, prior: LogNormalParams) -> LogNormalParams:
    """Whole-field mean and spectrum the texture loop aims for.

    Observed pixels keep their own mean and power, noise included. The
    missing area gets the prior mean and its area share of the prior spectrum.
    """
    reference = as_raster(delta_hat)
    m = np.asarray(mask) == 1
    if reference.shape != m.shape or reference.shape != prior.cov.shape:
        raise DimensionError(
            f"delta_hat {reference.shape}, mask {m.shape}, prior {prior.cov.shape} disagree"
        )
    observed = float(np.mean(m))
    if observed in (0.0, 1.0):
        return prior
    missing = 1.0 - observed
    z_observed = np.log1p(reference)
    mu = observed * float(z_observed[m].mean()) + missing * prior.mu
    fixed = np.where(m, z_observed, prior.mu) - mu
    own = radial_average(power_grid(fixed), prior.binning)
    cov = StationaryCovariance(own + missing * prior.cov.spectrum, prior.binning)
    return LogNormalParams(mu=mu, cov=cov)


def impute(
    y: CountMap,
    delta_hat: Raster,
    prior: LogNormalParams,
    m_bar: float,
    config: Optional[ImputationConfig] = None,
    rng: Optional[RngLike] = None,
) -> CountMap:
    """Completed observation ŷ = M·y + (I − M)·Poisson(m̄(1 + p)); mask all ones."""
    config = config or ImputationConfig()
    ones = np.ones(y.shape, dtype=np.uint8)
    if y.is_complete:
        return CountMap(counts=y.counts, mask=ones, mean_count=m_bar)
    if not np.any(y.mask == 1):
        raise EmptyMaskError("cannot impute a count map with no observed pixels")

    gen = as_generator(rng if rng is not None else SeededRng(config.seed))
    target = completion_target(delta_hat, y.mask, prior)
    p = texture_loop(delta_hat, y.mask, target, config.n_tex, gen, start=prior)
    draws = poisson_sample(m_bar * (1.0 + p), gen)
    completed = np.where(y.mask == 1, y.counts, draws)
    log.debug(
        f"[E-step] imputed {int(np.sum(y.mask == 0))} pixels, mean draw {float(draws[y.mask == 0].mean()):.3f}"
    )
    return CountMap(counts=completed, mask=ones, mean_count=m_bar)
