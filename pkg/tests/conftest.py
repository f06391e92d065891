"""
Shared fixtures for the densitymap test suite.
"""
import numpy as np
import pytest

from densitymap.core import CountMap, RadialBinning
from densitymap.randfield import (
    LogNormalParams,
    SeededRng,
    StationaryCovariance,
    power_law_spectrum,
    sample_lognormal_field,
    zero_mean_contrast,
)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def binning32():
    return RadialBinning.linear((32, 32), 8)


@pytest.fixture
def flat_prior32(binning32):
    return LogNormalParams(mu=0.0, cov=StationaryCovariance.flat(binning32, 0.5))


@pytest.fixture
def powerlaw_prior32(binning32):
    return zero_mean_contrast(power_law_spectrum(binning32, 1.0, -2.0, variance=0.3))


@pytest.fixture
def truth32(powerlaw_prior32):
    return sample_lognormal_field(powerlaw_prior32, SeededRng(7))


@pytest.fixture
def masked_counts32(truth32):
    """Poisson counts at m̄ = 10 with a 10x10 missing box."""
    gen = np.random.default_rng(3)
    counts = gen.poisson(10.0 * truth32.eta)
    mask = np.ones((32, 32), dtype=np.uint8)
    mask[8:18, 12:22] = 0
    return CountMap(counts=counts * mask, mask=mask, mean_count=10.0)
