"""
densitymap — Data-augmentation pipeline
Outer loop: initial parameters from the observed pixels, then rounds of
multiple imputation (E-step) and per-imputation MAP solves (M-step) whose
parameter estimates are averaged. Also holds the quadratic-fidelity ISTA
baseline and the spectrum comparison table.

Imputations of a round are independent: each owns an RNG derived from
(master seed, "impute", round, index) and results are reduced in index
order, so the output does not depend on max_concurrent.
"""

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from densitymap.config import AugmentationConfig
from densitymap.core import CountMap, DensityField, RadialBinning
from densitymap.exceptions import DimensionError, DomainError, EmptyMaskError
from densitymap.proxops import soft_threshold
from densitymap.randfield import (
    LogNormalParams,
    SeededRng,
    StationaryCovariance,
    estimate_latent_spectrum,
    estimate_mean,
    estimate_spectrum,
    zero_mean_contrast,
)
from densitymap.solver import SolveTrace, estimate_density
from densitymap.synthesis import impute
from densitymap.transform import Dictionary, get_dictionary

log = logging.getLogger("densitymap.pipeline")


class ParamEstimate(NamedTuple):
    mu: float
    cov: StationaryCovariance
    m_bar: float


class ParamSnapshot(BaseModel):
    """Averaged parameters after one outer round."""

    round: int = Field(..., ge=1)
    mu: float
    m_bar: float
    spectrum: List[float]


@dataclass
class ImputationOutcome:
    completed: CountMap
    delta: DensityField
    trace: SolveTrace
    estimate: ParamEstimate


@dataclass
class PipelineResult:
    """Everything a run produces; `history` has one entry per outer round."""

    delta: DensityField
    params: LogNormalParams
    m_bar: float
    binning: RadialBinning
    history: List[ParamSnapshot] = field(default_factory=list)
    traces: List[List[SolveTrace]] = field(default_factory=list)
    realizations: List[DensityField] = field(default_factory=list)
    completed: List[CountMap] = field(default_factory=list)
    delta_spectrum: Optional[np.ndarray] = None

    def history_frame(self) -> pd.DataFrame:
        rows = []
        for snap in self.history:
            row = {"round": snap.round, "mu": snap.mu, "m_bar": snap.m_bar}
            row.update({f"bin_{j}": value for j, value in enumerate(snap.spectrum)})
            rows.append(row)
        return pd.DataFrame(rows)

    def traces_frame(self) -> pd.DataFrame:
        frames = []
        for r, round_traces in enumerate(self.traces, start=1):
            for i, trace in enumerate(round_traces):
                frame = trace.to_frame()
                frame.insert(0, "imputation", i)
                frame.insert(0, "round", r)
                frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=["round", "imputation", "iteration", "objective", "step_norm"])
        return pd.concat(frames, ignore_index=True)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def initial_latent(y: CountMap, m_bar: float) -> np.ndarray:
    """ẑ = log(max(y, 1)/m̄) on observed pixels, 0 elsewhere."""
    z = np.log(np.maximum(y.counts, 1) / m_bar)
    return np.where(y.mask == 1, z, 0.0)


def initialize_params(y: CountMap, binning: RadialBinning) -> Tuple[LogNormalParams, float]:
    """(μ̂, Σ̂) and m̄̂ from the observed pixels only."""
    observed = y.mask == 1
    if not np.any(observed):
        raise EmptyMaskError("no observed pixels to initialize from")
    if binning.shape != y.shape:
        raise DimensionError(f"binning grid {binning.shape} != count map {y.shape}")
    m_bar = float(np.mean(y.counts[observed]))
    if not m_bar > 0:
        raise DomainError("observed pixels hold no counts; mean count is 0")
    z = initial_latent(y, m_bar)
    mu = estimate_mean(z, y.mask)
    cov = estimate_spectrum(z, binning, y.mask)
    log.info(f"[init] m̄={m_bar:.4f} μ={mu:.4f} σ²={cov.variance:.4g} observed={y.observed_fraction:.3f}")
    return LogNormalParams(mu=mu, cov=cov), m_bar


def average_params(estimates: Sequence[ParamEstimate]) -> ParamEstimate:
    """Arithmetic means of μ, of Σ per bin and of m̄, in list order."""
    if not estimates:
        raise DomainError("average_params needs at least one estimate")
    binning = estimates[0].cov.binning
    for e in estimates[1:]:
        binning.require_same(e.cov.binning)
    n = len(estimates)
    mu = sum(e.mu for e in estimates) / n
    spectrum = np.sum([e.cov.spectrum for e in estimates], axis=0) / n
    m_bar = sum(e.m_bar for e in estimates) / n
    return ParamEstimate(mu=mu, cov=StationaryCovariance(spectrum, binning), m_bar=m_bar)


# ---------------------------------------------------------------------------
# Data augmentation
# ---------------------------------------------------------------------------

def _one_imputation(
    y: CountMap,
    delta_hat: np.ndarray,
    prior: LogNormalParams,
    m_bar: float,
    config: AugmentationConfig,
    dictionary: Dictionary,
    rng: SeededRng,
) -> ImputationOutcome:
    completed = impute(y, delta_hat, prior, m_bar, config.imputation, rng)
    delta, trace = estimate_density(completed, prior, config.solver, dictionary)
    # latent statistics from the completed counts, shot noise removed
    cov_i = estimate_latent_spectrum(completed.counts, prior.binning)
    mu_i = zero_mean_contrast(cov_i).mu
    m_bar_i = float(np.mean(completed.counts)) / float(np.mean(delta.eta))
    return ImputationOutcome(completed, delta, trace, ParamEstimate(mu_i, cov_i, m_bar_i))


async def run_data_augmentation_async(
    y: CountMap,
    config: Optional[AugmentationConfig] = None,
    dictionary: Optional[Dictionary] = None,
    binning: Optional[RadialBinning] = None,
) -> PipelineResult:
    config = config or AugmentationConfig()
    binning = binning or RadialBinning.build(y.shape, config.n_bins, config.bin_scale)
    dictionary = dictionary or get_dictionary(config.dictionary, y.shape)
    master = SeededRng(config.seed)

    prior, m_bar = initialize_params(y, binning)
    delta_hat = np.expm1(initial_latent(y, m_bar))
    semaphore = asyncio.Semaphore(config.max_concurrent)

    history: List[ParamSnapshot] = []
    traces: List[List[SolveTrace]] = []
    outcomes: List[ImputationOutcome] = []

    for r in range(1, config.n_iter + 1):
        log.info(f"[E-step] round {r}/{config.n_iter}: {config.n_mi} imputations")

        async def run_one(i: int, prior=prior, m_bar=m_bar, delta_hat=delta_hat, r=r) -> ImputationOutcome:
            async with semaphore:
                return await asyncio.to_thread(
                    _one_imputation, y, delta_hat, prior, m_bar, config, dictionary,
                    master.derive("impute", r, i),
                )

        outcomes = list(await asyncio.gather(*(run_one(i) for i in range(config.n_mi))))

        averaged = average_params([o.estimate for o in outcomes])
        prior = LogNormalParams(mu=averaged.mu, cov=averaged.cov)
        m_bar = averaged.m_bar
        delta_hat = np.mean([o.delta.delta for o in outcomes], axis=0)
        traces.append([o.trace for o in outcomes])
        history.append(
            ParamSnapshot(round=r, mu=prior.mu, m_bar=m_bar, spectrum=prior.cov.spectrum.tolist())
        )
        if not (np.isfinite(prior.mu) and np.isfinite(m_bar)):
            log.warning(f"[M-step] round {r}: non-finite parameters")
        log.info(f"[M-step] round {r}/{config.n_iter}: μ={prior.mu:.4f} m̄={m_bar:.4f} σ²={prior.cov.variance:.4g}")

    delta_spectrum = np.mean(
        [estimate_spectrum(o.delta.delta, binning).spectrum for o in outcomes], axis=0
    )
    return PipelineResult(
        delta=DensityField(delta_hat),
        params=prior,
        m_bar=m_bar,
        binning=binning,
        history=history,
        traces=traces,
        realizations=[o.delta for o in outcomes],
        completed=[o.completed for o in outcomes],
        delta_spectrum=delta_spectrum,
    )


def run_data_augmentation(
    y: CountMap,
    config: Optional[AugmentationConfig] = None,
    dictionary: Optional[Dictionary] = None,
    binning: Optional[RadialBinning] = None,
) -> PipelineResult:
    """Blocking entry point; runs the async loop to completion."""
    return asyncio.run(run_data_augmentation_async(y, config, dictionary, binning))


# ---------------------------------------------------------------------------
# Baseline and comparison
# ---------------------------------------------------------------------------

def baseline_objective(alpha: np.ndarray, y: CountMap, dictionary: Dictionary, lam: float) -> float:
    residual = y.mask * (y.mean_count * (1.0 + dictionary.synthesize(alpha)) - y.counts)
    return 0.5 * float(np.sum(residual ** 2)) + lam * float(np.sum(np.abs(alpha)))


def baseline_quadratic_inpaint(
    y: CountMap,
    dictionary: Dictionary,
    lam: float,
    n_iter: int,
    trace: Optional[List[float]] = None,
) -> np.ndarray:
    """ISTA on ½‖M(m̄(1 + Φα) − y)‖² + λ‖α‖₁ from α = 0; returns δ = Φα.

    No log-normal model, so the result may dip below −1.
    """
    if lam < 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    m_bar = y.mean_count
    step = 1.0 / (m_bar * m_bar * dictionary.frame_constant)
    mask = y.mask.astype(np.float64)
    counts = y.counts.astype(np.float64)
    alpha = np.zeros(dictionary.coeff_count)
    for t in range(n_iter):
        residual = mask * (m_bar * (1.0 + dictionary.synthesize(alpha)) - counts)
        grad = m_bar * dictionary.forward(residual)
        alpha = soft_threshold(alpha - step * grad, step * lam)
        if trace is not None:
            trace.append(baseline_objective(alpha, y, dictionary, lam))
    log.info(f"[baseline] {n_iter} ISTA iterations, {int(np.count_nonzero(alpha))} non-zero coefficients")
    return dictionary.synthesize(alpha)


SpectrumLike = Union[StationaryCovariance, Sequence[float], np.ndarray]


def _spectrum_values(spectrum: SpectrumLike, binning: RadialBinning, name: str) -> np.ndarray:
    if isinstance(spectrum, StationaryCovariance):
        if not spectrum.binning.same_as(binning):
            raise DimensionError(f"'{name}' uses a different binning")
        return spectrum.spectrum
    values = np.asarray(spectrum, dtype=np.float64)
    if values.shape != (binning.n_bins,):
        raise DimensionError(f"'{name}' has {values.size} bins, expected {binning.n_bins}")
    return values


def compare_spectra(
    truth: SpectrumLike,
    estimates: Mapping[str, SpectrumLike],
    binning: RadialBinning,
) -> pd.DataFrame:
    """Per-bin |estimate − truth|/truth for each named estimate."""
    reference = _spectrum_values(truth, binning, "truth")
    table: Dict[str, np.ndarray] = {"k_bin_center": binning.centers, "truth": reference}
    for name, spectrum in estimates.items():
        values = _spectrum_values(spectrum, binning, name)
        table[name] = np.abs(values - reference) / reference
    return pd.DataFrame(table)
