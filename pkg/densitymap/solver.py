"""
densitymap — Density-field solver
Objective terms and the averaged Douglas–Rachford (parallel proximal)
iteration that estimates δ from a completed count map.

The variable is the coefficient vector α of z = Φα = log(1 + δ). Two terms
are split: F∘Φ (Poisson fidelity + log-normal prior, prox via prox_data and
the tight-frame rule) and λ‖α‖₁ (soft thresholding).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from densitymap.config import SolverConfig
from densitymap.core import CountMap, DensityField, Raster, as_raster
from densitymap.exceptions import DimensionError, DomainError
from densitymap.export import PathLike, write_csv
from densitymap.proxops import ProxParams, prox_data, prox_tight_frame, soft_threshold
from densitymap.randfield import LogNormalParams, apply_cov_power
from densitymap.transform import Dictionary

log = logging.getLogger("densitymap.solver")


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def poisson_negloglik(eta: Raster, y) -> float:
    """Σᵢ η[i] − y[i]·log η[i], +∞ wherever η is outside the support."""
    eta = as_raster(eta)
    counts = np.asarray(getattr(y, "counts", y), dtype=np.float64)
    if eta.shape != counts.shape:
        raise DimensionError(f"eta shape {eta.shape} != counts shape {counts.shape}")
    positive = counts > 0
    if np.any(eta[positive] <= 0) or np.any(eta[~positive] < 0):
        return float("inf")
    with np.errstate(divide="ignore"):
        log_eta = np.where(positive, np.log(np.where(positive, eta, 1.0)), 0.0)
    return float(np.sum(eta - counts * log_eta))


def _sigma_quadratic(v: np.ndarray, prior: LogNormalParams) -> float:
    """vᵀΣ⁻¹v with Σ extended to the DC mode by its lowest bin."""
    return float(np.sum(v * apply_cov_power(v, prior.cov, -1.0, dc="extend")))


def lognormal_penalty(delta: Raster, prior: LogNormalParams) -> float:
    """½(z − μ)ᵀΣ⁻¹(z − μ) + Σᵢ z[i] with z = log(1 + δ)."""
    d = as_raster(delta)
    if np.any(d <= -1.0):
        raise DomainError("lognormal_penalty needs delta > -1 everywhere")
    z = np.log1p(d)
    return 0.5 * _sigma_quadratic(z - prior.mu, prior) + float(np.sum(z))


def objective(
    alpha: np.ndarray,
    y,
    params: ProxParams,
    prior: LogNormalParams,
    dictionary: Dictionary,
) -> float:
    """J(α) = Σ m̄·exp(Φα) + (γ1 − y)ᵀΦα + γ‖Φα − μ‖²_{Σ⁻¹} + λ‖α‖₁."""
    counts = np.asarray(getattr(y, "counts", y), dtype=np.float64)
    z = dictionary.synthesize(alpha)
    gamma = params.gamma
    with np.errstate(over="ignore"):
        value = params.mean_count * float(np.sum(np.exp(z)))
    value += float(np.sum((gamma - counts) * z))
    if gamma > 0:
        value += gamma * _sigma_quadratic(z - prior.mu, prior)
    value += params.lam * float(np.sum(np.abs(alpha)))
    return value


def smooth_gradient(
    alpha: np.ndarray,
    y,
    params: ProxParams,
    prior: LogNormalParams,
    dictionary: Dictionary,
) -> np.ndarray:
    """Gradient in α of the smooth part of J (everything but λ‖α‖₁)."""
    counts = np.asarray(getattr(y, "counts", y), dtype=np.float64)
    z = dictionary.synthesize(alpha)
    grad_z = params.mean_count * np.exp(z) + params.gamma - counts
    if params.gamma > 0:
        grad_z = grad_z + 2.0 * params.gamma * apply_cov_power(z - prior.mu, prior.cov, -1.0, dc="extend")
    return dictionary.forward(grad_z)


# ---------------------------------------------------------------------------
# Solve
# ---------------------------------------------------------------------------

@dataclass
class SolveTrace:
    """Per-iteration objective and iterate change of one solve."""

    objective: List[float] = field(default_factory=list)
    step_norm: List[float] = field(default_factory=list)
    alpha: Optional[np.ndarray] = None
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.objective)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "iteration": np.arange(1, self.iterations + 1),
                "objective": self.objective,
                "step_norm": self.step_norm,
            }
        )

    def to_csv(self, path: PathLike):
        return write_csv(path, self.to_frame())


def prox_params(config: SolverConfig, mean_count: float) -> ProxParams:
    return ProxParams(beta=config.beta, gamma=config.gamma, lam=config.lam, mean_count=mean_count)


def initial_coefficients(y: CountMap, dictionary: Dictionary, init: str = "log") -> np.ndarray:
    """α₀ for the solve.

    log: Φα₀ = log(max(y, 1)/m̄), the latent field that reproduces the counts.
    counts: α₀ = Φᵀy as written in the original scheme (raw count scale).
    """
    counts = y.counts.astype(np.float64)
    if init == "log":
        z0 = np.log(np.maximum(counts, 1.0) / y.mean_count)
        return dictionary.forward(z0) / dictionary.frame_constant
    if init == "counts":
        return dictionary.forward(counts)
    raise DomainError(f"unknown init '{init}' (expected log or counts)")


def estimate_density(
    y: CountMap,
    prior: LogNormalParams,
    config: SolverConfig,
    dictionary: Dictionary,
    alpha0: Optional[np.ndarray] = None,
) -> Tuple[DensityField, SolveTrace]:
    """MAP estimate of δ on a complete count map.

    Every component p_i starts at α₀, so α_t stays the average of the
    components. Returns δ* = exp(Φα) − 1.
    """
    if not y.is_complete:
        raise DomainError("estimate_density needs a complete count map (mask all ones)")
    if y.shape != dictionary.shape or y.shape != prior.cov.shape:
        raise DimensionError(
            f"counts {y.shape}, dictionary {dictionary.shape}, prior {prior.cov.shape} disagree"
        )
    params = prox_params(config, y.mean_count)
    # each term is proxed at step β/2; the frame rule divides the inner step by ν
    inner_beta = dictionary.frame_constant * config.beta / 2.0
    half = ProxParams(beta=inner_beta, gamma=config.gamma, lam=config.lam, mean_count=y.mean_count)
    threshold = config.beta * config.lam / 2.0
    theta = config.theta
    counts = y.counts

    def data_prox(z: np.ndarray) -> np.ndarray:
        return prox_data(z, half, prior, counts, mode=config.prox_mode)

    if alpha0 is None:
        alpha = initial_coefficients(y, dictionary, config.init)
    else:
        alpha = np.array(alpha0, dtype=np.float64)
        if alpha.shape != (dictionary.coeff_count,):
            raise DimensionError(f"alpha0 has shape {alpha.shape}, expected ({dictionary.coeff_count},)")
    p_data = alpha.copy()
    p_sparse = alpha.copy()
    trace = SolveTrace()

    for t in range(config.n_est):
        xi_data = prox_tight_frame(p_data, data_prox, dictionary)
        xi_sparse = soft_threshold(p_sparse, threshold)
        xi = 0.5 * (xi_data + xi_sparse)
        p_data = p_data + theta * (2.0 * xi - alpha - xi_data)
        p_sparse = p_sparse + theta * (2.0 * xi - alpha - xi_sparse)
        alpha_next = alpha + theta * (xi - alpha)

        step = float(np.linalg.norm(alpha_next - alpha))
        alpha = alpha_next
        value = objective(alpha, counts, params, prior, dictionary)
        trace.objective.append(value)
        trace.step_norm.append(step)
        if not np.isfinite(value):
            log.warning(f"[solve] non-finite objective at iteration {t + 1}/{config.n_est}")
        log.debug(f"[solve] {t + 1}/{config.n_est} J={value:.6g} step={step:.3e}")

        if config.tolerance is not None and step <= config.tolerance * max(float(np.linalg.norm(alpha)), 1.0):
            trace.converged = True
            break

    trace.alpha = alpha
    z = dictionary.synthesize(alpha)
    log.info(
        f"[solve] {trace.iterations} iterations, J={trace.objective[-1]:.6g}"
        f"{' (converged)' if trace.converged else ''}"
    )
    return DensityField(np.expm1(z)), trace


# ---------------------------------------------------------------------------
# Existence / uniqueness probes
# ---------------------------------------------------------------------------

PROBE_RADII = (1.0, 10.0, 100.0)


class MinimizerReport(BaseModel):
    """Outcome of the coercivity and uniqueness probes."""

    coercive: bool = Field(..., description="J grew along every probed direction")
    non_coercive_directions: List[str] = Field(default_factory=list)
    probe_values: Dict[str, List[float]] = Field(default_factory=dict)
    min_objective: float = Field(..., description="Smallest J seen while probing")
    unique: Optional[bool] = Field(default=None, description="Two starts agreed (orthobasis with λ > 0 only)")
    max_deviation: Optional[float] = Field(default=None, description="max |δ₁ − δ₂| between the two starts")


def minimizer_checks(
    dictionary: Dictionary,
    config: SolverConfig,
    y: CountMap,
    prior: LogNormalParams,
    seed: int = 0,
    n_directions: int = 4,
    agreement: float = 1e-4,
) -> MinimizerReport:
    """Probe J for coercivity and, on orthobases with λ > 0, for a unique minimizer.

    J is evaluated at radii 1, 10 and 100 along random unit directions and,
    when y has zero counts, along the direction that drives z → −∞ on those
    pixels. A direction is coercive when the values increase strictly.
    """
    params = prox_params(config, y.mean_count)
    rng = np.random.default_rng(seed)
    directions: Dict[str, np.ndarray] = {}
    for i in range(n_directions):
        d = rng.standard_normal(dictionary.coeff_count)
        directions[f"random_{i}"] = d / np.linalg.norm(d)
    zero_counts = y.counts == 0
    if np.any(zero_counts):
        d = dictionary.forward(-zero_counts.astype(np.float64)) / dictionary.frame_constant
        directions["zero_counts"] = d / np.linalg.norm(d)

    probe_values: Dict[str, List[float]] = {}
    failing: List[str] = []
    for name, d in directions.items():
        values = [objective(r * d, y.counts, params, prior, dictionary) for r in PROBE_RADII]
        probe_values[name] = values
        if not all(b > a for a, b in zip(values, values[1:])):
            failing.append(name)
    if failing:
        log.warning(f"[probe] J not coercive along {', '.join(failing)}")
    min_objective = min(min(v) for v in probe_values.values())

    unique = None
    max_deviation = None
    if dictionary.is_orthobasis and config.lam > 0:
        first, _ = estimate_density(y, prior, config, dictionary)
        start = initial_coefficients(y, dictionary, config.init)
        start = start + 0.5 * rng.standard_normal(start.shape)
        second, _ = estimate_density(y, prior, config, dictionary, alpha0=start)
        max_deviation = float(np.max(np.abs(first.delta - second.delta)))
        unique = max_deviation <= agreement
        log.info(f"[probe] two starts differ by {max_deviation:.3e}")

    return MinimizerReport(
        coercive=not failing,
        non_coercive_directions=failing,
        probe_values=probe_values,
        min_objective=min_objective,
        unique=unique,
        max_deviation=max_deviation,
    )
