"""
densitymap — Proximity operators
Soft thresholding, the Lambert-W exponential prox, the data-fidelity prox
with log-normal prior and the tight-frame composition rule.

F(z) = m̄·Σexp(z) + (γ1 − y)ᵀz + γ‖z − μ‖²_{Σ⁻¹} is the smooth part of the
objective in the latent variable z = Φα. prox_data evaluates prox_{βF}.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from densitymap.core import Raster, as_raster
from densitymap.exceptions import DimensionError, DomainError
from densitymap.randfield import LogNormalParams
from densitymap.transform import Dictionary

log = logging.getLogger("densitymap.proxops")

ArrayLike = Union[float, np.ndarray]

PROX_MODES = ("sandwich", "exact")
# "paper" is the run-config name of the sandwich approximation
PROX_MODE_ALIASES = {"paper": "sandwich"}

_INV_E = float(np.exp(-1.0))
_HALLEY_MAX_ITER = 64
# exp() overflows near 709; arguments above this go through the log-form W
LOG_FORM_THRESHOLD = 500.0


@dataclass(frozen=True)
class ProxParams:
    """Weights of prox_{βF}: β step, γ log-normal weight, λ sparsity, m̄ mean count."""

    beta: float
    gamma: float
    lam: float
    mean_count: float

    def __post_init__(self):
        if not self.beta > 0:
            raise DomainError(f"beta must be > 0, got {self.beta}")
        if not self.gamma >= 0:
            raise DomainError(f"gamma must be >= 0, got {self.gamma}")
        if not self.lam >= 0:
            raise DomainError(f"lambda must be >= 0, got {self.lam}")
        if not self.mean_count > 0:
            raise DomainError(f"mean_count must be > 0, got {self.mean_count}")


def _like_input(value: np.ndarray, template) -> ArrayLike:
    return float(value) if np.ndim(template) == 0 else value


# ---------------------------------------------------------------------------
# Elementary proxes
# ---------------------------------------------------------------------------

def soft_threshold(x: ArrayLike, t: float) -> ArrayLike:
    """sign(x)·max(|x| − t, 0), the prox of t‖·‖₁."""
    if not t >= 0:
        raise DomainError(f"threshold must be >= 0, got {t}")
    values = np.asarray(x, dtype=np.float64)
    out = np.sign(values) * np.maximum(np.abs(values) - t, 0.0)
    return _like_input(out, x)


def lambert_w(x: ArrayLike) -> ArrayLike:
    """Principal branch W₀(x) for real x ≥ −1/e, by Halley iteration.

    Starting points: the branch-point series near −1/e, log1p(x) on
    [−1/4, 3] and log x − log log x above.
    """
    values = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if np.any(np.isnan(values)):
        raise DomainError("lambert_w argument is NaN")
    # tolerate rounding in the caller's evaluation of -1/e
    if np.any(values < -_INV_E * (1.0 + 4 * np.finfo(float).eps)):
        raise DomainError("lambert_w argument below -1/e has no real principal value")
    values = np.maximum(values, -_INV_E)

    w = np.log1p(np.maximum(values, -0.25))
    near_branch = values < -0.25
    if np.any(near_branch):
        p = np.sqrt(np.maximum(2.0 * (np.e * values[near_branch] + 1.0), 0.0))
        w[near_branch] = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3 - 43.0 / 540.0 * p ** 4
    large = values > 3.0
    if np.any(large):
        l1 = np.log(values[large])
        l2 = np.log(l1)
        w[large] = l1 - l2 + l2 / l1

    at_branch = values <= -_INV_E
    active = ~at_branch & np.isfinite(values)
    for _ in range(_HALLEY_MAX_ITER):
        if not np.any(active):
            break
        wa = w[active]
        ew = np.exp(wa)
        f = wa * ew - values[active]
        w1 = wa + 1.0
        step = f / (ew * w1 - (wa + 2.0) * f / (2.0 * w1))
        w[active] = wa - step
        done = np.abs(step) <= 4 * np.finfo(float).eps * (1.0 + np.abs(w[active]))
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    w[at_branch] = -1.0
    w[np.isposinf(values)] = np.inf
    return _like_input(w.reshape(np.shape(x)), x)


def lambert_w_log(t: ArrayLike) -> ArrayLike:
    """W(eᵗ) without forming eᵗ: solves w + log w = t."""
    values = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(np.isnan(values)):
        raise DomainError("lambert_w_log argument is NaN")
    w = np.empty_like(values)
    small = values <= LOG_FORM_THRESHOLD
    if np.any(small):
        w[small] = lambert_w(np.exp(values[small]))
    big = ~small
    if np.any(big):
        tb = values[big]
        wb = tb - np.log(tb) + np.log(tb) / tb
        for _ in range(_HALLEY_MAX_ITER):
            g = wb + np.log(wb) - tb
            dg = 1.0 + 1.0 / wb
            d2g = -1.0 / (wb * wb)
            step = 2.0 * g * dg / (2.0 * dg * dg - g * d2g)
            wb = wb - step
            if np.all(np.abs(step) <= 4 * np.finfo(float).eps * wb):
                break
        w[big] = wb
    return _like_input(w.reshape(np.shape(t)), t)


def prox_scaled_exp(x: ArrayLike, a: ArrayLike) -> ArrayLike:
    """argmin_p a·eᵖ + (p − x)²/2 = x − W(a·eˣ)."""
    a_values = np.asarray(a, dtype=np.float64)
    if np.any(~(a_values > 0)):
        raise DomainError("prox_scaled_exp needs a > 0")
    x_values = np.asarray(x, dtype=np.float64)
    x_b, a_b = np.broadcast_arrays(np.atleast_1d(x_values), np.atleast_1d(a_values))
    t = np.log(a_b) + x_b
    w = np.asarray(lambert_w_log(t), dtype=np.float64)
    # log w − log a equals x − w; it keeps precision once w is large
    with np.errstate(divide="ignore"):
        p = np.where(w > 1.0, np.log(np.maximum(w, 1.0)) - np.log(a_b), x_b - w)
    if np.ndim(x) == 0 and np.ndim(a) == 0:
        return float(p[0])
    return p.reshape(np.broadcast_shapes(np.shape(x), np.shape(a)))


# ---------------------------------------------------------------------------
# Data fidelity with log-normal prior
# ---------------------------------------------------------------------------

def _fourier_diag(x: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.fft2(x) * multiplier).real


def prox_data(
    x: Raster,
    params: ProxParams,
    prior: LogNormalParams,
    y,
    mode: str = "sandwich",
) -> np.ndarray:
    """prox_{βF}(x) for the Poisson fidelity plus the log-normal quadratic.

    sandwich: K⁻¹ ∘ prox_{βm̄exp} ∘ K⁻¹ applied to x + β(y − γ1 + γβΣ⁻¹μ), with
    K = I + γβΣ⁻¹ diagonal in Fourier and μ living in the DC mode.
    exact: pixelwise solve of κp + βm̄eᵖ = r, the first-order condition of
    βF + ½‖· − x‖² when Σ = σ²I; raises DomainError on a non-flat spectrum.
    """
    z = as_raster(x)
    counts = np.asarray(getattr(y, "counts", y), dtype=np.float64)
    if z.shape != counts.shape or z.shape != prior.cov.shape:
        raise DimensionError(
            f"prox_data: field {z.shape}, counts {counts.shape}, prior {prior.cov.shape} disagree"
        )
    mode = PROX_MODE_ALIASES.get(mode, mode)
    beta, gamma, m_bar = params.beta, params.gamma, params.mean_count
    a = beta * m_bar

    if mode == "sandwich":
        inv_sigma = prior.cov.mode_power(-1.0, dc="extend")
        k_inv = 1.0 / (1.0 + gamma * beta * inv_sigma)
        # Σ⁻¹ acting on the constant field μ1 only sees the DC entry
        sigma_inv_mu = prior.mu * float(inv_sigma[0, 0])
        v = z + beta * (counts - gamma + gamma * beta * sigma_inv_mu)
        r = _fourier_diag(v, k_inv)
        p = prox_scaled_exp(r, a)
        return _fourier_diag(np.asarray(p), k_inv)

    if mode == "exact":
        if not prior.cov.is_flat:
            raise DomainError("exact prox mode needs a flat prior spectrum (Σ = σ²I)")
        sigma2 = float(prior.cov.spectrum[0])
        kappa = 1.0 + 2.0 * gamma * beta / sigma2
        r = z + beta * (counts - gamma) + 2.0 * gamma * beta * prior.mu / sigma2
        return np.asarray(prox_scaled_exp(r / kappa, a / kappa))

    raise DomainError(f"unknown prox mode '{mode}' (expected one of {', '.join(PROX_MODES)})")


def prox_tight_frame(
    coeffs: np.ndarray,
    inner_prox: Callable[[np.ndarray], np.ndarray],
    dictionary: Dictionary,
) -> np.ndarray:
    """prox_{f∘Φ}(α) = α + ν⁻¹Φᵀ(prox_f(Φα) − Φα) for a tight frame Φ."""
    z = dictionary.synthesize(coeffs)
    moved = np.asarray(inner_prox(z), dtype=np.float64) - z
    return np.asarray(coeffs, dtype=np.float64) + dictionary.forward(moved) / dictionary.frame_constant
