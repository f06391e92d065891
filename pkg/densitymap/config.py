"""
densitymap — Configuration
Pydantic models for every tuning knob, plus the flat key=value run-config
format used by the command line (parsed with python-dotenv).
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from densitymap.exceptions import UsageError
from densitymap.proxops import PROX_MODE_ALIASES
from densitymap.transform import DICTIONARY_REGISTRY

log = logging.getLogger("densitymap.config")


def _env_max_concurrent() -> int:
    raw = os.getenv("DENSITYMAP_MAX_CONCURRENT", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning(f"Ignoring DENSITYMAP_MAX_CONCURRENT={raw!r}; using 1")
        return 1


class SolverConfig(BaseModel):
    """Knobs of the density-field solve."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    n_est: int = Field(default=40, ge=1, description="Douglas–Rachford iterations (upper bound)")
    beta: float = Field(default=1.0, gt=0, description="Proximal step")
    theta: float = Field(default=1.0, gt=0, lt=2, description="Relaxation, constant over iterations")
    lam: float = Field(default=1e-3, ge=0, alias="lambda", description="Sparsity weight λ")
    gamma: float = Field(default=1e-4, ge=0, description="Log-normal prior weight γ")
    tolerance: Optional[float] = Field(
        default=1e-6, gt=0, description="Relative iterate change for early stop; None runs all n_est"
    )
    prox_mode: Literal["sandwich", "exact"] = Field(default="sandwich")
    init: Literal["log", "counts"] = Field(
        default="log", description="log: α₀ from log(max(y,1)/m̄); counts: α₀ = Φᵀy"
    )

    @field_validator("prox_mode", mode="before")
    @classmethod
    def _prox_mode_alias(cls, value: Any) -> Any:
        return PROX_MODE_ALIASES.get(value, value) if isinstance(value, str) else value


class ImputationConfig(BaseModel):
    """Knobs of the texture-synthesis E-step."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_tex: int = Field(default=15, ge=1, description="Alternating-projection iterations")
    seed: int = Field(default=0, ge=0)


class AugmentationConfig(BaseModel):
    """Knobs of the outer data-augmentation loop."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_iter: int = Field(default=6, ge=1, description="Outer rounds")
    n_mi: int = Field(default=5, ge=1, description="Imputations per round")
    imputation: ImputationConfig = Field(default_factory=ImputationConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    seed: int = Field(default=0, ge=0, description="Master seed")
    n_bins: int = Field(default=16, ge=1)
    bin_scale: Literal["log", "linear"] = Field(default="log")
    dictionary: str = Field(default="dct")
    max_concurrent: int = Field(default_factory=_env_max_concurrent, ge=1)

    @field_validator("dictionary")
    @classmethod
    def _known_dictionary(cls, value: str) -> str:
        if value not in DICTIONARY_REGISTRY:
            raise ValueError(f"unknown dictionary '{value}' (available: {', '.join(sorted(DICTIONARY_REGISTRY))})")
        return value


# ---------------------------------------------------------------------------
# key=value run configs
# ---------------------------------------------------------------------------

SOLVER_KEYS = ("n_est", "lambda", "gamma", "beta", "theta", "prox_mode", "tolerance", "init")
IMPUTATION_KEYS = ("n_tex",)
TOP_LEVEL_KEYS = ("n_iter", "n_mi", "seed", "n_bins", "bin_scale", "dictionary", "max_concurrent")
VALID_KEYS = tuple(sorted(SOLVER_KEYS + IMPUTATION_KEYS + TOP_LEVEL_KEYS))

# Command-line runs use the tuned multiple-imputation count
RUN_DEFAULTS: Dict[str, str] = {"n_mi": "10"}


def build_config(values: Mapping[str, Any], defaults: Optional[Mapping[str, Any]] = None) -> AugmentationConfig:
    """AugmentationConfig from flat keys; `values` override `defaults`."""
    merged: Dict[str, Any] = dict(defaults or {})
    merged.update(values)
    unknown = sorted(k for k in merged if k not in VALID_KEYS)
    if unknown:
        raise UsageError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(VALID_KEYS)}")
    missing = sorted(k for k, v in merged.items() if v is None and k != "tolerance")
    if missing:
        raise UsageError(f"config key(s) without a value: {', '.join(missing)}")

    solver = {k: merged[k] for k in SOLVER_KEYS if k in merged}
    if isinstance(solver.get("tolerance"), str) and solver["tolerance"].strip().lower() in ("none", ""):
        solver["tolerance"] = None
    top = {k: merged[k] for k in TOP_LEVEL_KEYS if k in merged}
    imputation = {k: merged[k] for k in IMPUTATION_KEYS if k in merged}
    if "seed" in merged:
        imputation["seed"] = merged["seed"]
    try:
        return AugmentationConfig(
            solver=SolverConfig(**solver),
            imputation=ImputationConfig(**imputation),
            **top,
        )
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise UsageError(f"invalid config: {problems}") from e


def load_run_config(
    path: Union[str, os.PathLike],
    defaults: Optional[Mapping[str, Any]] = None,
) -> AugmentationConfig:
    """Parse a key=value config file ('#' comments allowed)."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    values = dotenv_values(path)
    log.debug(f"[config] {path}: {dict(values)}")
    return build_config(values, defaults)


def flatten_config(config: AugmentationConfig) -> Dict[str, Any]:
    """Flat key=value view of a config (the inverse of build_config)."""
    solver = config.solver
    return {
        "n_iter": config.n_iter,
        "n_mi": config.n_mi,
        "n_tex": config.imputation.n_tex,
        "n_est": solver.n_est,
        "lambda": solver.lam,
        "gamma": solver.gamma,
        "beta": solver.beta,
        "theta": solver.theta,
        "tolerance": solver.tolerance,
        "prox_mode": solver.prox_mode,
        "init": solver.init,
        "seed": config.seed,
        "n_bins": config.n_bins,
        "bin_scale": config.bin_scale,
        "dictionary": config.dictionary,
        "max_concurrent": config.max_concurrent,
    }
