"""
densitymap — Dictionaries
Analysis/synthesis pairs Φᵀ/Φ for the sparsity prior.

Solver code only ever touches forward, synthesize, frame_constant and
coeff_count, so any tight frame registered in DICTIONARY_REGISTRY can be
slotted in. Coefficients are flat float64 vectors of length coeff_count.
"""

import logging
from abc import ABC, abstractmethod
from typing import Tuple

import numpy as np
from scipy import fft

from densitymap.core import Shape
from densitymap.exceptions import DimensionError, DomainError

log = logging.getLogger("densitymap.transform")


class Dictionary(ABC):
    """Tight frame on a fixed (height, width) grid: synthesize(forward(x)) = ν·x."""

    name: str = ""

    def __init__(self, shape: Shape):
        height, width = int(shape[0]), int(shape[1])
        if height < 1 or width < 1:
            raise DimensionError(f"dictionary grid must be non-empty, got {shape}")
        self.shape: Tuple[int, int] = (height, width)
        self.size = height * width

    @property
    @abstractmethod
    def frame_constant(self) -> float:
        """ν in ΦΦᵀ = νI."""
        ...

    @property
    @abstractmethod
    def coeff_count(self) -> int:
        """L, the number of coefficients (L ≥ n)."""
        ...

    @abstractmethod
    def _analysis(self, x: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def _synthesis(self, coeffs: np.ndarray) -> np.ndarray:
        ...

    @property
    def is_orthobasis(self) -> bool:
        return self.coeff_count == self.size and self.frame_constant == 1.0

    def forward(self, x) -> np.ndarray:
        """α = Φᵀx."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise DimensionError(f"{self.name}: map shape {x.shape} != grid {self.shape}")
        return self._analysis(x)

    def synthesize(self, coeffs) -> np.ndarray:
        """x = Φα."""
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != (self.coeff_count,):
            raise DimensionError(
                f"{self.name}: expected {self.coeff_count} coefficients, got shape {coeffs.shape}"
            )
        return self._synthesis(coeffs)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"


class DCTDictionary(Dictionary):
    """Orthonormal 2D type-II cosine basis (ν = 1, L = n)."""

    name = "dct"

    @property
    def frame_constant(self) -> float:
        return 1.0

    @property
    def coeff_count(self) -> int:
        return self.size

    def _analysis(self, x: np.ndarray) -> np.ndarray:
        return fft.dctn(x, type=2, norm="ortho").ravel()

    def _synthesis(self, coeffs: np.ndarray) -> np.ndarray:
        return fft.idctn(coeffs.reshape(self.shape), type=2, norm="ortho")


class UnionDictionary(Dictionary):
    """Cosine basis concatenated with the pixel (Dirac) basis: ν = 2, L = 2n."""

    name = "dct+dirac"

    @property
    def frame_constant(self) -> float:
        return 2.0

    @property
    def coeff_count(self) -> int:
        return 2 * self.size

    def _analysis(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([fft.dctn(x, type=2, norm="ortho").ravel(), x.ravel()])

    def _synthesis(self, coeffs: np.ndarray) -> np.ndarray:
        cosine, pixels = coeffs[: self.size], coeffs[self.size:]
        return fft.idctn(cosine.reshape(self.shape), type=2, norm="ortho") + pixels.reshape(self.shape)


# Registry of available dictionaries
DICTIONARY_REGISTRY: dict[str, type[Dictionary]] = {
    "dct": DCTDictionary,
    "dct+dirac": UnionDictionary,
}


def get_dictionary(name: str, shape: Shape) -> Dictionary:
    cls = DICTIONARY_REGISTRY.get(name)
    if cls is None:
        raise DomainError(
            f"unknown dictionary '{name}' (available: {', '.join(sorted(DICTIONARY_REGISTRY))})"
        )
    return cls(shape)


def verify_tight_frame(dictionary: Dictionary, trials: int = 8, seed: int = 0) -> float:
    """Largest relative frame deviation over `trials` random maps.

    Checks both sides of the frame identity: |‖Φᵀx‖² − ν‖x‖²| and
    |‖ΦΦᵀx‖²/ν − ν‖x‖²|, each divided by ‖x‖². A consistent tight frame
    returns rounding-level values.
    """
    if trials < 1:
        raise DomainError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    nu = dictionary.frame_constant
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(dictionary.shape)
        norm2 = float(np.sum(x * x))
        coeffs = dictionary.forward(x)
        analysis_dev = abs(float(np.sum(coeffs * coeffs)) - nu * norm2) / norm2
        back = dictionary.synthesize(coeffs)
        synthesis_dev = abs(float(np.sum(back * back)) / nu - nu * norm2) / norm2
        worst = max(worst, analysis_dev, synthesis_dev)
    log.debug(f"[frame] {dictionary!r}: max deviation {worst:.3e} over {trials} trials")
    return worst
