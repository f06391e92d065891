"""
densitymap — Core grid types
Count maps, density fields, latent Gaussian fields, radial frequency binning
and the DMAP1 raster format. Every other module builds on these.

Grids are flat, periodic and stored row-major as (height, width) arrays.
Frequencies are in cycles/pixel (numpy.fft.fftfreq). The power of a field is
its periodogram |FFT(x)|^2 / n, so white noise of variance s2 has mean power
s2 in every mode and the non-DC power sums to sum((x - mean(x))^2).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from densitymap.exceptions import DimensionError, DomainError, FormatError
from densitymap.export import PathLike, atomic_write_bytes

log = logging.getLogger("densitymap.core")

Shape = Tuple[int, int]


def _frozen(values, dtype) -> np.ndarray:
    out = np.array(values, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _require_2d(values: np.ndarray, name: str) -> None:
    if values.ndim != 2 or 0 in values.shape:
        raise DimensionError(f"{name} must be a non-empty 2D raster, got shape {values.shape}")


# ---------------------------------------------------------------------------
# Rasters
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CountMap:
    """Observed counts y with the binary mask M (1 = observed) and mean count m̄."""

    counts: np.ndarray
    mask: np.ndarray
    mean_count: float

    def __post_init__(self):
        counts = np.asarray(self.counts)
        mask = np.asarray(self.mask)
        _require_2d(counts, "counts")
        if mask.shape != counts.shape:
            raise DimensionError(f"mask shape {mask.shape} != counts shape {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
                raise DomainError("counts must be integers")
        if np.any(counts < 0):
            raise DomainError("counts must be non-negative")
        if not np.all((mask == 0) | (mask == 1)):
            raise DomainError("mask values must be 0 or 1")
        mean_count = float(self.mean_count)
        if not (np.isfinite(mean_count) and mean_count > 0):
            raise DomainError(f"mean_count must be positive, got {self.mean_count}")
        object.__setattr__(self, "counts", _frozen(counts, np.int64))
        object.__setattr__(self, "mask", _frozen(mask, np.uint8))
        object.__setattr__(self, "mean_count", mean_count)

    @classmethod
    def complete(cls, counts, mean_count: Optional[float] = None) -> "CountMap":
        """Fully observed map; mean_count defaults to the sample mean of counts."""
        counts = np.asarray(counts)
        if mean_count is None:
            mean_count = float(np.mean(counts))
        return cls(counts=counts, mask=np.ones(counts.shape, dtype=np.uint8), mean_count=mean_count)

    @property
    def shape(self) -> Shape:
        return self.counts.shape

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def observed_fraction(self) -> float:
        return float(np.mean(self.mask))

    @property
    def is_complete(self) -> bool:
        return bool(np.all(self.mask == 1))


@dataclass(frozen=True, eq=False)
class DensityField:
    """Density contrast δ; 1 + δ > 0 everywhere."""

    delta: np.ndarray

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.float64)
        _require_2d(delta, "delta")
        if not np.all(np.isfinite(delta)):
            raise DomainError("delta must be finite")
        if np.any(delta <= -1.0):
            raise DomainError("delta must be > -1 everywhere")
        object.__setattr__(self, "delta", _frozen(delta, np.float64))

    @classmethod
    def from_gaussian(cls, z) -> "DensityField":
        return cls(np.expm1(as_raster(z)))

    @property
    def shape(self) -> Shape:
        return self.delta.shape

    @property
    def eta(self) -> np.ndarray:
        """Normalized density 1 + δ."""
        return 1.0 + self.delta

    def to_gaussian(self) -> "GaussianField":
        return GaussianField(np.log1p(self.delta))


@dataclass(frozen=True, eq=False)
class GaussianField:
    """Latent Gaussian field z = log(1 + δ)."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        _require_2d(z, "z")
        if not np.all(np.isfinite(z)):
            raise DomainError("z must be finite")
        object.__setattr__(self, "z", _frozen(z, np.float64))

    @property
    def shape(self) -> Shape:
        return self.z.shape


Raster = Union[np.ndarray, GaussianField, DensityField]


def as_raster(field: Raster) -> np.ndarray:
    """Plain float64 view of a field or array."""
    if isinstance(field, GaussianField):
        return field.z
    if isinstance(field, DensityField):
        return field.delta
    return np.asarray(field, dtype=np.float64)


# ---------------------------------------------------------------------------
# Radial binning
# ---------------------------------------------------------------------------

def radial_frequency(shape: Shape) -> np.ndarray:
    """|k| in cycles/pixel for every FFT mode of a grid of the given shape."""
    height, width = shape
    ky = np.fft.fftfreq(height)[:, None]
    kx = np.fft.fftfreq(width)[None, :]
    return np.hypot(ky, kx)


def _count_modes(edges: np.ndarray, k_nonzero: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, k_nonzero, side="left") - 1
    return np.bincount(idx, minlength=len(edges) - 1)


def _merge_empty(edges: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Drop edges until every bin holds at least one mode."""
    k_nonzero = k[k > 0]
    kept = list(edges)
    while len(kept) > 2:
        empty = np.flatnonzero(_count_modes(np.asarray(kept), k_nonzero) == 0)
        if empty.size == 0:
            break
        j = int(empty[0])
        # an empty last bin merges downwards, any other bin merges upwards
        del kept[j if j == len(kept) - 2 else j + 1]
    return np.asarray(kept, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class RadialBinning:
    """Half-open (lo, hi] bins over |k|; the DC mode belongs to no bin.

    Attributes:
        shape: grid (height, width) the binning was built for
        edges: strictly increasing, edges[0] >= 0, edges[-1] >= max |k|
    """

    shape: Shape
    edges: np.ndarray

    def __post_init__(self):
        shape = (int(self.shape[0]), int(self.shape[1]))
        if shape[0] < 1 or shape[1] < 1 or shape[0] * shape[1] < 2:
            raise DimensionError(f"grid {shape} has no non-DC modes")
        edges = np.asarray(self.edges, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2:
            raise DimensionError("binning needs at least two edges")
        if not np.all(np.diff(edges) > 0) or edges[0] < 0:
            raise DomainError("bin edges must be non-negative and strictly increasing")

        k = radial_frequency(shape)
        if k.max() > edges[-1]:
            raise DomainError(f"top edge {edges[-1]} below the largest frequency {k.max()}")
        index = np.searchsorted(edges, k, side="left") - 1
        index[0, 0] = -1
        if np.any(index[k > 0] < 0):
            raise DomainError(f"first edge {edges[0]} leaves low frequencies unbinned")

        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "edges", _frozen(edges, np.float64))
        object.__setattr__(self, "_k", _frozen(k, np.float64))
        object.__setattr__(self, "_index", _frozen(index, np.int64))
        counts = np.bincount(index[index >= 0], minlength=edges.size - 1)
        object.__setattr__(self, "_counts", _frozen(counts, np.int64))

    @classmethod
    def linear(cls, shape: Shape, n_bins: Optional[int] = None) -> "RadialBinning":
        """Equal-width bins; default width is the fundamental frequency 1/min(shape)."""
        k = radial_frequency(shape)
        top = float(k.max())
        if n_bins is None:
            width = 1.0 / max(min(shape), 2)
            n = int(np.ceil(top / width - 1e-9))
            edges = width * np.arange(n + 1, dtype=np.float64)
            edges[-1] = max(edges[-1], top)
        else:
            if n_bins < 1:
                raise DomainError("n_bins must be >= 1")
            edges = np.linspace(0.0, top, n_bins + 1)
            edges[-1] = top
        return cls(shape, _merge_empty(edges, k))

    @classmethod
    def logarithmic(cls, shape: Shape, n_bins: int) -> "RadialBinning":
        """(0, k_f] then log-spaced bins up to the largest frequency."""
        if n_bins < 1:
            raise DomainError("n_bins must be >= 1")
        k = radial_frequency(shape)
        top = float(k.max())
        k_f = float(k[k > 0].min())
        if n_bins == 1 or k_f >= top:
            edges = np.array([0.0, top])
        else:
            edges = np.concatenate([[0.0], np.geomspace(k_f, top, n_bins)])
            edges[1] = k_f
            edges[-1] = top
        return cls(shape, _merge_empty(edges, k))

    @classmethod
    def build(cls, shape: Shape, n_bins: Optional[int] = None, scale: str = "log") -> "RadialBinning":
        if scale == "log":
            return cls.logarithmic(shape, n_bins or 16)
        if scale == "linear":
            return cls.linear(shape, n_bins)
        raise DomainError(f"unknown bin scale '{scale}' (expected log or linear)")

    @property
    def n_bins(self) -> int:
        return self.edges.size - 1

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def k_nyquist(self) -> float:
        """Largest radial frequency on the grid (the top edge)."""
        return float(self.edges[-1])

    @property
    def k(self) -> np.ndarray:
        return self._k

    @property
    def bin_index(self) -> np.ndarray:
        """Bin of every FFT mode; -1 at DC."""
        return self._index

    @property
    def mode_counts(self) -> np.ndarray:
        return self._counts

    def expand(self, values: Sequence[float], dc: float = 0.0) -> np.ndarray:
        """Per-mode grid carrying each bin's value; the DC mode gets `dc`."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_bins,):
            raise DimensionError(f"expected {self.n_bins} bin values, got shape {values.shape}")
        grid = np.empty(self.shape, dtype=np.float64)
        binned = self._index >= 0
        grid[binned] = values[self._index[binned]]
        grid[~binned] = dc
        return grid

    def same_as(self, other: "RadialBinning") -> bool:
        return self.shape == other.shape and np.array_equal(self.edges, other.edges)

    def require_same(self, other: "RadialBinning") -> None:
        if not self.same_as(other):
            raise DimensionError(
                f"binning mismatch: {self.shape}/{self.n_bins} bins vs {other.shape}/{other.n_bins} bins"
            )


# ---------------------------------------------------------------------------
# Raster operations
# ---------------------------------------------------------------------------

def apply_mask(values, mask) -> np.ndarray:
    """Elementwise M·x."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask)
    if values.shape != mask.shape:
        raise DimensionError(f"map shape {values.shape} != mask shape {mask.shape}")
    return values * mask


def power_grid(field: Raster) -> np.ndarray:
    """Periodogram |FFT(x)|^2 / n over the full FFT grid."""
    x = as_raster(field)
    spectrum = np.fft.fft2(x)
    return (spectrum.real ** 2 + spectrum.imag ** 2) / x.size


def radial_average(power: np.ndarray, binning: RadialBinning) -> np.ndarray:
    """Per-bin mean power, DC excluded; empty bins come back as NaN."""
    power = np.asarray(power, dtype=np.float64)
    if power.shape != binning.shape:
        raise DimensionError(f"power grid {power.shape} != binning grid {binning.shape}")
    index = binning.bin_index
    binned = index >= 0
    sums = np.bincount(index[binned], weights=power[binned], minlength=binning.n_bins)
    counts = binning.mode_counts
    out = np.full(binning.n_bins, np.nan)
    filled = counts > 0
    out[filled] = sums[filled] / counts[filled]
    return out


def lowpass(field: Raster, binning: RadialBinning, kmax: float) -> np.ndarray:
    """Zero every mode with |k| > kmax; the DC mode is always kept."""
    if kmax < 0:
        raise DomainError(f"kmax must be >= 0, got {kmax}")
    x = as_raster(field)
    if x.shape != binning.shape:
        raise DimensionError(f"field {x.shape} != binning grid {binning.shape}")
    spectrum = np.fft.fft2(x)
    spectrum[binning.k > kmax] = 0.0
    return np.fft.ifft2(spectrum).real


# ---------------------------------------------------------------------------
# DMAP1 format
# ---------------------------------------------------------------------------

DMAP_MAGIC = "DMAP1"
DMAP_DTYPES = {"f64": np.dtype("<f8"), "i64": np.dtype("<i8"), "u8": np.dtype("u1")}
DMAP_KINDS = ("counts", "mask", "density", "gaussian", "spectrum")


@dataclass(frozen=True)
class MapHeader:
    width: int
    height: int
    dtype: str
    kind: str
    header_bytes: int


def _dtype_tag(values: np.ndarray) -> str:
    if values.dtype == np.uint8 or values.dtype == np.bool_:
        return "u8"
    if np.issubdtype(values.dtype, np.integer):
        return "i64"
    if np.issubdtype(values.dtype, np.floating):
        return "f64"
    raise FormatError(f"cannot store dtype {values.dtype} in DMAP1")


def map_save(values, path: PathLike, kind: str, dtype: Optional[str] = None) -> Path:
    """Write a raster as DMAP1: one JSON header line, then raw little-endian samples."""
    values = np.asarray(as_raster(values) if not isinstance(values, np.ndarray) else values)
    if values.ndim == 1:
        values = values[None, :]
    _require_2d(values, "map")
    if kind not in DMAP_KINDS:
        raise FormatError(f"unknown kind '{kind}' (expected one of {', '.join(DMAP_KINDS)})")
    tag = dtype or _dtype_tag(values)
    if tag not in DMAP_DTYPES:
        raise FormatError(f"unknown dtype '{tag}'")
    height, width = values.shape
    header = json.dumps(
        {"magic": DMAP_MAGIC, "width": width, "height": height, "dtype": tag, "kind": kind},
        separators=(",", ":"),
    )
    payload = np.ascontiguousarray(values.astype(DMAP_DTYPES[tag])).tobytes()
    return atomic_write_bytes(path, header.encode("utf-8") + b"\n" + payload)


def _parse_header(data: bytes) -> MapHeader:
    newline = data.find(b"\n")
    if newline < 0:
        raise FormatError("missing header line terminator", offset=len(data))
    try:
        text = data[:newline].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("header is not UTF-8", offset=e.start)
    try:
        fields = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"header is not structured text: {e.msg}", offset=e.pos)
    if not isinstance(fields, dict) or fields.get("magic") != DMAP_MAGIC:
        raise FormatError(f"bad magic, expected {DMAP_MAGIC}", offset=0)

    def position(key: str) -> int:
        found = text.find(f'"{key}"')
        return len(text[:found].encode("utf-8")) if found >= 0 else 0

    for key in ("width", "height"):
        value = fields.get(key)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise FormatError(f"bad {key}: {value!r}", offset=position(key))
    if fields.get("dtype") not in DMAP_DTYPES:
        raise FormatError(f"unknown dtype {fields.get('dtype')!r}", offset=position("dtype"))
    if fields.get("kind") not in DMAP_KINDS:
        raise FormatError(f"unknown kind {fields.get('kind')!r}", offset=position("kind"))
    return MapHeader(
        width=fields["width"],
        height=fields["height"],
        dtype=fields["dtype"],
        kind=fields["kind"],
        header_bytes=newline + 1,
    )


def read_map_header(path: PathLike) -> MapHeader:
    with open(path, "rb") as handle:
        head = handle.read(4096)
    return _parse_header(head)


def map_load(path: PathLike, expect_kind: Optional[str] = None) -> np.ndarray:
    """Read a DMAP1 raster; the result has the stored dtype in native byte order."""
    data = Path(path).read_bytes()
    header = _parse_header(data)
    if expect_kind is not None and header.kind != expect_kind:
        raise FormatError(f"{path}: expected kind '{expect_kind}', found '{header.kind}'", offset=0)
    dtype = DMAP_DTYPES[header.dtype]
    expected = header.width * header.height * dtype.itemsize
    payload = data[header.header_bytes:]
    if len(payload) < expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}",
            offset=len(data),
        )
    if len(payload) > expected:
        raise FormatError(
            f"{len(payload) - expected} trailing bytes after payload",
            offset=header.header_bytes + expected,
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(header.height, header.width)
    return values.astype(dtype.newbyteorder("="))
