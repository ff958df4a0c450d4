"""
Periodic unit cell, two-phase rasters and the eps-periodic phase lookup.

Convention: ``CellRaster.values[i, j]`` is the phase of the raster cell
``[i/m, (i+1)/m] x [j/m, (j+1)/m]``, i.e. the first index runs along y1 and
the second along y2.  ``1`` marks cement paste, ``0`` aggregate.

The disk, laminate and checkerboard cells are stand-ins for a concrete
meso-structure; none of them is calibrated against real aggregate shapes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

CEMENT = "c"
AGGREGATE = "a"

GEOMETRY_KINDS = ("disk_inclusion", "laminate", "checkerboard", "uniform", "raster_file")


@dataclass(frozen=True)
class UnitCellGeometry:
    """Parametrised description of the cement/aggregate split of the unit cell.

    Only the fields relevant to ``kind`` are read:

    * ``disk_inclusion``: aggregate disk of ``radius`` centred in the cell
    * ``laminate``: cement for ``y[normal_axis] < cement_fraction``
    * ``checkerboard``: cement in the lower-left and upper-right quadrants
    * ``uniform``: the whole cell is ``phase``
    * ``raster_file``: raster read from ``path``
    """

    kind: str
    radius: float = 0.25
    normal_axis: str = "x"
    cement_fraction: float = 0.5
    phase: str = CEMENT
    path: str | None = None

    def __post_init__(self):
        if self.kind not in GEOMETRY_KINDS:
            raise ConfigurationError(f"unknown geometry kind {self.kind!r}")
        if self.kind == "disk_inclusion" and not 0.0 < self.radius < 0.5:
            raise ConfigurationError(f"disk radius must lie in (0, 0.5), got {self.radius}")
        if self.kind == "laminate":
            if self.normal_axis not in ("x", "y"):
                raise ConfigurationError(f"laminate normal_axis must be 'x' or 'y', got {self.normal_axis!r}")
            if not 0.0 <= self.cement_fraction <= 1.0:
                raise ConfigurationError(
                    f"laminate cement_fraction must lie in [0, 1], got {self.cement_fraction}")
        if self.kind == "uniform" and self.phase not in (CEMENT, AGGREGATE):
            raise ConfigurationError(f"uniform phase must be 'a' or 'c', got {self.phase!r}")
        if self.kind == "raster_file" and not self.path:
            raise ConfigurationError("raster_file geometry needs a path")

    def cement_indicator(self, y1, y2):
        """Analytic indicator of the cement phase at points of the unit cell."""
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        if self.kind == "disk_inclusion":
            inside = (y1 - 0.5) ** 2 + (y2 - 0.5) ** 2 < self.radius ** 2
            return ~inside
        if self.kind == "laminate":
            coord = y1 if self.normal_axis == "x" else y2
            return coord < self.cement_fraction
        if self.kind == "checkerboard":
            return (y1 < 0.5) == (y2 < 0.5)
        if self.kind == "uniform":
            return np.full(np.broadcast(y1, y2).shape, self.phase == CEMENT)
        raise ConfigurationError("raster_file geometry has no analytic indicator")


@dataclass(frozen=True, eq=False)
class CellRaster:
    """Binary m x m raster of the cement indicator on the unit cell."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ConfigurationError(f"raster must be square, got shape {values.shape}")
        if values.shape[0] < 1:
            raise ConfigurationError("raster must not be empty")
        if not np.all((values == 0) | (values == 1)):
            raise ConfigurationError("raster entries must be 0 or 1")
        values = values.astype(np.int8)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def cement(self) -> np.ndarray:
        return self.values.astype(float)

    @property
    def aggregate(self) -> np.ndarray:
        return 1.0 - self.cement

    def digest(self) -> str:
        """Stable content hash, used to key contrast tables."""
        h = hashlib.sha256()
        h.update(str(self.m).encode())
        h.update(np.ascontiguousarray(self.values).tobytes())
        return h.hexdigest()[:16]

    def element_values(self, resolution: int) -> np.ndarray:
        """Cement indicator per element of a ``resolution``-square cell grid.

        Returned in element order ``e = ey * resolution + ex``.
        """
        if resolution % self.m:
            raise ConfigurationError(
                f"cell grid resolution {resolution} is not a multiple of raster size {self.m}")
        q = resolution // self.m
        up = np.repeat(np.repeat(self.values, q, axis=0), q, axis=1)
        # up[ix, iy] -> element order ey * n + ex
        return up.T.ravel().astype(float)


def rasterize(geometry: UnitCellGeometry, m: int) -> CellRaster:
    """Sample the analytic geometry at raster-cell centres."""
    if m < 2:
        raise ConfigurationError(f"raster resolution must be >= 2, got {m}")
    if geometry.kind == "raster_file":
        raster = read_raster(geometry.path)
        if raster.m != m:
            raise ConfigurationError(f"raster file has m={raster.m}, requested m={m}")
        return raster
    centres = (np.arange(m) + 0.5) / m
    y1, y2 = np.meshgrid(centres, centres, indexing="ij")
    return CellRaster(geometry.cement_indicator(y1, y2).astype(np.int8))


def volume_fraction(raster: CellRaster) -> float:
    """Cement volume fraction, the cell average of the indicator."""
    return float(np.count_nonzero(raster.values)) / raster.values.size


def random_raster(m: int, seed: int, fraction: float = 0.5) -> CellRaster:
    """Seeded i.i.d. raster; each cell is cement with probability ``fraction``."""
    rng = np.random.default_rng(seed)
    return CellRaster((rng.random((m, m)) < fraction).astype(np.int8))


def cells_per_side(epsilon) -> int:
    """Return ``1/epsilon`` as an integer, refusing non-reciprocal scales."""
    eps = float(epsilon)
    if not eps > 0.0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    n = int(round(1.0 / eps))
    if n < 1 or abs(n * eps - 1.0) > 1e-9:
        raise ConfigurationError(f"1/epsilon must be an integer, got epsilon={epsilon}")
    return n


def phase_at(x, epsilon, raster: CellRaster):
    """Phase label ('a' or 'c') of chi(x/eps) at point(s) ``x`` of shape (..., 2)."""
    x = np.asarray(x, dtype=float)
    eps = float(epsilon)
    if not eps > 0.0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    y = np.mod(x / eps, 1.0)
    idx = np.minimum((y * raster.m).astype(int), raster.m - 1)
    chi = raster.values[idx[..., 0], idx[..., 1]]
    labels = np.where(chi == 1, CEMENT, AGGREGATE)
    return str(labels) if labels.ndim == 0 else labels


@dataclass(frozen=True)
class MesoTiling:
    """eps-periodic tiling of the unit square by a raster cell.

    ``macro_resolution`` elements per side must be a multiple of ``m / eps`` so
    that every element lies inside a single raster cell.
    """

    epsilon: float
    raster: CellRaster = field(repr=False)
    macro_resolution: int

    def __post_init__(self):
        n = cells_per_side(self.epsilon)
        period = n * self.raster.m
        if self.macro_resolution < 1 or self.macro_resolution % period:
            raise ConfigurationError(
                f"grid resolution {self.macro_resolution} does not resolve the microstructure: "
                f"needs a multiple of m/eps = {period}")

    @property
    def cells(self) -> int:
        return cells_per_side(self.epsilon)

    def element_cement(self) -> np.ndarray:
        """Cement indicator per macro element, order ``e = ey * N + ex``."""
        N = self.macro_resolution
        q = N // (self.cells * self.raster.m)
        idx = (np.arange(N) // q) % self.raster.m
        chi = self.raster.values[np.ix_(idx, idx)]  # [ex, ey]
        return chi.T.ravel().astype(float)


def read_raster(path) -> CellRaster:
    """Read the plain-text raster format: ``m`` then m rows of m 0/1 entries."""
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ConfigurationError(f"raster file {path} is empty")
    try:
        m = int(lines[0][0])
        rows = [[int(v) for v in ln] for ln in lines[1:]]
    except ValueError as exc:
        raise ConfigurationError(f"raster file {path}: {exc}") from None
    if len(rows) != m or any(len(r) != m for r in rows):
        raise ConfigurationError(f"raster file {path} does not hold {m} rows of {m} entries")
    return CellRaster(np.array(rows, dtype=np.int8))


def write_raster(raster: CellRaster, path) -> None:
    body = "\n".join(" ".join(str(int(v)) for v in row) for row in raster.values)
    Path(path).write_text(f"{raster.m}\n{body}\n")
