"""Discrete parallel-beam Radon operator.

Builds the system tensor L[b, i, j] (intersection length of ray b with pixel
(i, j)) by Siddon ray tracing, and provides forward projection,
backprojection and the mode-1 unfolding L_(1).

Usage:
    geometry = ScanGeometry.standard(grid_size=64, num_angles=30)
    system = build_system_tensor(geometry)
    sinogram = forward_project(system, image)
    initial = back_project(system, sinogram)

Conventions:
    - Pixels are unit squares and the K x K grid is centred at the origin.
      Row i grows downward, column j grows rightward, so pixel (i, j) covers
      x in [-K/2 + j, -K/2 + j + 1) and y in (K/2 - i - 1, K/2 - i].
    - Ray (theta, tau) is the line x*cos(theta) + y*sin(theta) = tau.
    - Ray index b = angle_index * num_beamlets + beamlet_index.
    - vec(W) is column-major: pixel (i, j) is column i + j*K of L_(1).
"""

import concurrent.futures
import math
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from tqdm import tqdm

from tomography.lib.errors import ConfigError, DimensionMismatchError

# Segments shorter than this are numerical noise from corner crossings.
MIN_LENGTH = 1e-12
_PARALLEL_EPS = 1e-15

Image = np.ndarray


def evenly_sampled_angles(
    num_angles: int, start: float = 1.0, stop: float = 2.0 * math.pi
) -> Tuple[float, ...]:
    """Angles evenly spaced over [start, stop), right endpoint excluded.

    With the defaults, angle t is 1 + t * (2*pi - 1) / num_angles radians.
    """
    if num_angles < 1:
        raise ConfigError(f"num_angles must be >= 1, got {num_angles}")
    step = (stop - start) / num_angles
    return tuple(start + t * step for t in range(num_angles))


@dataclass(frozen=True)
class ScanGeometry:
    """Parallel-beam scan: K x K grid, angle set and a uniform detector.

    Beamlets are detector-bin centres spread over
    [-detector_halfwidth, +detector_halfwidth]; the half-width defaults to
    num_beamlets / 2 pixel units (unit beamlet spacing).
    """

    grid_size: int
    angles: Tuple[float, ...]
    num_beamlets: int
    detector_halfwidth: Optional[float] = None

    def __post_init__(self):
        if int(self.grid_size) != self.grid_size or self.grid_size < 1:
            raise ConfigError(f"grid_size must be a positive integer, got {self.grid_size}")
        if int(self.num_beamlets) != self.num_beamlets or self.num_beamlets < 1:
            raise ConfigError(
                f"num_beamlets must be a positive integer, got {self.num_beamlets}"
            )
        angles = tuple(float(a) for a in self.angles)
        if not angles:
            raise ConfigError("angle list must not be empty")
        if not all(math.isfinite(a) for a in angles):
            raise ConfigError("angles must be finite")
        object.__setattr__(self, "grid_size", int(self.grid_size))
        object.__setattr__(self, "num_beamlets", int(self.num_beamlets))
        object.__setattr__(self, "angles", angles)

        halfwidth = self.detector_halfwidth
        if halfwidth is None:
            halfwidth = self.num_beamlets / 2.0
        if not (halfwidth > 0 and math.isfinite(halfwidth)):
            raise ConfigError(f"detector_halfwidth must be positive, got {halfwidth}")
        object.__setattr__(self, "detector_halfwidth", float(halfwidth))

    @classmethod
    def standard(
        cls, grid_size: int = 64, num_angles: int = 30, num_beamlets: int = 91
    ) -> "ScanGeometry":
        """Evenly sampled angles over [1, 2*pi) with a fully covering detector."""
        geometry = cls(
            grid_size=grid_size,
            angles=evenly_sampled_angles(num_angles),
            num_beamlets=num_beamlets,
        )
        if not geometry.full_coverage:
            raise ConfigError(
                f"{num_beamlets} beamlets do not cover a {grid_size}x{grid_size} grid "
                f"from every angle (need more than {math.sqrt(2) * grid_size:.2f})"
            )
        return geometry

    @property
    def num_angles(self) -> int:
        return len(self.angles)

    @property
    def num_rays(self) -> int:
        return self.num_angles * self.num_beamlets

    @property
    def full_coverage(self) -> bool:
        diagonal = math.sqrt(2.0) * self.grid_size
        return (
            self.num_beamlets > diagonal
            and self.detector_halfwidth >= diagonal / 2.0
        )

    @property
    def beamlet_offsets(self) -> np.ndarray:
        spacing = 2.0 * self.detector_halfwidth / self.num_beamlets
        return -self.detector_halfwidth + (np.arange(self.num_beamlets) + 0.5) * spacing

    def ray_index(self, angle_index: int, beamlet_index: int) -> int:
        return angle_index * self.num_beamlets + beamlet_index


@dataclass(frozen=True, eq=False)
class SparseSystemTensor:
    """The discrete Radon tensor L of shape (|Theta|*|T|, K, K).

    Contract:
      - Stored as parallel arrays (rays, rows, cols, lengths), one entry per
        non-zero (b, i, j), sorted b-major.
      - All lengths are strictly positive and no (b, i, j) key repeats.
      - Immutable; the flat-matrix views are computed once and shared.
    """

    geometry: ScanGeometry
    rays: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.rays, self.rows, self.cols)]
        lengths = np.array(self.lengths, dtype=float)
        if len({a.shape for a in arrays} | {lengths.shape}) != 1 or lengths.ndim != 1:
            raise DimensionMismatchError("system tensor entry arrays must be 1-D and equal length")

        K = self.geometry.grid_size
        rays, rows, cols = (a.astype(np.int64) for a in arrays)
        if lengths.size:
            if not np.all(np.isfinite(lengths)) or np.any(lengths <= 0):
                raise ConfigError("system tensor lengths must be finite and strictly positive")
            if rays.min() < 0 or rays.max() >= self.geometry.num_rays:
                raise ConfigError("ray index out of range for the scan geometry")
            if min(rows.min(), cols.min()) < 0 or max(rows.max(), cols.max()) >= K:
                raise ConfigError("pixel index out of range for the grid size")
            keys = (rays * K + rows) * K + cols
            if np.unique(keys).size != keys.size:
                raise ConfigError("system tensor contains duplicate (b, i, j) entries")

        for name, value in (("rays", rays), ("rows", rows), ("cols", cols), ("lengths", lengths)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_entries(
        cls, geometry: ScanGeometry, entries: Sequence[Tuple[int, int, int, float]]
    ) -> "SparseSystemTensor":
        """Build from (b, i, j, length) tuples, reordered b-major."""
        if len(entries) == 0:
            empty = np.zeros(0, dtype=np.int64)
            return cls(geometry, empty, empty, empty, np.zeros(0))
        table = np.asarray(entries, dtype=float)
        if table.ndim != 2 or table.shape[1] != 4:
            raise ConfigError("entries must be (b, i, j, length) tuples")
        rays, rows, cols = (table[:, k].astype(np.int64) for k in range(3))
        order = np.lexsort((rows, cols, rays))
        return cls(geometry, rays[order], rows[order], cols[order], table[order, 3])

    @property
    def shape(self) -> Tuple[int, int, int]:
        K = self.geometry.grid_size
        return (self.geometry.num_rays, K, K)

    @property
    def nnz(self) -> int:
        return int(self.lengths.size)

    @property
    def entries(self) -> List[Tuple[int, int, int, float]]:
        return [
            (int(b), int(i), int(j), float(length))
            for b, i, j, length in zip(self.rays, self.rows, self.cols, self.lengths)
        ]

    @cached_property
    def unfolded(self) -> sparse.csr_matrix:
        """L_(1): rows are rays, column i + j*K is pixel (i, j)."""
        K = self.geometry.grid_size
        return self._csr(self.rows + self.cols * K)

    @cached_property
    def unfolded_transposed(self) -> sparse.csr_matrix:
        """L_(1) of the image transpose: column j + i*K is pixel (i, j)."""
        K = self.geometry.grid_size
        return self._csr(self.cols + self.rows * K)

    def _csr(self, columns: np.ndarray) -> sparse.csr_matrix:
        B, K, _ = self.shape
        matrix = sparse.csr_matrix(
            (self.lengths, (self.rays, columns)), shape=(B, K * K)
        )
        matrix.sort_indices()
        return matrix


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Measurement vector s = vec(S), indexed by b = angle * |T| + beamlet."""

    values: np.ndarray
    geometry: ScanGeometry

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size != self.geometry.num_rays:
            raise DimensionMismatchError(
                f"sinogram has {values.size} values, geometry expects {self.geometry.num_rays}"
            )
        if not np.all(np.isfinite(values)):
            raise ConfigError("sinogram values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def as_matrix(self) -> np.ndarray:
        """Sinogram as an (angles, beamlets) array."""
        return self.values.reshape(self.geometry.num_angles, self.geometry.num_beamlets)

    def __len__(self) -> int:
        return self.values.size


SinogramLike = Union[Sinogram, np.ndarray, Sequence[float]]


# -------- Ray tracing --------
def trace_ray(
    grid_size: int, angle: float, offset: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Siddon traversal of one ray through the K x K unit-pixel grid.

    Args:
        grid_size: Pixels per side K
        angle: Ray angle theta in radians
        offset: Signed detector offset tau

    Returns:
        (rows, cols, lengths) of every pixel the ray crosses, in traversal order
    """
    half = grid_size / 2.0
    cos_t, sin_t = math.cos(angle), math.sin(angle)
    # Foot point and unit direction of the line x*cos + y*sin = offset.
    px, py = offset * cos_t, offset * sin_t
    dx, dy = -sin_t, cos_t

    empty = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
    t_lo, t_hi = -math.inf, math.inf
    crossings = []
    planes = np.arange(grid_size + 1, dtype=float) - half

    # x-planes: a ray parallel to them must lie in [-K/2, K/2).
    if abs(dx) < _PARALLEL_EPS:
        if not (-half <= px < half):
            return empty
    else:
        t_a, t_b = (-half - px) / dx, (half - px) / dx
        t_lo, t_hi = max(t_lo, min(t_a, t_b)), min(t_hi, max(t_a, t_b))
        crossings.append((planes - px) / dx)

    # y-planes: a ray parallel to them must lie in (-K/2, K/2].
    if abs(dy) < _PARALLEL_EPS:
        if not (-half < py <= half):
            return empty
    else:
        t_a, t_b = (-half - py) / dy, (half - py) / dy
        t_lo, t_hi = max(t_lo, min(t_a, t_b)), min(t_hi, max(t_a, t_b))
        crossings.append((planes - py) / dy)

    if not t_hi > t_lo:
        return empty

    alphas = np.concatenate([np.array([t_lo, t_hi])] + crossings)
    alphas = np.unique(alphas[(alphas >= t_lo) & (alphas <= t_hi)])
    lengths = np.diff(alphas)
    mids = 0.5 * (alphas[:-1] + alphas[1:])

    cols = np.floor(px + mids * dx + half).astype(np.int64)
    rows = np.floor(half - (py + mids * dy)).astype(np.int64)
    np.clip(cols, 0, grid_size - 1, out=cols)
    np.clip(rows, 0, grid_size - 1, out=rows)

    keep = lengths > MIN_LENGTH
    return rows[keep], cols[keep], lengths[keep]


def _trace_angle(geometry: ScanGeometry, angle_index: int):
    """Trace every beamlet of one angle; returns concatenated entry arrays."""
    angle = geometry.angles[angle_index]
    rays, rows, cols, lengths = [], [], [], []
    for beamlet_index, offset in enumerate(geometry.beamlet_offsets):
        r, c, seg = trace_ray(geometry.grid_size, angle, float(offset))
        rays.append(np.full(seg.size, geometry.ray_index(angle_index, beamlet_index)))
        rows.append(r)
        cols.append(c)
        lengths.append(seg)
    return (
        np.concatenate(rays).astype(np.int64),
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(lengths),
    )


# -------- Public API --------
def build_system_tensor(
    geometry: ScanGeometry, max_workers: int = 1, show_progress: bool = False
) -> SparseSystemTensor:
    """Exact intersection lengths of every beamlet with every pixel.

    Args:
        geometry: Scan geometry (grid size, angles, detector)
        max_workers: Threads used to trace angles; assembly order is fixed,
            so the result is identical for any worker count
        show_progress: Show a tqdm bar over angles

    Returns:
        SparseSystemTensor with entries sorted b-major
    """
    if not isinstance(geometry, ScanGeometry):
        raise ConfigError("build_system_tensor expects a ScanGeometry")

    indices = range(geometry.num_angles)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        # map() yields in submission order regardless of completion order
        blocks = list(
            tqdm(
                pool.map(lambda a: _trace_angle(geometry, a), indices),
                total=geometry.num_angles,
                desc="Tracing rays",
                disable=not show_progress,
            )
        )

    rays, rows, cols, lengths = (np.concatenate(part) for part in zip(*blocks))
    K = geometry.grid_size
    # Duplicate (b, i, j) segments are summed by the COO -> CSR conversion.
    matrix = sparse.csr_matrix((lengths, (rays, rows + cols * K)), shape=(geometry.num_rays, K * K))
    matrix.sum_duplicates()
    matrix.sort_indices()
    matrix.eliminate_zeros()

    coo = matrix.tocoo()
    return SparseSystemTensor(
        geometry=geometry,
        rays=coo.row.astype(np.int64),
        rows=(coo.col % K).astype(np.int64),
        cols=(coo.col // K).astype(np.int64),
        lengths=coo.data,
    )


def _check_image(L: SparseSystemTensor, W: Image) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    K = L.geometry.grid_size
    if W.shape != (K, K):
        raise DimensionMismatchError(f"image shape {W.shape} does not match grid {K}x{K}")
    return W


def _sinogram_values(L: SparseSystemTensor, s: SinogramLike) -> np.ndarray:
    values = s.values if isinstance(s, Sinogram) else np.asarray(s, dtype=float).reshape(-1)
    if values.size != L.geometry.num_rays:
        raise DimensionMismatchError(
            f"sinogram length {values.size} does not match {L.geometry.num_rays} rays"
        )
    return values


def forward_project(L: SparseSystemTensor, W: Image) -> Sinogram:
    """s[b] = sum_ij L[b, i, j] * W[i, j]."""
    W = _check_image(L, W)
    return Sinogram(L.unfolded @ W.ravel(order="F"), L.geometry)


def back_project(L: SparseSystemTensor, s: SinogramLike) -> Image:
    """W[i, j] = sum_b L[b, i, j] * s[b]; the exact adjoint of forward_project."""
    values = _sinogram_values(L, s)
    K = L.geometry.grid_size
    return np.asarray(L.unfolded.T @ values).reshape((K, K), order="F")


def unfold_mode1(L: SparseSystemTensor) -> sparse.csr_matrix:
    """Mode-1 unfolding L_(1) of shape (|Theta|*|T|, K^2), column-major pixels."""
    return L.unfolded.copy()
