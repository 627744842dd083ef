"""Ground-truth phantoms, PGM image I/O, sinogram noise and the RMSE metric.

Phantom ids:
    circle-triangle  analytic disc + triangle, any K >= 16
    brain            axial slice of scikit-image's brain MRI volume, resampled to K x K

Noise uses numpy's PCG64 generator (default_rng) and its ziggurat normal
sampler, so a (sinogram, seed) pair always yields the same noisy data.
"""

import functools
import logging
import pathlib
import re
from dataclasses import dataclass
from typing import Callable, Dict, Union

import numpy as np
import skimage.data
import skimage.transform

from tomography.lib.cp_tensor import matrix_rank
from tomography.lib.errors import ConfigError, DimensionMismatchError
from tomography.lib.radon_geometry import Image, Sinogram

logger = logging.getLogger(__name__)

# skimage.data.brain() is a stack of 10 axial MRI slices, 256 x 256 each.
BRAIN_SLICE = 5

CIRCLE_INTENSITY = 1.0
TRIANGLE_INTENSITY = 0.6
MIN_PHANTOM_SIZE = 16

PathLike = Union[str, pathlib.Path]


@dataclass(frozen=True, eq=False)
class Phantom:
    """Ground-truth image with values in [0, 1] and its measured rank."""

    image: Image
    name: str
    measured_rank: int

    @classmethod
    def from_image(cls, image: Image, name: str) -> "Phantom":
        image = np.array(image, dtype=float)
        if image.ndim != 2 or image.shape[0] != image.shape[1]:
            raise DimensionMismatchError(f"phantom {name!r} must be square, got {image.shape}")
        if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
            raise ConfigError(f"phantom {name!r} values must lie in [0, 1]")
        image.setflags(write=False)
        return cls(image=image, name=name, measured_rank=matrix_rank(image))

    @property
    def grid_size(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian noise level as a fraction of the noise-free maximum."""

    percent: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.percent) and self.percent >= 0.0):
            raise ConfigError(f"noise level must be non-negative, got {self.percent}")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


# -------- Phantoms --------
def _pixel_centres(K: int):
    """(x, y) image coordinates of pixel centres: x = column + 0.5, y = row + 0.5."""
    coords = np.arange(K) + 0.5
    x, y = np.meshgrid(coords, coords)
    return x, y


def _inside_triangle(x, y, a, b, c) -> np.ndarray:
    """Points on the boundary count as inside."""

    def edge(p, q):
        return (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0])

    d1, d2, d3 = edge(a, b), edge(b, c), edge(c, a)
    has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(has_neg & has_pos)


def make_circle_triangle_phantom(K: int) -> Phantom:
    """Filled disc (intensity 1.0) and filled triangle (0.6) on a zero background.

    Shapes are given in (x, y) = (column, row) image coordinates scaled by K;
    a pixel takes a shape's value when its centre lies inside the shape.
    """
    if K < MIN_PHANTOM_SIZE:
        raise ConfigError(f"circle-triangle phantom needs K >= {MIN_PHANTOM_SIZE}, got {K}")
    x, y = _pixel_centres(K)
    image = np.zeros((K, K))

    triangle = _inside_triangle(
        x, y, (0.55 * K, 0.75 * K), (0.85 * K, 0.55 * K), (0.85 * K, 0.9 * K)
    )
    image[triangle] = TRIANGLE_INTENSITY

    disc = (x - 0.3 * K) ** 2 + (y - 0.3 * K) ** 2 <= (0.15 * K) ** 2
    image[disc] = CIRCLE_INTENSITY
    return Phantom.from_image(image, "circle-triangle")


@functools.lru_cache(maxsize=1)
def _brain_slice() -> np.ndarray:
    """The raw MRI slice; scikit-image downloads the volume once and caches it on disk."""
    try:
        volume = skimage.data.brain()
    except (ImportError, OSError, ValueError) as e:
        raise ConfigError(f"brain MRI volume is unavailable: {e}") from e
    image = np.asarray(volume[BRAIN_SLICE], dtype=float)
    image.setflags(write=False)
    return image


def load_brain_phantom(K: int = 64) -> Phantom:
    """Brain MRI slice resampled to K x K and scaled to a peak of 1."""
    if K < MIN_PHANTOM_SIZE:
        raise ConfigError(f"brain phantom needs K >= {MIN_PHANTOM_SIZE}, got {K}")
    image = skimage.transform.resize(
        _brain_slice(), (K, K), order=1, anti_aliasing=True, preserve_range=True
    )
    image = np.clip(image, 0.0, None)
    peak = float(image.max())
    if not peak > 0:
        raise ConfigError("brain MRI slice is blank")
    logger.debug("Brain slice %d resampled to %dx%d", BRAIN_SLICE, K, K)
    return Phantom.from_image(image / peak, "brain")


PHANTOMS: Dict[str, Callable[[int], Phantom]] = {
    "circle-triangle": make_circle_triangle_phantom,
    "brain": load_brain_phantom,
}


def make_phantom(name: str, K: int) -> Phantom:
    """Build a phantom by string id."""
    try:
        factory = PHANTOMS[name]
    except KeyError as e:
        raise ConfigError(
            f"unknown phantom {name!r}; choose one of {', '.join(sorted(PHANTOMS))}"
        ) from e
    return factory(K)


# -------- PGM --------
_PGM_HEADER = re.compile(
    rb"^(P[25])"
    rb"(?:\s+|\s*#[^\r\n]*[\r\n])+"
    rb"(\d+)(?:\s+|\s*#[^\r\n]*[\r\n])+"
    rb"(\d+)(?:\s+|\s*#[^\r\n]*[\r\n])+"
    rb"(\d+)\s"
)


def load_image_pgm(path: PathLike) -> Image:
    """Read a square P2 (ASCII) or P5 (binary) PGM, normalized to [0, 1].

    Binary files with maxval > 255 are 16-bit big-endian, as netpbm specifies.
    """
    path = pathlib.Path(path)
    with open(path, "rb") as f:
        buffer = f.read()

    match = _PGM_HEADER.match(buffer)
    if match is None:
        raise ConfigError(f"Not a P2/P5 PGM file: '{path}'")
    magic, width, height, maxval = match.groups()
    width, height, maxval = int(width), int(height), int(maxval)
    if not 0 < maxval < 65536:
        raise ConfigError(f"PGM maxval {maxval} out of range in '{path}'")
    if width != height:
        raise ConfigError(f"PGM image '{path}' is {width}x{height}; only square images are supported")

    count = width * height
    body = buffer[match.end():]
    if magic == b"P5":
        dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
        if len(body) < count * dtype.itemsize:
            raise ConfigError(f"PGM file '{path}' is truncated")
        pixels = np.frombuffer(body, dtype=dtype, count=count)
    else:
        text = re.sub(rb"#[^\r\n]*", b"", body)
        try:
            pixels = np.array(text.decode("ascii").split()[:count], dtype=np.int64)
        except ValueError as e:
            raise ConfigError(f"PGM file '{path}' has non-integer pixel data") from e
        if pixels.size < count:
            raise ConfigError(f"PGM file '{path}' is truncated")

    if pixels.max(initial=0) > maxval:
        raise ConfigError(f"PGM file '{path}' has pixels above maxval {maxval}")
    if pixels.min(initial=0) < 0:
        raise ConfigError(f"PGM file '{path}' has negative pixel values")
    return pixels.reshape((height, width)).astype(float) / maxval


def save_image_pgm(
    image: Image, path: PathLike, maxval: int = 65535, binary: bool = True
) -> pathlib.Path:
    """Write an image with values in [0, 1] as PGM; values outside are clipped."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise DimensionMismatchError(f"PGM output needs a 2-D image, got {image.shape}")
    if not 0 < maxval < 65536:
        raise ConfigError(f"maxval must be in 1..65535, got {maxval}")
    if not np.all(np.isfinite(image)):
        raise ConfigError("cannot write non-finite pixels to PGM")

    clipped = np.count_nonzero((image < 0.0) | (image > 1.0))
    if clipped:
        logger.warning("Clipping %d pixels outside [0, 1] while writing %s", clipped, path)
    levels = np.rint(np.clip(image, 0.0, 1.0) * maxval).astype(np.int64)

    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = image.shape
    if binary:
        dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
        header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
        with open(path, "wb") as f:
            f.write(header)
            f.write(levels.astype(dtype).tobytes())
    else:
        with open(path, "w", encoding="ascii", newline="\n") as f:
            f.write(f"P2\n{width} {height}\n{maxval}\n")
            for row in levels:
                f.write(" ".join(str(v) for v in row) + "\n")
    return path


# -------- Noise and metrics --------
def add_gaussian_noise(s: Sinogram, spec: NoiseSpec) -> Sinogram:
    """s' = s + eta, eta ~ N(0, (p * max(s))^2) i.i.d.; p == 0 returns s."""
    if spec.percent == 0.0:
        return s
    sigma = spec.percent * float(np.max(s.values))
    rng = np.random.default_rng(int(spec.seed))
    noise = rng.standard_normal(s.values.size) * sigma
    return Sinogram(s.values + noise, s.geometry)


def rmse(a: Image, b: Image) -> float:
    """sqrt(mean((a - b)^2)) over all pixels."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"rmse needs equal shapes, got {a.shape} and {b.shape}")
    diff = a - b
    return float(np.sqrt(np.mean(diff * diff)))
