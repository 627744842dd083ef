"""Text formats for exchanging tomography data with other tools.

Formats:
    sinogram CSV     angle_index,beamlet_index,value (one row per ray, b order)
    triplet file     "b i j count=N shape=BxKxK" header, then N "b i j length" lines
    iteration CSV    iter,objective,datafit,penalty,rmse,seconds
    factor CSVs      W1.csv / W2.csv (K rows, one column per rank) + factors.json
    settings file    flat key=value file, read with python-dotenv

Readers validate headers before parsing and raise ConfigError naming the
file, the expected header and the header found.

Usage:
    write_sinogram_csv(sinogram, "out/sinogram.csv")
    sinogram = read_sinogram_csv("out/sinogram.csv", geometry)
    settings = read_key_values("run.conf", allowed_keys)
"""

import json
import pathlib
import re
from typing import Dict, Iterable, List, Optional, Union

import dotenv
import numpy as np
import pandas as pd

from tomography.lib.cp_tensor import CPFactorPair
from tomography.lib.errors import ConfigError, DimensionMismatchError
from tomography.lib.radon_geometry import ScanGeometry, Sinogram, SparseSystemTensor
from tomography.lib.regression_solvers import ReconRecord

PathLike = Union[str, pathlib.Path]

SINOGRAM_COLUMNS = ["angle_index", "beamlet_index", "value"]
RECORD_COLUMNS = ["iter", "objective", "datafit", "penalty", "rmse", "seconds"]
FACTOR_FILES = ("W1.csv", "W2.csv")
FACTOR_SIDECAR = "factors.json"

_TRIPLET_HEADER = re.compile(r"^b i j count=(\d+) shape=(\d+)x(\d+)x(\d+)$")


def _check_header(path: pathlib.Path, expected: List[str], found: List[str]) -> None:
    if list(found) != list(expected):
        raise ConfigError(
            f"CSV header mismatch for {path.name}. Expected: {expected}, Got: {list(found)}"
        )


def _read_csv(path: PathLike, columns: List[str]) -> pd.DataFrame:
    path = pathlib.Path(path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e
    _check_header(path, columns, frame.columns)
    return frame


# -------- Sinograms --------
def write_sinogram_csv(s: Sinogram, path: PathLike) -> pathlib.Path:
    geometry = s.geometry
    angle_index, beamlet_index = np.divmod(np.arange(len(s)), geometry.num_beamlets)
    frame = pd.DataFrame(
        {"angle_index": angle_index, "beamlet_index": beamlet_index, "value": s.values}
    )
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def read_sinogram_csv(path: PathLike, geometry: ScanGeometry) -> Sinogram:
    """Read a sinogram CSV; rows may come in any order but must cover every ray once."""
    frame = _read_csv(path, SINOGRAM_COLUMNS)
    try:
        angle_index = frame["angle_index"].to_numpy(dtype=np.int64)
        beamlet_index = frame["beamlet_index"].to_numpy(dtype=np.int64)
        values = frame["value"].to_numpy(dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Non-numeric sinogram data in {path}") from e

    if len(frame) != geometry.num_rays:
        raise DimensionMismatchError(
            f"{path} has {len(frame)} rows, geometry expects {geometry.num_rays}"
        )
    if (
        angle_index.min() < 0
        or angle_index.max() >= geometry.num_angles
        or beamlet_index.min() < 0
        or beamlet_index.max() >= geometry.num_beamlets
    ):
        raise ConfigError(f"{path} has (angle, beamlet) indices outside the geometry")
    rays = geometry.ray_index(angle_index, beamlet_index)
    if np.unique(rays).size != rays.size:
        raise ConfigError(f"{path} lists some rays more than once")

    ordered = np.empty(geometry.num_rays)
    ordered[rays] = values
    return Sinogram(ordered, geometry)


# -------- System tensor triplets --------
def write_system_tensor(L: SparseSystemTensor, path: PathLike) -> pathlib.Path:
    B, K, _ = L.shape
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"b i j count={L.nnz} shape={B}x{K}x{K}\n")
        for b, i, j, length in zip(L.rays, L.rows, L.cols, L.lengths):
            f.write(f"{b} {i} {j} {float(length)!r}\n")
    return path


def read_system_tensor(path: PathLike, geometry: ScanGeometry) -> SparseSystemTensor:
    """Read a triplet file; the header shape must agree with the geometry."""
    path = pathlib.Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        match = _TRIPLET_HEADER.match(header)
        if match is None:
            raise ConfigError(
                f"Triplet header mismatch for {path.name}. "
                f"Expected: 'b i j count=N shape=BxKxK', Got: {header!r}"
            )
        count, B, K1, K2 = (int(v) for v in match.groups())
        expected = (geometry.num_rays, geometry.grid_size, geometry.grid_size)
        if (B, K1, K2) != expected:
            raise DimensionMismatchError(
                f"{path.name} holds a {B}x{K1}x{K2} tensor, geometry needs "
                f"{expected[0]}x{expected[1]}x{expected[2]}"
            )
        tokens = f.read().split()

    if len(tokens) != 4 * count:
        raise ConfigError(f"{path.name} declares count={count} but has {len(tokens) / 4:g} entries")
    table = np.array(tokens, dtype=str).reshape(count, 4)
    try:
        rays, rows, cols = (table[:, k].astype(np.int64) for k in range(3))
        lengths = table[:, 3].astype(float)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Malformed entry in {path.name}") from e

    order = np.lexsort((rows, cols, rays))
    if count and np.any(order != np.arange(count)):
        raise ConfigError(f"{path.name} entries are not in ascending b-major order")
    return SparseSystemTensor(geometry, rays, rows, cols, lengths)


# -------- Iteration logs --------
def records_frame(records: Iterable[ReconRecord], include_seconds: bool = False) -> pd.DataFrame:
    """ReconRecords as a DataFrame; seconds are left empty unless include_seconds."""
    rows = [
        {
            "iter": r.iteration,
            "objective": r.objective,
            "datafit": r.datafit,
            "penalty": r.penalty,
            "rmse": r.rmse,
            "seconds": r.seconds if include_seconds else None,
        }
        for r in records
    ]
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def write_records_csv(
    records: Iterable[ReconRecord], path: PathLike, include_seconds: bool = False
) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records_frame(records, include_seconds).to_csv(path, index=False, na_rep="")
    return path


def read_records_csv(path: PathLike) -> List[ReconRecord]:
    frame = _read_csv(path, RECORD_COLUMNS)

    def optional(value) -> Optional[float]:
        return None if pd.isna(value) else float(value)

    return [
        ReconRecord(
            iteration=int(row.iter),
            objective=float(row.objective),
            datafit=float(row.datafit),
            penalty=float(row.penalty),
            rmse=optional(row.rmse),
            seconds=optional(row.seconds) or 0.0,
        )
        for row in frame.itertuples(index=False)
    ]


# -------- Factor matrices --------
def save_factors(f: CPFactorPair, directory: PathLike, iteration: int) -> pathlib.Path:
    """Write W1.csv, W2.csv and a factors.json sidecar (K, R, iteration)."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    columns = [f"r{r + 1}" for r in range(f.rank)]
    for name, W in zip(FACTOR_FILES, (f.W1, f.W2)):
        pd.DataFrame(W, columns=columns).to_csv(directory / name, index=False)
    sidecar = {"K": f.grid_size, "R": f.rank, "iteration": int(iteration)}
    with open(directory / FACTOR_SIDECAR, "w", encoding="utf-8") as fp:
        json.dump(sidecar, fp, indent=2, sort_keys=True)
        fp.write("\n")
    return directory


def load_factors(directory: PathLike) -> CPFactorPair:
    directory = pathlib.Path(directory)
    try:
        with open(directory / FACTOR_SIDECAR, "r", encoding="utf-8") as fp:
            sidecar = json.load(fp)
        K, R = int(sidecar["K"]), int(sidecar["R"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Malformed {FACTOR_SIDECAR} in {directory}") from e

    columns = [f"r{r + 1}" for r in range(R)]
    W1, W2 = (_read_csv(directory / name, columns).to_numpy(dtype=float) for name in FACTOR_FILES)
    if W1.shape != (K, R) or W2.shape != (K, R):
        raise DimensionMismatchError(
            f"factor CSVs in {directory} are {W1.shape} and {W2.shape}, sidecar says ({K}, {R})"
        )
    return CPFactorPair(W1, W2)


# -------- Settings files --------
def read_key_values(path: PathLike, allowed: Iterable[str]) -> Dict[str, str]:
    """Parse a flat key=value file, rejecting keys outside allowed."""
    path = pathlib.Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    values = {key.strip(): value for key, value in dotenv.dotenv_values(path).items()}
    allowed = set(allowed)
    unknown = sorted(k for k in values if k not in allowed)
    if unknown:
        raise ConfigError(f"Unknown keys in {path.name}: {', '.join(unknown)}")
    missing = sorted(k for k, v in values.items() if v is None or v.strip() == "")
    if missing:
        raise ConfigError(f"Keys without a value in {path.name}: {', '.join(missing)}")
    return {k: v.strip() for k, v in values.items()}
