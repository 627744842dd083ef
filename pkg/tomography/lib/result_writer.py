"""Output directory writer for reconstruction experiments.

Writes reconstructed images, their metadata sidecars, iteration logs and
summary tables under one output directory. Commits are serialized by a lock,
so sweep workers can share a single writer.

Usage:
    with ExperimentWriter(out_dir="./results") as writer:
        writer.write_ground_truth(phantom)
        writer.write_reconstruction("tr_r5", image, phantom.image, metadata)
        writer.write_records("tr_r5", result.records)
        writer.write_table("sweep_angles.csv", rows, SWEEP_COLUMNS)

Output files (names depend on the run):
    ground_truth.pgm / ground_truth.json
    <label>.pgm / <label>.json       16-bit reconstruction + clamp window
    <label>_iterations.csv           iter,objective,datafit,penalty,rmse,seconds
    <label>_factors/                 W1.csv, W2.csv, factors.json (TR runs)
    <table>.csv                      sweep / noise / rank summaries
"""

import json
import pathlib
import threading
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from tomography.lib.cp_tensor import CPFactorPair
from tomography.lib.data_files import (
    save_factors,
    write_records_csv,
    write_sinogram_csv,
    write_system_tensor,
)
from tomography.lib.errors import ConfigError
from tomography.lib.phantom_io import Phantom, load_image_pgm, rmse, save_image_pgm
from tomography.lib.radon_geometry import Image, Sinogram, SparseSystemTensor
from tomography.lib.regression_solvers import ReconRecord

PGM_MAXVAL = 65535
# Reconstructions are clamped to [0, CLAMP_FACTOR * max(ground truth)].
CLAMP_FACTOR = 1.5


def clamp_window(ground_truth: Image) -> tuple:
    upper = CLAMP_FACTOR * float(np.max(ground_truth))
    if not upper > 0:
        raise ConfigError("ground truth must have a positive maximum to set the clamp window")
    return 0.0, upper


def load_reconstruction(pgm_path: pathlib.Path) -> Image:
    """Read a written reconstruction back in ground-truth intensity units."""
    pgm_path = pathlib.Path(pgm_path)
    with open(pgm_path.with_suffix(".json"), "r", encoding="utf-8") as f:
        lower, upper = json.load(f)["clamp"]
    return lower + load_image_pgm(pgm_path) * (upper - lower)


class ExperimentWriter:
    """Writer that commits experiment outputs to one directory.

    Contract:
      - Every commit goes through a single lock; safe to share across threads.
      - Outputs depend only on their inputs: wall time is written only when
        timing=True, JSON keys are sorted.
      - written lists committed paths in commit order.
    """

    def __init__(self, out_dir: str = "./results", timing: bool = False):
        """Initialize the writer.

        Args:
            out_dir: Directory where outputs will be written
            timing: Include wall-clock seconds in iteration CSVs
        """
        self.out_dir = pathlib.Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.timing = timing
        self.written: List[pathlib.Path] = []
        self._lock = threading.Lock()
        self._closed = False

    def _path(self, name: str) -> pathlib.Path:
        if self._closed:
            raise ConfigError("ExperimentWriter is closed")
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def _write_json(self, path: pathlib.Path, payload: Mapping[str, Any]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")

    # -------- Images --------
    def write_ground_truth(self, phantom: Phantom, name: str = "ground_truth") -> pathlib.Path:
        with self._lock:
            path = save_image_pgm(phantom.image, self._path(f"{name}.pgm"), maxval=PGM_MAXVAL)
            self._write_json(
                path.with_suffix(".json"),
                {
                    "clamp": [0.0, 1.0],
                    "K": phantom.grid_size,
                    "measured_rank": phantom.measured_rank,
                    "phantom": phantom.name,
                },
            )
            self.written.append(path)
            return path

    def write_reconstruction(
        self,
        label: str,
        image: Image,
        ground_truth: Image,
        metadata: Optional[Mapping[str, Any]] = None,
    ) -> Dict[str, Any]:
        """Clamp, rescale to [0, 1] and write a 16-bit PGM plus JSON sidecar.

        Returns:
            The sidecar contents: clamp window, clipped pixel count, RMSE of
            the raw and of the clamped reconstruction, and metadata
        """
        image = np.asarray(image, dtype=float)
        lower, upper = clamp_window(ground_truth)
        clipped = int(np.count_nonzero((image < lower) | (image > upper)))
        clamped = np.clip(image, lower, upper)
        sidecar = dict(metadata or {})
        sidecar.update(
            {
                "clamp": [lower, upper],
                "clipped_pixels": clipped,
                "rmse": rmse(image, ground_truth),
                "rmse_clamped": rmse(clamped, ground_truth),
            }
        )
        with self._lock:
            path = save_image_pgm(
                (clamped - lower) / (upper - lower), self._path(f"{label}.pgm"), maxval=PGM_MAXVAL
            )
            self._write_json(path.with_suffix(".json"), sidecar)
            self.written.append(path)
        return sidecar

    # -------- Tables --------
    def write_records(self, label: str, records: Iterable[ReconRecord]) -> pathlib.Path:
        with self._lock:
            path = write_records_csv(
                records, self._path(f"{label}_iterations.csv"), include_seconds=self.timing
            )
            self.written.append(path)
            return path

    def write_factors(self, label: str, factors: CPFactorPair, iteration: int) -> pathlib.Path:
        with self._lock:
            path = save_factors(factors, self._path(f"{label}_factors"), iteration)
            self.written.append(path)
            return path

    def write_table(
        self, name: str, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]
    ) -> pathlib.Path:
        """Write rows as a CSV with the given column order; None becomes empty."""
        # object dtype keeps integer columns with gaps (rank of LSQR rows) as ints
        frame = pd.DataFrame(list(rows), columns=list(columns), dtype=object)
        with self._lock:
            path = self._path(name)
            frame.to_csv(path, index=False, na_rep="")
            self.written.append(path)
            return path

    # -------- Measurement data --------
    def write_sinogram(self, s: Sinogram, name: str = "sinogram.csv") -> pathlib.Path:
        with self._lock:
            path = write_sinogram_csv(s, self._path(name))
            self.written.append(path)
            return path

    def write_system_tensor(self, L: SparseSystemTensor, name: str = "system_tensor.txt") -> pathlib.Path:
        with self._lock:
            path = write_system_tensor(L, self._path(name))
            self.written.append(path)
            return path

    # -------- Resource Management --------
    def close(self):
        """Refuse further commits."""
        with self._lock:
            self._closed = True

    def __enter__(self):
        """Context manager entry."""
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Context manager exit."""
        self.close()
