"""Run tomographic reconstruction experiments from the command line.

Subcommands:
    phantom       write the ground-truth image and report its rank
    project       write the sinogram CSV and the system tensor triplet file
    reconstruct   one TR or LSQR reconstruction with its iteration log
    sweep-angles  TR at every rank against LSQR over several angle counts
    noise-study   TR against LSQR on shared noisy sinograms
    rank-report   TR at several ranks plus LSQR, with parameter counts

Settings are resolved as built-in defaults < TOMOGRAPHY_* environment
variables (.env is read) < --config key=value file < explicit flags.

Exit codes: 0 success, 1 usage or config error, 2 numerical abort,
130 interrupted.

Example:
    python -m tomography.experiment_cli reconstruct --phantom circle-triangle \\
        --K 64 --angles 30 --solver tr --rank 5 --lambda 1.5 --rho 1e-5
"""

import argparse
import concurrent.futures
import functools
import logging
import os
import pathlib
import sys
from dataclasses import dataclass, fields
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import dotenv
from tqdm import tqdm

from tomography.lib.cp_tensor import CPFactorPair, parameter_count
from tomography.lib.data_files import load_factors, read_key_values
from tomography.lib.errors import ConfigError, NumericalAbortError
from tomography.lib.phantom_io import PHANTOMS, NoiseSpec, Phantom, add_gaussian_noise, make_phantom
from tomography.lib.radon_geometry import (
    Image,
    ScanGeometry,
    Sinogram,
    SparseSystemTensor,
    back_project,
    build_system_tensor,
    forward_project,
    unfold_mode1,
)
from tomography.lib.regression_solvers import (
    INIT_METHODS,
    ElasticNetConfig,
    LSQRConfig,
    ReconRecord,
    TRConfig,
    lsqr_solve,
    tr_reconstruct,
)
from tomography.lib.result_writer import ExperimentWriter

SOLVERS = ("tr", "lsqr")
ENV_PREFIX = "TOMOGRAPHY_"

SWEEP_COLUMNS = ["angles", "solver", "rank", "rmse", "iters", "status"]
NOISE_COLUMNS = ["noise", "solver", "rank", "rmse", "iters", "converged", "status"]
RANK_COLUMNS = ["solver", "rank", "parameters", "rmse", "iters", "converged", "status"]

# Row statuses that carry a reconstruction.
FINISHED = ("ok", "max_iters", "diverged")


def _int_list(raw: str) -> List[int]:
    return [int(v) for v in raw.replace(",", " ").split()]


def _float_list(raw: str) -> List[float]:
    return [float(v) for v in raw.replace(",", " ").split()]


# key in config files / TOMOGRAPHY_<KEY> -> (argparse dest, parser)
CONFIG_KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "phantom": ("phantom", str),
    "K": ("K", int),
    "angles": ("angles", _int_list),
    "beamlets": ("beamlets", int),
    "solver": ("solver", str),
    "rank": ("ranks", _int_list),
    "lambda": ("lam", float),
    "rho": ("rho", float),
    "eps": ("eps", float),
    "max_iters": ("max_iters", int),
    "init": ("init", str),
    "factors": ("factors", pathlib.Path),
    "seed": ("seed", int),
    "lsqr_iters": ("lsqr_iters", int),
    "atol": ("atol", float),
    "noise": ("noise", _float_list),
    "out": ("out", pathlib.Path),
    "workers": ("workers", int),
}

COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "sweep-angles": {"angles": list(range(10, 101, 10)), "ranks": list(range(1, 13)), "rho": 0.0},
    "noise-study": {"noise": [0.0, 0.01, 0.02]},
    "rank-report": {"ranks": list(range(1, 7)), "rho": 0.0},
}

COMMANDS = {
    "phantom": "Write the ground-truth phantom image",
    "project": "Write the sinogram CSV and system tensor triplet file",
    "reconstruct": "Run one TR or LSQR reconstruction",
    "sweep-angles": "Compare TR ranks with LSQR over several angle counts",
    "noise-study": "Compare TR with LSQR on noisy sinograms",
    "rank-report": "Reconstruct at several ranks and report parameter counts",
}


# -------- Configuration --------
@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved settings of one CLI run.

    Contract:
      - angles, ranks and noise are non-empty tuples.
      - phantom, solver and init name known ids.
      - Subcommands that run a single reconstruction take the only entry of
        each list and reject longer lists.
    """

    phantom: str = "circle-triangle"
    K: int = 64
    angles: Tuple[int, ...] = (30,)
    beamlets: int = 91
    solver: str = "tr"
    ranks: Tuple[int, ...] = (5,)
    lam: float = 1.5
    rho: float = 1e-5
    eps: float = 1e-4
    max_iters: int = 100
    init: str = "backprojection"
    factors: Optional[pathlib.Path] = None
    seed: int = 0
    lsqr_iters: int = 200
    atol: float = 1e-8
    noise: Tuple[float, ...] = (0.0,)
    out: pathlib.Path = pathlib.Path("results")
    workers: int = 1
    timing: bool = False
    show_progress: bool = True

    def __post_init__(self):
        for name in ("angles", "ranks", "noise"):
            values = tuple(getattr(self, name))
            if not values:
                raise ConfigError(f"{name} must not be empty")
            object.__setattr__(self, name, values)
        if self.phantom not in PHANTOMS:
            raise ConfigError(
                f"unknown phantom {self.phantom!r}; choose one of {', '.join(sorted(PHANTOMS))}"
            )
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.init not in INIT_METHODS:
            raise ConfigError(f"init must be one of {INIT_METHODS}, got {self.init!r}")
        if self.init == "provided" and self.factors is None:
            raise ConfigError("--init provided needs --factors DIR")
        if any(a < 1 for a in self.angles):
            raise ConfigError(f"angle counts must be positive, got {list(self.angles)}")
        if any(r < 1 for r in self.ranks):
            raise ConfigError(f"ranks must be positive, got {list(self.ranks)}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        for p in self.noise:
            NoiseSpec(p, self.seed)
        # Surface solver setting errors before any work starts.
        ElasticNetConfig(rho=self.rho, lam=self.lam)
        TRConfig(rank=self.ranks[0], max_iters=self.max_iters, tol=self.eps)
        self.lsqr_config()
        object.__setattr__(self, "out", pathlib.Path(self.out))

    @classmethod
    def from_file(cls, path: pathlib.Path) -> "ExperimentConfig":
        """Settings from a key=value file (the --config format) over the defaults."""
        return cls(**_file_overrides(path), show_progress=False)

    @classmethod
    def from_namespace(cls, args: argparse.Namespace) -> "ExperimentConfig":
        values = {f.name: getattr(args, f.name) for f in fields(cls) if hasattr(args, f.name)}
        values["show_progress"] = not getattr(args, "quiet", False)
        return cls(**values)

    def geometry(self, num_angles: int) -> ScanGeometry:
        return ScanGeometry.standard(
            grid_size=self.K, num_angles=num_angles, num_beamlets=self.beamlets
        )

    def tr_config(self, rank: int) -> TRConfig:
        init_factors: Optional[CPFactorPair] = None
        if self.init == "provided":
            init_factors = load_factors(self.factors)
        return TRConfig(
            rank=rank,
            elastic_net=ElasticNetConfig(rho=self.rho, lam=self.lam),
            max_iters=self.max_iters,
            tol=self.eps,
            init=self.init,
            seed=self.seed,
            init_factors=init_factors,
        )

    def lsqr_config(self) -> LSQRConfig:
        return LSQRConfig(max_iters=self.lsqr_iters, atol=self.atol)

    def single(self, name: str):
        """The only value of a list setting, for single-run subcommands."""
        values = getattr(self, name)
        if len(values) != 1:
            raise ConfigError(f"this subcommand takes exactly one {name} value, got {list(values)}")
        return values[0]


def _field_default(dest: str) -> Any:
    value = getattr(ExperimentConfig, dest)
    # nargs="+" options parse to lists
    return list(value) if isinstance(value, tuple) else value


# argparse defaults, read off the ExperimentConfig fields.
COMMON_DEFAULTS: Dict[str, Any] = {dest: _field_default(dest) for dest, _ in CONFIG_KEYS.values()}


class _ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors as ConfigError so they exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--phantom", help="Phantom id: %s (default: %%(default)s)" % ", ".join(sorted(PHANTOMS)))
    p.add_argument("--K", type=int, help="Pixels per image side (default: %(default)s)")
    p.add_argument("--angles", type=int, nargs="+", help="Angle count(s) (default: %(default)s)")
    p.add_argument("--beamlets", type=int, help="Beamlets per angle (default: %(default)s)")
    p.add_argument("--solver", help="tr or lsqr (default: %(default)s)")
    p.add_argument("--rank", dest="ranks", type=int, nargs="+", help="TR rank(s) (default: %(default)s)")
    p.add_argument("--lambda", dest="lam", type=float, help="Elastic-net mix in [1, 2] (default: %(default)s)")
    p.add_argument("--rho", type=float, help="Penalty weight (default: %(default)s)")
    p.add_argument("--eps", type=float, help="TR objective-change tolerance (default: %(default)s)")
    p.add_argument("--max-iters", dest="max_iters", type=int, help="TR sweep cap (default: %(default)s)")
    p.add_argument("--init", help="TR start: %s (default: %%(default)s)" % ", ".join(INIT_METHODS))
    p.add_argument("--factors", type=pathlib.Path, help="Factor directory for --init provided")
    p.add_argument("--lsqr-iters", dest="lsqr_iters", type=int, help="LSQR iteration cap (default: %(default)s)")
    p.add_argument("--atol", type=float, help="LSQR tolerance (default: %(default)s)")
    p.add_argument("--noise", type=float, nargs="+", help="Noise level(s) as fractions (default: %(default)s)")
    p.add_argument("--seed", type=int, help="Seed for noise and random init (default: %(default)s)")
    p.add_argument("--out", type=pathlib.Path, help="Output directory (default: %(default)s)")
    p.add_argument("--workers", type=int, help="Worker threads (default: %(default)s)")
    p.add_argument("--config", type=pathlib.Path, default=None, help="key=value settings file")
    p.add_argument("--timing", action="store_true", help="Write wall-clock seconds to iteration CSVs")
    p.add_argument("--quiet", action="store_true", help="Hide progress bars")


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = _ArgumentParser(description="Low-rank tensor regression tomography experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_arguments(p)
        p.set_defaults(**{**COMMON_DEFAULTS, **COMMAND_DEFAULTS.get(name, {})})
        subparsers[name] = p
    return parser, subparsers


def _convert(values: Mapping[str, str], source: str) -> Dict[str, Any]:
    converted = {}
    for key, raw in values.items():
        dest, parse = CONFIG_KEYS[key]
        try:
            converted[dest] = parse(raw)
        except ValueError as e:
            raise ConfigError(f"{source}: {key}={raw!r} is not valid") from e
    return converted


def _file_overrides(path: pathlib.Path) -> Dict[str, Any]:
    return _convert(read_key_values(path, CONFIG_KEYS), str(path))


def _env_overrides(environ: Mapping[str, str]) -> Dict[str, Any]:
    found = {
        key: environ[ENV_PREFIX + key.upper()]
        for key in CONFIG_KEYS
        if ENV_PREFIX + key.upper() in environ
    }
    return _convert(found, "environment")


def parse_args(
    argv: Optional[Sequence[str]] = None, environ: Optional[Mapping[str, str]] = None
) -> argparse.Namespace:
    """Parse the command line with environment and config-file defaults applied.

    Env and --config values become subcommand defaults, so flags given on the
    command line still win.
    """
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    overrides = _env_overrides(os.environ if environ is None else environ)
    if args.config is not None:
        overrides.update(_file_overrides(args.config))
    if overrides:
        subparsers[args.command].set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


# -------- Runs --------
class RunOutcome(NamedTuple):
    label: str
    solver: str
    rank: Optional[int]
    image: Image
    records: List[ReconRecord]
    converged: bool
    diverged: bool
    factors: Optional[CPFactorPair]

    @property
    def iters(self) -> int:
        return self.records[-1].iteration

    @property
    def status(self) -> str:
        if self.diverged:
            return "diverged"
        return "ok" if self.converged else "max_iters"


def run_label(solver: str, rank: Optional[int]) -> str:
    return f"tr_r{rank}" if solver == "tr" else "lsqr"


def run_solver(
    L: SparseSystemTensor,
    s: Sinogram,
    phantom: Phantom,
    cfg: ExperimentConfig,
    solver: str,
    rank: Optional[int] = None,
) -> RunOutcome:
    """Reconstruct with TR(rank) or LSQR; both start from the backprojection."""
    if solver == "tr":
        result = tr_reconstruct(L, s, cfg.tr_config(rank), ground_truth=phantom.image)
        return RunOutcome(
            run_label("tr", rank), "tr", rank, result.image, result.records,
            result.converged, result.diverged, result.factors,
        )
    lsqr = cfg.lsqr_config()
    K = L.geometry.grid_size
    x0 = back_project(L, s).ravel(order="F")
    result = lsqr_solve(
        unfold_mode1(L), s.values, lsqr.max_iters, lsqr.atol, x0=x0, ground_truth=phantom.image
    )
    image = result.x.reshape((K, K), order="F")
    return RunOutcome("lsqr", "lsqr", None, image, result.records, result.converged, False, None)


def _build_system(cfg: ExperimentConfig, num_angles: int) -> SparseSystemTensor:
    return build_system_tensor(
        cfg.geometry(num_angles), max_workers=cfg.workers, show_progress=cfg.show_progress
    )


def _measure(L: SparseSystemTensor, phantom: Phantom, cfg: ExperimentConfig, noise: float) -> Sinogram:
    return add_gaussian_noise(forward_project(L, phantom.image), NoiseSpec(noise, cfg.seed))


def _metadata(cfg: ExperimentConfig, num_angles: int, noise: float, outcome: RunOutcome) -> Dict[str, Any]:
    meta: Dict[str, Any] = {
        "phantom": cfg.phantom,
        "K": cfg.K,
        "angles": num_angles,
        "beamlets": cfg.beamlets,
        "noise": noise,
        "seed": cfg.seed,
        "solver": outcome.solver,
        "iters": outcome.iters,
        "converged": outcome.converged,
    }
    if outcome.solver == "tr":
        meta.update(
            {
                "rank": outcome.rank,
                "lambda": cfg.lam,
                "rho": cfg.rho,
                "eps": cfg.eps,
                "max_iters": cfg.max_iters,
                "init": cfg.init,
                "diverged": outcome.diverged,
            }
        )
    else:
        meta.update({"lsqr_iters": cfg.lsqr_iters, "atol": cfg.atol})
    return meta


def _commit(
    writer: ExperimentWriter,
    label: str,
    outcome: RunOutcome,
    phantom: Phantom,
    metadata: Dict[str, Any],
    with_logs: bool,
) -> Dict[str, Any]:
    sidecar = writer.write_reconstruction(label, outcome.image, phantom.image, metadata)
    if with_logs:
        writer.write_records(label, outcome.records)
        if outcome.factors is not None:
            writer.write_factors(label, outcome.factors, outcome.iters)
    return sidecar


class Cell(NamedTuple):
    """One reconstruction of a study grid."""

    angles: int
    noise: float
    solver: str
    rank: Optional[int]
    label: str


def _run_cell(
    cell: Cell,
    L: SparseSystemTensor,
    s: Sinogram,
    phantom: Phantom,
    cfg: ExperimentConfig,
    writer: ExperimentWriter,
    with_logs: bool,
) -> Dict[str, Any]:
    """Run one cell; failures become a status instead of an exception."""
    row: Dict[str, Any] = {
        "angles": cell.angles,
        "noise": cell.noise,
        "solver": cell.solver,
        "rank": cell.rank,
        "rmse": None,
        "iters": None,
        "converged": None,
        "status": "error",
    }
    try:
        outcome = run_solver(L, s, phantom, cfg, cell.solver, cell.rank)
    except NumericalAbortError as e:
        print(f"⚠️  {cell.label}: numerical abort: {e}", file=sys.stderr)
        row["status"] = "aborted"
        return row
    except ValueError as e:
        print(f"⚠️  {cell.label}: {e}", file=sys.stderr)
        return row

    sidecar = _commit(
        writer, cell.label, outcome, phantom, _metadata(cfg, cell.angles, cell.noise, outcome), with_logs
    )
    # RMSE of the clamped image, as written to the PGM
    row.update(
        rmse=sidecar["rmse_clamped"],
        iters=outcome.iters,
        converged=outcome.converged,
        status=outcome.status,
    )
    return row


def _run_cells(
    cells: Sequence[Cell],
    problems: Mapping[Tuple[int, float], Tuple[SparseSystemTensor, Sinogram]],
    phantom: Phantom,
    cfg: ExperimentConfig,
    writer: ExperimentWriter,
    with_logs: bool,
    desc: str,
) -> List[Dict[str, Any]]:
    """Run cells on a thread pool; rows come back in cell order."""

    def work(cell: Cell) -> Dict[str, Any]:
        L, s = problems[(cell.angles, cell.noise)]
        return _run_cell(cell, L, s, phantom, cfg, writer, with_logs)

    with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        # map() yields in submission order regardless of completion order
        return list(
            tqdm(pool.map(work, cells), total=len(cells), desc=desc, disable=not cfg.show_progress)
        )


def _study_exit_code(rows: Sequence[Mapping[str, Any]]) -> int:
    if any(row["status"] in FINISHED for row in rows):
        return 0
    return 2 if any(row["status"] == "aborted" for row in rows) else 1


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.6g}"


def _print_box(title: str, header: str, lines: Sequence[str]) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    print(f"  {header}")
    for line in lines:
        print(f"  {line}")
    print("=" * 60)


def exit_codes(command: Callable[[ExperimentConfig], int]) -> Callable[[ExperimentConfig], int]:
    """Map library errors raised by a subcommand onto exit codes."""

    @functools.wraps(command)
    def wrapper(config: ExperimentConfig) -> int:
        try:
            return command(config)
        except NumericalAbortError as e:
            print(f"\n❌ Numerical abort:\n{e}", file=sys.stderr)
            return 2
        except (ConfigError, ValueError, OSError) as e:
            print(f"\n❌ Error:\n{e}", file=sys.stderr)
            return 1

    return wrapper


# -------- Subcommands --------
@exit_codes
def cmd_phantom(config: ExperimentConfig) -> int:
    phantom = make_phantom(config.phantom, config.K)
    with ExperimentWriter(out_dir=config.out, timing=config.timing) as writer:
        path = writer.write_ground_truth(phantom)

    print(
        f"phantom={phantom.name} K={phantom.grid_size} measured_rank={phantom.measured_rank} "
        f"min={phantom.image.min():.6g} max={phantom.image.max():.6g}"
    )
    print(f"\n✓ Ground truth written to {path}")
    return 0


@exit_codes
def cmd_project(config: ExperimentConfig) -> int:
    num_angles = config.single("angles")
    noise = config.single("noise")
    phantom = make_phantom(config.phantom, config.K)

    print(f"Projecting {phantom.name} (K={config.K}) at {num_angles} angles x {config.beamlets} beamlets")
    L = _build_system(config, num_angles)
    s = _measure(L, phantom, config, noise)

    with ExperimentWriter(out_dir=config.out, timing=config.timing) as writer:
        writer.write_ground_truth(phantom)
        sinogram_path = writer.write_sinogram(s)
        tensor_path = writer.write_system_tensor(L)

    _print_box(
        "✓ Projection complete",
        f"{'item':20s} {'value':>20s}",
        [
            f"{'rays':20s} {len(s):>20,}",
            f"{'tensor entries':20s} {L.nnz:>20,}",
            f"{'noise level':20s} {noise:>20g}",
            f"{'sinogram':20s} {sinogram_path.name:>20s}",
            f"{'system tensor':20s} {tensor_path.name:>20s}",
        ],
    )
    return 0


@exit_codes
def cmd_reconstruct(config: ExperimentConfig) -> int:
    """Reconstruct once, write PGM + sidecar + iteration CSV, print the metrics line."""
    num_angles = config.single("angles")
    noise = config.single("noise")
    rank = config.single("ranks") if config.solver == "tr" else None
    phantom = make_phantom(config.phantom, config.K)

    print(
        f"Reconstructing {phantom.name} (K={config.K}, {num_angles} angles, "
        f"{config.beamlets} beamlets, noise {noise:g}) with {run_label(config.solver, rank)}"
    )
    L = _build_system(config, num_angles)
    s = _measure(L, phantom, config, noise)
    outcome = run_solver(L, s, phantom, config, config.solver, rank)

    with ExperimentWriter(out_dir=config.out, timing=config.timing) as writer:
        writer.write_ground_truth(phantom)
        sidecar = _commit(
            writer, outcome.label, outcome, phantom, _metadata(config, num_angles, noise, outcome), True
        )

    print(f"\n✓ Outputs written to {config.out}")
    print(f"rmse={sidecar['rmse_clamped']:.6g} iters={outcome.iters} converged={outcome.converged}")
    return 0


@exit_codes
def cmd_sweep_angles(config: ExperimentConfig) -> int:
    """Every (angle count, solver/rank) cell once; tidy CSV sweep_angles.csv."""
    noise = config.single("noise")
    phantom = make_phantom(config.phantom, config.K)

    print(
        f"Sweeping {len(config.angles)} angle counts x ({len(config.ranks)} TR ranks + LSQR) "
        f"on {phantom.name}, K={config.K}, rho={config.rho:g}"
    )
    problems = {}
    for num_angles in config.angles:
        L = _build_system(config, num_angles)
        problems[(num_angles, noise)] = (L, _measure(L, phantom, config, noise))

    cells = []
    for num_angles in config.angles:
        for solver, rank in [("lsqr", None)] + [("tr", r) for r in config.ranks]:
            label = f"sweep/a{num_angles:03d}_{run_label(solver, rank)}"
            cells.append(Cell(num_angles, noise, solver, rank, label))

    with ExperimentWriter(out_dir=config.out, timing=config.timing) as writer:
        writer.write_ground_truth(phantom)
        rows = _run_cells(cells, problems, phantom, config, writer, False, "Sweep cells")
        path = writer.write_table("sweep_angles.csv", rows, SWEEP_COLUMNS)

    lines = []
    for num_angles in config.angles:
        block = [r for r in rows if r["angles"] == num_angles and r["rmse"] is not None]
        lsqr = next((r["rmse"] for r in block if r["solver"] == "lsqr"), None)
        tr = [r for r in block if r["solver"] == "tr"]
        best = min(tr, key=lambda r: r["rmse"]) if tr else None
        mark = "✓" if best and lsqr is not None and best["rmse"] < lsqr else " "
        lines.append(
            f"{num_angles:>6d} {_fmt(lsqr):>12s} "
            f"{(str(best['rank']) if best else '-'):>8s} {_fmt(best['rmse'] if best else None):>12s} {mark}"
        )
    _print_box(f"✓ Sweep complete: {path}", f"{'angles':>6s} {'LSQR rmse':>12s} {'best R':>8s} {'TR rmse':>12s}", lines)
    return _study_exit_code(rows)


@exit_codes
def cmd_noise_study(config: ExperimentConfig) -> int:
    """TR and LSQR per noise level on one shared noisy sinogram each."""
    num_angles = config.single("angles")
    rank = config.single("ranks")
    phantom = make_phantom(config.phantom, config.K)

    print(
        f"Noise study on {phantom.name} (K={config.K}, {num_angles} angles): "
        f"TR({rank}) vs LSQR at levels {', '.join(f'{p:g}' for p in config.noise)}"
    )
    L = _build_system(config, num_angles)
    problems = {(num_angles, p): (L, _measure(L, phantom, config, p)) for p in config.noise}

    cells = [
        Cell(num_angles, p, solver, r, f"noise-{p:g}/{run_label(solver, r)}")
        for p in config.noise
        for solver, r in (("tr", rank), ("lsqr", None))
    ]
    with ExperimentWriter(out_dir=config.out, timing=config.timing) as writer:
        writer.write_ground_truth(phantom)
        rows = _run_cells(cells, problems, phantom, config, writer, True, "Noise levels")
        path = writer.write_table("noise_study.csv", rows, NOISE_COLUMNS)

    lines = []
    for p in config.noise:
        by_solver = {r["solver"]: r["rmse"] for r in rows if r["noise"] == p}
        tr, lsqr = by_solver.get("tr"), by_solver.get("lsqr")
        mark = "✓" if tr is not None and lsqr is not None and tr < lsqr else " "
        lines.append(f"{p:>8g} {_fmt(tr):>14s} {_fmt(lsqr):>14s} {mark}")
    _print_box(f"✓ Noise study complete: {path}", f"{'noise':>8s} {'TR rmse':>14s} {'LSQR rmse':>14s}", lines)
    return _study_exit_code(rows)


@exit_codes
def cmd_rank_report(config: ExperimentConfig) -> int:
    """Reconstruct at each rank (plus LSQR) and compare parameter counts with K^2."""
    num_angles = config.single("angles")
    noise = config.single("noise")
    phantom = make_phantom(config.phantom, config.K)
    pixels = config.K * config.K

    print(f"Ground truth {phantom.name}: K={config.K}, measured rank {phantom.measured_rank}")
    L = _build_system(config, num_angles)
    problems = {(num_angles, noise): (L, _measure(L, phantom, config, noise))}
    cells = [Cell(num_angles, noise, "tr", r, f"rank_report/tr_r{r}") for r in config.ranks]
    cells.append(Cell(num_angles, noise, "lsqr", None, "rank_report/lsqr"))

    with ExperimentWriter(out_dir=config.out, timing=config.timing) as writer:
        writer.write_ground_truth(phantom)
        rows = _run_cells(cells, problems, phantom, config, writer, False, "Ranks")
        for row in rows:
            row["parameters"] = parameter_count(config.K, row["rank"]) if row["solver"] == "tr" else pixels
        path = writer.write_table("rank_report.csv", rows, RANK_COLUMNS)

    lines = [
        f"{run_label(r['solver'], r['rank']):>8s} {r['parameters']:>10,d} "
        f"{r['parameters'] / pixels:>9.1%} {_fmt(r['rmse']):>12s} {r['status']}"
        for r in rows
    ]
    _print_box(
        f"✓ Rank report complete: {path}",
        f"{'model':>8s} {'params':>10s} {'of K^2':>9s} {'rmse':>12s} status",
        lines,
    )
    return _study_exit_code(rows)


COMMAND_HANDLERS: Dict[str, Callable[[ExperimentConfig], int]] = {
    "phantom": cmd_phantom,
    "project": cmd_project,
    "reconstruct": cmd_reconstruct,
    "sweep-angles": cmd_sweep_angles,
    "noise-study": cmd_noise_study,
    "rank-report": cmd_rank_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    dotenv.load_dotenv(".env")
    logging.basicConfig(level=logging.WARNING, format="⚠️  %(name)s: %(message)s")
    try:
        args = parse_args(argv)
        config = ExperimentConfig.from_namespace(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return 1

    try:
        return COMMAND_HANDLERS[args.command](config)
    except KeyboardInterrupt:
        print("\n\n⚠️  Operation cancelled by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
