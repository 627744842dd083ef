import json
import os
import re

import numpy as np
import pandas as pd
import pytest

import tomography.experiment_cli as cli
from tomography.lib.cp_tensor import CPFactorPair
from tomography.lib.data_files import read_sinogram_csv, read_system_tensor, save_factors
from tomography.lib.errors import ConfigError, NumericalAbortError
from tomography.lib.phantom_io import rmse
from tomography.lib.radon_geometry import ScanGeometry, build_system_tensor
from tomography.lib.regression_solvers import ElasticNetConfig, LSQRConfig
from tomography.lib.result_writer import load_reconstruction

SMALL = ["--K", "16", "--beamlets", "23", "--angles", "12", "--quiet"]
METRICS = re.compile(r"^rmse=(\S+) iters=(\d+) converged=(True|False)$", re.MULTILINE)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    """Run every CLI test from an empty directory without TOMOGRAPHY_* variables."""
    for key in list(os.environ):
        if key.startswith(cli.ENV_PREFIX):
            monkeypatch.delenv(key)
    monkeypatch.chdir(tmp_path)


def run(*argv):
    return cli.main(list(argv))


def sidecar(path):
    return json.loads(path.read_text())


# -------- Argument resolution --------
def test_built_in_defaults():
    args = cli.parse_args(["reconstruct"], environ={})
    assert args.ranks == [5]
    assert args.lam == 1.5
    assert args.rho == 1e-5
    assert args.angles == [30]
    assert args.beamlets == 91


def test_subcommand_defaults():
    sweep = cli.parse_args(["sweep-angles"], environ={})
    assert sweep.angles == list(range(10, 101, 10))
    assert sweep.ranks == list(range(1, 13))
    assert sweep.rho == 0.0
    assert cli.parse_args(["noise-study"], environ={}).noise == [0.0, 0.01, 0.02]
    assert cli.parse_args(["rank-report"], environ={}).ranks == [1, 2, 3, 4, 5, 6]


def test_environment_then_config_then_flags(tmp_path):
    environ = {"TOMOGRAPHY_RANK": "3", "TOMOGRAPHY_LAMBDA": "1.2", "TOMOGRAPHY_ANGLES": "10,20"}
    args = cli.parse_args(["reconstruct"], environ=environ)
    assert (args.ranks, args.lam, args.angles) == ([3], 1.2, [10, 20])

    config = tmp_path / "run.conf"
    config.write_text("rank=4\nnoise=0.01 0.02\n")
    args = cli.parse_args(["reconstruct", "--config", str(config)], environ=environ)
    assert (args.ranks, args.lam, args.noise) == ([4], 1.2, [0.01, 0.02])

    args = cli.parse_args(["reconstruct", "--config", str(config), "--rank", "6"], environ=environ)
    assert args.ranks == [6]


def test_bad_settings_raise_config_error(tmp_path):
    with pytest.raises(ConfigError):
        cli.parse_args(["reconstruct"], environ={"TOMOGRAPHY_K": "abc"})
    config = tmp_path / "bad.conf"
    config.write_text("colour=blue\n")
    with pytest.raises(ConfigError, match="Unknown keys"):
        cli.parse_args(["reconstruct", "--config", str(config)], environ={})
    with pytest.raises(ConfigError):
        cli.parse_args(["reconstruct", "--bogus"], environ={})


def test_experiment_config_validation():
    with pytest.raises(ConfigError):
        cli.ExperimentConfig(solver="cg")
    with pytest.raises(ConfigError):
        cli.ExperimentConfig(init="provided")
    with pytest.raises(ConfigError):
        cli.ExperimentConfig(lam=3.0)
    with pytest.raises(ConfigError):
        cli.ExperimentConfig(noise=(-0.1,))
    with pytest.raises(ConfigError):
        cli.ExperimentConfig(ranks=())
    with pytest.raises(ConfigError):
        cli.ExperimentConfig(ranks=(1, 2)).single("ranks")


def test_parser_defaults_match_config_defaults():
    args = cli.parse_args(["reconstruct"], environ={})
    assert cli.ExperimentConfig.from_namespace(args) == cli.ExperimentConfig()


# -------- Settings files --------
def test_tr_settings_file(tmp_path):
    path = tmp_path / "tr.conf"
    path.write_text("# TR(3)\nsolver=tr\nrank=3\nlambda=1.25\nrho=0.001\neps=1e-6\nmax_iters=40\nseed=9\n")
    cfg = cli.ExperimentConfig.from_file(path)
    tr = cfg.tr_config(cfg.single("ranks"))
    assert tr.rank == 3
    assert tr.elastic_net == ElasticNetConfig(rho=0.001, lam=1.25)
    assert (tr.tol, tr.max_iters, tr.seed, tr.init) == (1e-6, 40, 9, "backprojection")


def test_empty_settings_file_uses_defaults(tmp_path):
    path = tmp_path / "empty.conf"
    path.write_text("")
    cfg = cli.ExperimentConfig.from_file(path)
    assert cfg == cli.ExperimentConfig(show_progress=False)
    tr = cfg.tr_config(5)
    assert (tr.elastic_net.rho, tr.elastic_net.lam, tr.max_iters, tr.tol) == (1e-5, 1.5, 100, 1e-4)


def test_lsqr_settings_file(tmp_path):
    path = tmp_path / "lsqr.conf"
    path.write_text("solver=lsqr\nlsqr_iters=50\natol=1e-10\n")
    cfg = cli.ExperimentConfig.from_file(path)
    assert cfg.solver == "lsqr"
    assert cfg.lsqr_config() == LSQRConfig(max_iters=50, atol=1e-10)


def test_provided_factors_in_settings_file(tmp_path):
    f = CPFactorPair(np.ones((4, 2)), np.full((4, 2), 0.5))
    directory = save_factors(f, tmp_path / "start", iteration=3)
    path = tmp_path / "tr.conf"
    path.write_text(f"rank=2\ninit=provided\nfactors={directory}\n")
    tr = cli.ExperimentConfig.from_file(path).tr_config(2)
    assert tr.init == "provided"
    assert np.array_equal(tr.init_factors.W2, f.W2)


@pytest.mark.parametrize(
    "text, message",
    [
        ("rank=3\ncolour=blue\n", "Unknown keys"),
        ("rank=three\n", "not valid"),
        ("rho=inf\n", "finite"),
        ("rank\n", "without a value"),
        ("solver=cg\n", "solver must be"),
        ("lambda=3\n", "lambda"),
    ],
)
def test_bad_settings_files(tmp_path, text, message):
    path = tmp_path / "bad.conf"
    path.write_text(text)
    with pytest.raises(ConfigError, match=message):
        cli.ExperimentConfig.from_file(path)


# -------- Exit codes --------
def test_config_errors_exit_with_one(capsys):
    assert run("reconstruct", "--K", "8", "--quiet") == 1
    assert run("reconstruct", "--bogus") == 1
    assert run("reconstruct", *SMALL, "--rank", "1", "2") == 1
    assert run("reconstruct", *SMALL, "--lambda", "0.5") == 1
    assert "❌" in capsys.readouterr().err


def test_numerical_abort_exits_with_two(monkeypatch, tmp_path):
    def abort(*args, **kwargs):
        raise NumericalAbortError("objective became non-finite")

    monkeypatch.setattr(cli, "tr_reconstruct", abort)
    assert run("reconstruct", *SMALL, "--rank", "2", "--out", "out") == 2

    # LSQR rows still finish, so the study succeeds with aborted TR rows
    assert run("noise-study", *SMALL, "--rank", "2", "--lsqr-iters", "5", "--out", "mixed") == 0
    table = pd.read_csv(tmp_path / "mixed" / "noise_study.csv")
    assert list(table["status"])[0] == "aborted"
    assert not (tmp_path / "mixed" / "noise-0" / "tr_r2.pgm").exists()

    monkeypatch.setattr(cli, "lsqr_solve", abort)
    assert run("rank-report", *SMALL, "--rank", "2", "--out", "none") == 2


def test_overflowing_start_exits_with_two(tmp_path, capsys):
    f = CPFactorPair(np.full((16, 2), 1e200), np.full((16, 2), 1e200))
    save_factors(f, tmp_path / "huge", iteration=0)
    argv = ["reconstruct", *SMALL, "--rank", "2", "--init", "provided", "--factors", "huge"]
    assert run(*argv, "--out", "out") == 2
    assert "Numerical abort" in capsys.readouterr().err


def test_interrupt_exits_with_130(monkeypatch, capsys):
    def interrupted(config):
        raise KeyboardInterrupt

    monkeypatch.setitem(cli.COMMAND_HANDLERS, "phantom", interrupted)
    assert run("phantom", "--K", "16") == 130
    assert "cancelled" in capsys.readouterr().out


def test_study_exit_code():
    assert cli._study_exit_code([{"status": "aborted"}, {"status": "max_iters"}]) == 0
    assert cli._study_exit_code([{"status": "aborted"}, {"status": "error"}]) == 2
    assert cli._study_exit_code([{"status": "error"}]) == 1


# -------- Subcommands --------
def test_phantom_subcommand(tmp_path, capsys):
    assert run("phantom", "--K", "16", "--out", "gt") == 0
    out = capsys.readouterr().out
    assert re.search(r"phantom=circle-triangle K=16 measured_rank=\d+ min=0 max=1", out)
    assert (tmp_path / "gt" / "ground_truth.pgm").exists()
    assert sidecar(tmp_path / "gt" / "ground_truth.json")["K"] == 16


def test_project_subcommand(tmp_path):
    assert run("project", *SMALL, "--out", "proj") == 0
    geometry = ScanGeometry.standard(grid_size=16, num_angles=12, num_beamlets=23)
    s = read_sinogram_csv(tmp_path / "proj" / "sinogram.csv", geometry)
    L = read_system_tensor(tmp_path / "proj" / "system_tensor.txt", geometry)
    assert len(s) == 276
    assert L.nnz == build_system_tensor(geometry).nnz
    assert s.values.max() > 0


def test_reconstruct_writes_outputs(tmp_path, capsys):
    assert run("reconstruct", *SMALL, "--rank", "2", "--max-iters", "5", "--out", "run") == 0
    match = METRICS.search(capsys.readouterr().out)
    assert match is not None

    out = tmp_path / "run"
    for name in ("ground_truth.pgm", "ground_truth.json", "tr_r2.pgm", "tr_r2.json", "tr_r2_iterations.csv"):
        assert (out / name).exists()
    assert sorted(p.name for p in (out / "tr_r2_factors").iterdir()) == ["W1.csv", "W2.csv", "factors.json"]

    meta = sidecar(out / "tr_r2.json")
    assert meta["rank"] == 2
    assert meta["iters"] == int(match.group(2))
    assert meta["rmse_clamped"] == pytest.approx(float(match.group(1)), rel=1e-5)
    log = pd.read_csv(out / "tr_r2_iterations.csv")
    assert list(log["iter"]) == list(range(meta["iters"] + 1))
    assert log["seconds"].isna().all()
    assert log["rmse"].iloc[-1] == pytest.approx(meta["rmse"])


def test_reconstruct_is_byte_identical_across_runs(tmp_path):
    argv = ["reconstruct", *SMALL, "--rank", "2", "--max-iters", "4", "--noise", "0.01"]
    assert run(*argv, "--out", "a") == 0
    assert run(*argv, "--out", "b") == 0
    first = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    second = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert first == second
    for rel in first:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_reconstruct_with_lsqr(tmp_path, capsys):
    assert run("reconstruct", *SMALL, "--solver", "lsqr", "--lsqr-iters", "20", "--timing", "--out", "ls") == 0
    assert METRICS.search(capsys.readouterr().out)
    out = tmp_path / "ls"
    assert (out / "lsqr.pgm").exists()
    assert not (out / "lsqr_factors").exists()
    meta = sidecar(out / "lsqr.json")
    assert meta["solver"] == "lsqr"
    assert meta["lsqr_iters"] == 20
    assert meta["iters"] <= 20
    assert pd.read_csv(out / "lsqr_iterations.csv")["seconds"].notna().all()


def test_reconstruct_from_provided_factors(tmp_path):
    f = CPFactorPair(np.full((16, 2), 0.1), np.full((16, 2), 0.2))
    save_factors(f, tmp_path / "start", iteration=0)
    argv = ["reconstruct", *SMALL, "--rank", "2", "--max-iters", "2", "--init", "provided"]
    assert run(*argv, "--factors", "start", "--out", "warm") == 0
    assert sidecar(tmp_path / "warm" / "tr_r2.json")["init"] == "provided"
    assert run(*argv, "--out", "missing") == 1


def test_sweep_angles_rows(tmp_path):
    argv = ["sweep-angles", *SMALL, "--angles", "10", "20", "--rank", "1", "2", "--max-iters", "3"]
    assert run(*argv, "--out", "sweep") == 0
    table = pd.read_csv(tmp_path / "sweep" / "sweep_angles.csv", keep_default_na=False)
    assert list(table.columns) == cli.SWEEP_COLUMNS
    assert list(zip(table["angles"], table["solver"], table["rank"].astype(str))) == [
        (10, "lsqr", ""),
        (10, "tr", "1"),
        (10, "tr", "2"),
        (20, "lsqr", ""),
        (20, "tr", "1"),
        (20, "tr", "2"),
    ]
    assert set(table["status"]) <= set(cli.FINISHED)
    assert (tmp_path / "sweep" / "sweep" / "a020_tr_r2.pgm").exists()
    assert not (tmp_path / "sweep" / "sweep" / "a020_tr_r2_iterations.csv").exists()


def test_single_cell_sweep_matches_reconstruct(tmp_path):
    shared = [*SMALL, "--rank", "2", "--max-iters", "4", "--rho", "0"]
    assert run("sweep-angles", *shared, "--out", "sweep") == 0
    assert run("reconstruct", *shared, "--out", "single") == 0
    swept = sidecar(tmp_path / "sweep" / "sweep" / "a012_tr_r2.json")
    single = sidecar(tmp_path / "single" / "tr_r2.json")
    assert swept["rmse"] == single["rmse"]
    table = pd.read_csv(tmp_path / "sweep" / "sweep_angles.csv")
    assert table.loc[table["solver"] == "tr", "rmse"].iloc[0] == pytest.approx(single["rmse_clamped"])


def test_sweep_with_workers_matches_serial(tmp_path):
    argv = ["sweep-angles", *SMALL, "--rank", "1", "2", "3", "--max-iters", "3"]
    assert run(*argv, "--out", "serial") == 0
    assert run(*argv, "--workers", "3", "--out", "pooled") == 0
    serial = (tmp_path / "serial" / "sweep_angles.csv").read_bytes()
    assert (tmp_path / "pooled" / "sweep_angles.csv").read_bytes() == serial


def test_noise_study_outputs(tmp_path):
    argv = ["noise-study", *SMALL, "--rank", "2", "--noise", "0", "0.01", "--max-iters", "4"]
    assert run(*argv, "--out", "noise") == 0
    out = tmp_path / "noise"
    table = pd.read_csv(out / "noise_study.csv")
    assert list(table.columns) == cli.NOISE_COLUMNS
    assert list(zip(table["noise"], table["solver"])) == [(0.0, "tr"), (0.0, "lsqr"), (0.01, "tr"), (0.01, "lsqr")]
    for level in ("noise-0", "noise-0.01"):
        for name in ("tr_r2.pgm", "tr_r2_iterations.csv", "lsqr.pgm", "lsqr_iterations.csv"):
            assert (out / level / name).exists()

    assert run("reconstruct", *SMALL, "--rank", "2", "--max-iters", "4", "--out", "clean") == 0
    assert sidecar(out / "noise-0" / "tr_r2.json")["rmse"] == sidecar(tmp_path / "clean" / "tr_r2.json")["rmse"]


def test_table_rmse_matches_written_images(tmp_path):
    argv = ["noise-study", *SMALL, "--angles", "6", "--rank", "2", "--noise", "0", "0.02", "--max-iters", "5"]
    assert run(*argv, "--out", "noise") == 0
    out = tmp_path / "noise"
    truth = load_reconstruction(out / "ground_truth.pgm")
    table = pd.read_csv(out / "noise_study.csv")
    assert len(table) == 4
    for row in table.itertuples():
        label = cli.run_label(row.solver, None if pd.isna(row.rank) else int(row.rank))
        written = load_reconstruction(out / f"noise-{row.noise:g}" / f"{label}.pgm")
        # 16-bit quantization over the [0, 1.5] clamp window
        assert rmse(written, truth) == pytest.approx(row.rmse, abs=1e-4)


def test_rank_report_parameters(tmp_path, capsys):
    assert run("rank-report", *SMALL, "--rank", "1", "2", "--max-iters", "3", "--out", "ranks") == 0
    table = pd.read_csv(tmp_path / "ranks" / "rank_report.csv")
    assert list(table.columns) == cli.RANK_COLUMNS
    assert list(table["solver"]) == ["tr", "tr", "lsqr"]
    assert list(table["parameters"]) == [32, 64, 256]
    assert "measured rank" in capsys.readouterr().out
