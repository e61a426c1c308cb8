import numpy as np
import pytest

from marginalsmc.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERDICT, main
from marginalsmc.config import load_config, read_observations, write_csv
from marginalsmc.errors import ConfigError


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def base_config(kind, out, extra=""):
    return f"""
[experiment]
kind = {kind}
seed = 777
out = {out}

{extra}
"""


def test_missing_seed_is_config_error(tmp_path):
    cfg = write(tmp_path / "c.ini", """
[experiment]
kind = filter
out = x.csv

[run]
n_list = 16
""")
    assert main(["filter", "--config", cfg]) == EXIT_CONFIG


def test_unknown_kind_rejected(tmp_path):
    cfg = write(tmp_path / "c.ini", base_config("tempering", tmp_path / "x.csv"))
    assert main(["filter", "--config", cfg]) == EXIT_CONFIG


def test_kind_must_match_command(tmp_path):
    cfg = write(tmp_path / "c.ini", base_config("logz", tmp_path / "x.csv",
                                                "[run]\nn_list = 16"))
    assert main(["filter", "--config", cfg]) == EXIT_CONFIG


def test_missing_n_list_rejected(tmp_path):
    cfg = write(tmp_path / "c.ini", base_config("filter", tmp_path / "x.csv"))
    assert main(["filter", "--config", cfg]) == EXIT_CONFIG


def test_simulate_horizon_zero(tmp_path):
    out = tmp_path / "sim.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "simulate", out, "[model]\nhorizon = 0"))
    assert main(["simulate", "--config", cfg]) == EXIT_OK
    lines = [l for l in out.read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "step,y,x_latent"
    assert len(lines) == 2 and lines[1].startswith("0,,")


def test_simulate_reproducible_bytes(tmp_path):
    out = tmp_path / "sim.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "simulate", out, "[model]\nhorizon = 6"))
    assert main(["simulate", "--config", cfg]) == EXIT_OK
    first = out.read_bytes()
    assert main(["simulate", "--config", cfg]) == EXIT_OK
    assert out.read_bytes() == first


def test_simulate_roundtrip_into_custom_model(tmp_path):
    sim_out = tmp_path / "sim.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "simulate", sim_out, "[model]\nhorizon = 5"))
    assert main(["simulate", "--config", cfg]) == EXIT_OK
    ys = read_observations(sim_out)
    assert len(ys) == 5
    run_out = tmp_path / "run.csv"
    cfg2 = write(tmp_path / "c2.ini", base_config(
        "filter", run_out,
        f"[model]\npreset = custom\nobservations = {sim_out}\n\n[run]\nn_list = 32"))
    assert main(["filter", "--config", cfg2]) == EXIT_OK
    body = [l for l in run_out.read_text().splitlines() if not l.startswith("#")]
    assert len(body) == 1 + 6  # header plus steps 0..5


def test_filter_output_and_seed_override(tmp_path):
    out = tmp_path / "f.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "filter", out, "[run]\nn_list = 64"))
    assert main(["filter", "--config", cfg]) == EXIT_OK
    first = out.read_bytes()
    assert b"# marginalsmc" in first and b"# seed 777" in first
    assert main(["filter", "--config", cfg, "--seed", "778"]) == EXIT_OK
    assert out.read_bytes() != first
    assert main(["filter", "--config", cfg]) == EXIT_OK
    assert out.read_bytes() == first


def test_out_override(tmp_path):
    out = tmp_path / "a.csv"
    other = tmp_path / "b.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "filter", out, "[run]\nn_list = 16"))
    assert main(["filter", "--config", cfg, "--out", str(other)]) == EXIT_OK
    assert other.exists() and not out.exists()


def test_convergence_single_n_has_no_slope_row(tmp_path):
    out = tmp_path / "conv.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "convergence", out,
        "[model]\nhorizon = 3\n\n[run]\nn_list = 32\nreplicates = 8"))
    assert main(["convergence", "--config", cfg]) == EXIT_OK
    body = [l for l in out.read_text().splitlines() if not l.startswith("#")]
    assert len(body) == 2
    assert "slope" not in out.read_text()


def test_convergence_slope_row_and_thread_invariance(tmp_path):
    out = tmp_path / "conv.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "convergence", out,
        "[model]\nhorizon = 3\n\n[run]\nn_list = 16,64\nreplicates = 12"))
    assert main(["convergence", "--config", cfg, "--threads", "1"]) == EXIT_OK
    single = out.read_bytes()
    assert b"slope" in single
    assert main(["convergence", "--config", cfg, "--threads", "2"]) == EXIT_OK
    assert out.read_bytes() == single


def test_variance_command(tmp_path, capsys):
    out = tmp_path / "var.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "variance", out,
        "[model]\nhorizon = 2\n\n[filter]\nproposal = bootstrap\n\n"
        "[run]\nn_list = 64\nreplicates = 24\nstep = 2"))
    assert main(["variance", "--config", cfg]) == EXIT_OK
    assert "verdict: tied" in capsys.readouterr().out
    text = out.read_text()
    assert "marginal" in text and "path" in text


def test_abc_command(tmp_path):
    out = tmp_path / "abc.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "abc", out, "[run]\nn_list = 128\n\n[abc]\nstages = 4"))
    assert main(["abc", "--config", cfg]) == EXIT_OK
    body = [l for l in out.read_text().splitlines() if not l.startswith("#")]
    assert len(body) == 1 + 4


def test_condexp_command_passes(tmp_path, capsys):
    out = tmp_path / "ce.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "condexp", out,
        "[model]\nhorizon = 4\n\n[run]\nn_list = 32\nreplicates = 300\n"
        "grid_points = 801\n\n[condexp]\ncloud_size = 32"))
    assert main(["condexp", "--config", cfg]) == EXIT_OK
    assert "pass" in capsys.readouterr().out


def test_logz_command_passes(tmp_path, capsys):
    out = tmp_path / "lz.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "logz", out,
        "[model]\nhorizon = 3\n\n[run]\nn_list = 128\nreplicates = 200"))
    assert main(["logz", "--config", cfg]) == EXIT_OK
    text = out.read_text()
    assert "mean_ratio" in text and "verdict" in text


def test_logz_verdict_failure_exit_code(tmp_path, monkeypatch):
    import marginalsmc.cli as cli

    def biased(job, stream, n, threads=1, label="replicate"):
        return np.full((n, 1), -1e9)

    monkeypatch.setattr(cli, "run_replicates", biased)
    out = tmp_path / "lz.csv"
    cfg = write(tmp_path / "c.ini", base_config(
        "logz", out, "[model]\nhorizon = 2\n\n[run]\nn_list = 8\nreplicates = 16"))
    assert main(["logz", "--config", cfg]) == EXIT_VERDICT


def test_write_csv_rejects_missing_directory(tmp_path):
    with pytest.raises(ConfigError):
        write_csv(tmp_path / "nope" / "x.csv", [], ["a"], [])


def test_config_hash_present(tmp_path):
    cfg_path = write(tmp_path / "c.ini", base_config(
        "filter", tmp_path / "x.csv", "[run]\nn_list = 8"))
    cfg = load_config(cfg_path)
    assert len(cfg.config_hash) == 12
