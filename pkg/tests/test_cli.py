import subprocess
import sys

import numpy as np
import pytest
import yaml

from ressm.cli import main


def run_cli(args):
    return main(list(args))


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for mode in ("simulate", "fit", "dic", "summarize", "connectivity", "bench"):
        assert mode in text


def test_fit_help_lists_every_flag(capsys):
    with pytest.raises(SystemExit):
        run_cli(["fit", "--help"])
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--threads", "--iters", "--burnin", "--thin",
                 "--q", "--m", "--mode", "--rho0", "--scale", "--out"):
        assert flag in text


def test_unknown_flag_nonzero_exit_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["fit", "--definitely-not-a-flag"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def sim_config(tmp_path, out):
    cfg = {
        "scenario": {
            "groups": 1, "subjects": [2], "segments": 2, "timepoints": 40,
            "channels": 4, "q": 1, "m": 1, "dynamics": [[[0.8]]],
            "noise_var": [0.2],
        },
        "out": str(out),
        "seed": 3,
    }
    path = tmp_path / "sim.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_pipeline_simulate_fit_summarize_connectivity_dic(tmp_path, capsys):
    sim_out = tmp_path / "data"
    assert run_cli(["simulate", "--config", str(sim_config(tmp_path, sim_out))]) == 0
    assert (sim_out / "manifest.yaml").exists()
    assert (sim_out / "truth" / "load_grp.rssm").exists()

    fit_out = tmp_path / "fit"
    rc = run_cli(["fit", "--data", str(sim_out), "--out", str(fit_out),
                  "--q", "1", "--m", "1", "--iters", "20", "--burnin", "8",
                  "--thin", "2", "--init-iters", "5", "--seed", "1"])
    assert rc == 0
    assert (fit_out / "fit.yaml").exists()
    assert (fit_out / "criteria.yaml").exists()
    assert (fit_out / "sign_audit.tsv").exists()

    assert run_cli(["summarize", "--fit", str(fit_out)]) == 0
    assert (fit_out / "posterior_summary.tsv").exists()

    assert run_cli(["connectivity", "--fit", str(fit_out), "--threshold", "0.0"]) == 0
    assert (fit_out / "connectivity_edges.tsv").exists()

    assert run_cli(["dic", "--fit", str(fit_out)]) == 0
    out = capsys.readouterr().out
    assert "smallest cDIC" in out


def test_fit_scale_flag_shrinks_schedule(tmp_path):
    sim_out = tmp_path / "data"
    run_cli(["simulate", "--config", str(sim_config(tmp_path, sim_out))])
    fit_out = tmp_path / "fit_scaled"
    rc = run_cli(["fit", "--data", str(sim_out), "--out", str(fit_out),
                  "--q", "1", "--m", "1", "--scale", "250", "--seed", "1"])
    assert rc == 0
    meta = yaml.safe_load((fit_out / "fit.yaml").read_text())
    assert meta["schedule"]["n_iter"] == 30  # 7500 / 250


def test_fit_validation_failure_nonzero_exit(tmp_path, capsys):
    sim_out = tmp_path / "data"
    run_cli(["simulate", "--config", str(sim_config(tmp_path, sim_out))])
    rc = run_cli(["fit", "--data", str(sim_out), "--out", str(tmp_path / "x"),
                  "--q", "4", "--m", "1"])
    assert rc == 1
    assert "latent dimension" in capsys.readouterr().err


def test_fit_resume_reproduces_uninterrupted_run(tmp_path):
    sim_out = tmp_path / "data"
    run_cli(["simulate", "--config", str(sim_config(tmp_path, sim_out))])
    full = tmp_path / "full"
    run_cli(["fit", "--data", str(sim_out), "--out", str(full), "--q", "1", "--m", "1",
             "--iters", "20", "--burnin", "8", "--thin", "2", "--init-iters", "5",
             "--seed", "9"])
    ck = tmp_path / "ck"
    run_cli(["fit", "--data", str(sim_out), "--out", str(ck), "--q", "1", "--m", "1",
             "--iters", "20", "--burnin", "8", "--thin", "2", "--init-iters", "5",
             "--seed", "9", "--checkpoint-every", "10"])
    resumed = tmp_path / "resumed"
    run_cli(["fit", "--data", str(sim_out), "--out", str(resumed), "--q", "1", "--m", "1",
             "--iters", "20", "--burnin", "8", "--thin", "2", "--init-iters", "5",
             "--seed", "9", "--resume", str(ck / "checkpoint")])
    from ressm.io import load_output
    a = load_output(full)
    b = load_output(resumed)
    for k in a.draws:
        assert a.draws[k].tobytes() == b.draws[k].tobytes(), k


def test_threads_flag_does_not_change_output(tmp_path):
    sim_out = tmp_path / "data"
    run_cli(["simulate", "--config", str(sim_config(tmp_path, sim_out))])
    outs = []
    for threads in ("1", "8"):
        d = tmp_path / f"t{threads}"
        run_cli(["fit", "--data", str(sim_out), "--out", str(d), "--q", "1", "--m", "1",
                 "--iters", "16", "--burnin", "6", "--thin", "2", "--init-iters", "4",
                 "--seed", "3", "--threads", threads])
        outs.append(d)
    from ressm.io import load_output
    a, b = (load_output(d) for d in outs)
    for k in a.draws:
        assert a.draws[k].tobytes() == b.draws[k].tobytes(), k


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("RESSM_THREADS", "2")
    from ressm.cli import _default_threads
    assert _default_threads() == 2


def test_console_entrypoint_runs():
    proc = subprocess.run([sys.executable, "-m", "ressm.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "ressm" in proc.stdout
