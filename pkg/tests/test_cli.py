"""End-to-end CLI tests: exit codes, artifact layout, determinism, and the
output-root environment override. Everything runs in-process through main()."""

import os

import numpy as np
import pytest

from flowlab.cli import OUT_ROOT_ENV, main
from flowlab.config import RunConfig, hash_config, load_config, parse_config
from flowlab.csvio import read_csv

SMOKE_CONFIG = """
seed: 5
output_dir: {out}
mixture: {{preset: ring, n_components: 4, radius: 2.0, variance: 0.09}}
train:
  objective: flowconsist
  batch_size: 16
  total_steps: 6
  learning_rate: 1.0e-3
  rectify_ratio: 0.3
  rectify_warmup_frac: 0.5
network: {{hidden: 16, depth: 2, emb_dim: 8}}
diagnostics:
  n_paths: 16
  n_points: 200
  n_mc: 2000
  n_quad: 64
  n_sweep: 64
  t_grid: [0.0, 0.5, 0.9]
  omegas: [1.0, 2.0]
"""

CFG_GUIDED = """
seed: 3
output_dir: {out}
mixture: {{preset: ring, n_components: 4, radius: 2.0, variance: 0.09, labeled: true}}
train:
  objective: flowconsist
  batch_size: 16
  total_steps: 4
  rectify_ratio: 0.0
  use_cfg: true
network: {{hidden: 16, depth: 2, emb_dim: 8}}
diagnostics: {{n_sweep: 64, omegas: [1.0, 2.0]}}
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny training run shared by the sample/diagnose tests."""
    root = tmp_path_factory.mktemp("cli_train")
    out = root / "run"
    cfg_path = root / "run.yaml"
    cfg_path.write_text(SMOKE_CONFIG.format(out=out))
    code = main(["train", "--config", str(cfg_path), "--metrics-every", "2"])
    assert code == 0
    return {
        "config": str(cfg_path),
        "out": str(out),
        "checkpoint": str(out / "checkpoint.fck"),
        "metrics": str(out / "metrics.csv"),
    }


@pytest.fixture(scope="module")
def trained_guided(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train_guided")
    out = root / "run"
    cfg_path = root / "run.yaml"
    cfg_path.write_text(CFG_GUIDED.format(out=out))
    assert main(["train", "--config", str(cfg_path)]) == 0
    return {"config": str(cfg_path), "checkpoint": str(out / "checkpoint.fck")}


# ---------------------------------------------------------------------------
# train


def test_train_writes_artifacts_with_config_hash(trained):
    assert os.path.exists(trained["checkpoint"])
    header, rows, metadata = read_csv(trained["metrics"])
    assert header[:2] == ["step", "objective"]
    assert len(rows) == 3  # steps 2, 4, 6
    expected_hash = hash_config(load_config(trained["config"]))
    assert metadata["config_hash"] == expected_hash
    assert metadata["seed"] == "5"


def test_train_missing_and_invalid_config(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 2
    bad = _write(tmp_path, "bad.yaml", "train: {batch_sized: 3}")
    assert main(["train", "--config", bad]) == 2


def test_train_rerun_is_bitwise_identical(tmp_path):
    cfg_a = _write(tmp_path, "a.yaml", SMOKE_CONFIG.format(out=tmp_path / "a"))
    cfg_b = _write(tmp_path, "b.yaml", SMOKE_CONFIG.format(out=tmp_path / "b"))
    assert main(["train", "--config", cfg_a]) == 0
    assert main(["train", "--config", cfg_b]) == 0
    a = (tmp_path / "a" / "checkpoint.fck").read_bytes()
    b = (tmp_path / "b" / "checkpoint.fck").read_bytes()
    # the config hash embeds output_dir, so compare everything after the header
    ha, _, ra = a.partition(b'"step"')
    hb, _, rb = b.partition(b'"step"')
    assert ra == rb


def test_train_numeric_blowup_exits_3(tmp_path):
    text = """
output_dir: {out}
mixture: {{preset: single, mean: [0.0], variance: 1.0}}
train:
  objective: fm
  batch_size: 8
  total_steps: 4
  learning_rate: 1.0e+300
  adaptive_p: 0.0
  rectify_ratio: 0.0
network: {{hidden: 16, depth: 2, emb_dim: 8}}
"""
    cfg = _write(tmp_path, "blowup.yaml", text.format(out=tmp_path / "out"))
    with np.errstate(all="ignore"):
        assert main(["train", "--config", cfg]) == 3


# ---------------------------------------------------------------------------
# sample


def test_sample_writes_csv_and_is_seed_deterministic(trained, tmp_path):
    out_a = str(tmp_path / "a.csv")
    out_b = str(tmp_path / "b.csv")
    args = ["sample", "--checkpoint", trained["checkpoint"], "--n", "32", "--seed", "9"]
    assert main(args + ["--out", out_a]) == 0
    assert main(args + ["--out", out_b]) == 0
    assert open(out_a, "rb").read() == open(out_b, "rb").read()
    header, rows, metadata = read_csv(out_a)
    assert header == ["x0", "x1"]
    assert len(rows) == 32
    assert metadata["seed"] == "9"
    assert all(np.isfinite(float(v)) for row in rows for v in row)


def test_sample_zero_rows_gives_header_only(trained, tmp_path):
    out = str(tmp_path / "empty.csv")
    assert main(["sample", "--checkpoint", trained["checkpoint"], "--n", "0", "--out", out]) == 0
    header, rows, metadata = read_csv(out)
    assert header == ["x0", "x1"]
    assert rows == []
    assert "nfe" in metadata


def test_sample_rejects_bad_inputs(trained, tmp_path):
    out = str(tmp_path / "x.csv")
    truncated = tmp_path / "trunc.fck"
    truncated.write_bytes(open(trained["checkpoint"], "rb").read()[:40])
    assert main(["sample", "--checkpoint", str(truncated), "--out", out]) == 2
    assert main(["sample", "--checkpoint", str(tmp_path / "no.fck"), "--out", out]) == 2
    assert (
        main(["sample", "--checkpoint", trained["checkpoint"], "--n", "-1", "--out", out]) == 2
    )


# ---------------------------------------------------------------------------
# diagnose


@pytest.mark.parametrize("experiment", ["drift", "thm1", "thm2", "appendix", "thm3", "accumulation"])
def test_diagnose_analytic_experiments_pass(trained, tmp_path, experiment):
    out = str(tmp_path / experiment)
    code = main(["diagnose", experiment, "--config", trained["config"], "--out", out])
    assert code == 0
    header, rows, metadata = read_csv(os.path.join(out, f"diag_{experiment}.csv"))
    assert header == ["experiment", "sweep_value", "value", "std_err"]
    assert rows
    assert metadata["experiment"] == experiment


def test_diagnose_from_trained_checkpoint(trained, tmp_path):
    out = str(tmp_path / "ck")
    code = main(
        [
            "diagnose",
            "thm3",
            "--config",
            trained["config"],
            "--checkpoint",
            trained["checkpoint"],
            "--out",
            out,
        ]
    )
    assert code == 0


def test_diagnose_unknown_experiment_exits_2(trained):
    assert main(["diagnose", "thm9", "--config", trained["config"]]) == 2


def test_diagnose_dirac_variance_term_zero(tmp_path):
    cfg = _write(
        tmp_path,
        "dirac.yaml",
        """
output_dir: {out}
mixture: {{preset: single, mean: [0.3], variance: 0.0}}
network: {{hidden: 16, depth: 2, emb_dim: 8}}
diagnostics: {{n_mc: 500}}
""".format(out=tmp_path / "out"),
    )
    assert main(["diagnose", "thm2", "--config", cfg]) == 0
    _, rows, _ = read_csv(str(tmp_path / "out" / "diag_thm2.csv"))
    l_var = [float(r[2]) for r in rows if r[0] == "thm2_l_var"]
    assert l_var and l_var[0] < 1e-25


def test_diagnose_assertion_failure_exits_4_but_writes_csv(tmp_path, capsys):
    # two-interval quadrature is far too coarse for the integral identity
    cfg = _write(
        tmp_path,
        "coarse.yaml",
        """
output_dir: {out}
mixture: {{preset: ring, n_components: 4, radius: 2.0, variance: 0.09}}
network: {{hidden: 16, depth: 2, emb_dim: 8}}
diagnostics: {{n_quad: 2}}
""".format(out=tmp_path / "out"),
    )
    assert main(["diagnose", "thm3", "--config", cfg]) == 4
    assert os.path.exists(str(tmp_path / "out" / "diag_thm3.csv"))
    assert "FAIL" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# sweep-omega


def test_sweep_omega_from_guided_checkpoint(trained_guided, tmp_path):
    out = str(tmp_path / "sweep")
    code = main(
        [
            "sweep-omega",
            "--checkpoint",
            trained_guided["checkpoint"],
            "--config",
            trained_guided["config"],
            "--out",
            out,
        ]
    )
    assert code == 0
    _, rows, _ = read_csv(os.path.join(out, "diag_omega_sweep.csv"))
    assert [float(r[1]) for r in rows] == [1.0, 2.0]
    assert all(float(r[2]) >= 0.0 for r in rows)


def test_sweep_omega_rejects_unguided_checkpoint(trained, tmp_path):
    code = main(
        [
            "sweep-omega",
            "--checkpoint",
            trained["checkpoint"],
            "--config",
            trained["config"],
            "--out",
            str(tmp_path),
        ]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# config-default and output root


def test_config_default_emits_parseable_defaults(tmp_path, capsys):
    assert main(["config-default"]) == 0
    text = capsys.readouterr().out
    assert parse_config(text) == RunConfig()
    out = tmp_path / "ref.yaml"
    assert main(["config-default", "--out", str(out)]) == 0
    assert parse_config(out.read_text()) == RunConfig()


def test_output_root_env_resolves_relative_paths(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path))
    assert main(["config-default", "--out", "nested/ref.yaml"]) == 0
    assert (tmp_path / "nested" / "ref.yaml").exists()
    absolute = tmp_path / "abs.yaml"
    assert main(["config-default", "--out", str(absolute)]) == 0
    assert absolute.exists()
