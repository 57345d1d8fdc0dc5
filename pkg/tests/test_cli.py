"""End-to-end tests of the command-line interface."""
import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from cplab.cli import main, stream_seed

GOLDEN = Path(__file__).parent / "golden"


def run(tmp_path, *args):
    cwd = os.getcwd()
    os.chdir(tmp_path)
    try:
        return main(list(args))
    finally:
        os.chdir(cwd)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# seeds and exit codes
# ---------------------------------------------------------------------------


def test_stream_seeds_distinct():
    seeds = {stream_seed(7, n) for n in ("disorder", "sampling", "gmc", "flow")}
    assert len(seeds) == 4
    assert stream_seed(7, "gmc") == stream_seed(7, "gmc")
    assert stream_seed(7, "gmc") != stream_seed(8, "gmc")


def test_usage_error_exit_1(tmp_path):
    assert run(tmp_path, "jtheta") == 1
    assert run(tmp_path, "no-such-command") == 1


def test_check_failure_exit_3(tmp_path):
    # far too few resummation terms
    code = run(tmp_path, "resum-check", "--theta", "-1", "--a", "2",
               "--t", "1", "--j-max", "2", "-o", "r.csv")
    assert code == 3


# ---------------------------------------------------------------------------
# artifacts and manifests
# ---------------------------------------------------------------------------


def test_jtheta_artifact_and_manifest(tmp_path):
    assert run(tmp_path, "jtheta", "--theta", "0", "--t", "1",
               "-o", "jt.csv") == 0
    rows = read_csv(tmp_path / "jt.csv")
    assert rows[0] == ["theta", "t", "value", "abs_error", "converged"]
    assert abs(float(rows[1][2]) - 2.8077702420285193) < 1e-9
    man = json.loads((tmp_path / "jt.csv.manifest.json").read_text())
    assert man["command"] == "jtheta"
    assert "digest" in man and "versions" in man


def test_json_format_mirrors_csv(tmp_path):
    assert run(tmp_path, "jtheta", "--theta", "0", "--t", "1",
               "--format", "json", "-o", "jt.json") == 0
    payload = json.loads((tmp_path / "jt.json").read_text())
    assert payload["rows"][0]["value"] == repr(2.807770242028518)
    assert payload["manifest"]["command"] == "jtheta"


def test_resum_check_passes(tmp_path):
    assert run(tmp_path, "resum-check", "--theta", "-1", "--a", "2",
               "--t", "1", "-o", "r.csv") == 0
    rows = read_csv(tmp_path / "r.csv")
    assert float(rows[1][6]) < 1e-4


def test_variance_id_passes(tmp_path):
    assert run(tmp_path, "variance-id", "-o", "v.csv") == 0


def test_check_commands_pass(tmp_path):
    assert run(tmp_path, "isometry-check", "--instances", "5",
               "-o", "i.csv") == 0
    assert run(tmp_path, "coupling-check", "-o", "c.csv") == 0
    assert run(tmp_path, "naimark-check", "-o", "n.csv") == 0


# ---------------------------------------------------------------------------
# the ensemble pipeline
# ---------------------------------------------------------------------------


def test_pipeline_walks_to_flow(tmp_path):
    assert run(tmp_path, "sample-walks", "--count", "6", "--window", "0", "16",
               "-N", "256", "--box", "-2", "2", "-2", "2", "--seed", "3",
               "-o", "w.csv") == 0
    assert run(tmp_path, "polymer-sim", "--count", "6", "--window", "0", "16",
               "-N", "256", "--theta", "0.5", "--seed", "3", "-o", "p.csv") == 0
    assert run(tmp_path, "intersections", "--input", "p.csv",
               "--window", "0", "16", "-o", "l.csv") == 0
    rows = read_csv(tmp_path / "l.csv")
    assert rows[0] == ["i", "j", "value"]
    assert float(rows[1][2]) > 0  # self-intersection on the diagonal
    assert run(tmp_path, "gmc-sim", "--input", "p.csv", "--a", "0.5",
               "--seed", "5", "-o", "g.csv") == 0
    grows = read_csv(tmp_path / "g.csv")
    assert all(float(r[2]) > 0 for r in grows[1:])
    assert run(tmp_path, "gmc-flow", "--input", "p.csv",
               "--a-grid", "0,0.5,1", "--seed", "5", "-o", "f.csv") == 0
    frows = read_csv(tmp_path / "f.csv")
    # a = 0 returns the base mass unchanged
    weights = {}
    for r in read_csv(tmp_path / "p.csv")[1:]:
        weights[r[0]] = float(r[4])
    assert abs(float(frows[1][1]) - sum(weights.values())) < 1e-9


def test_gmc_moment_zero_strength_equals_base_second_moment(tmp_path):
    assert run(tmp_path, "sample-walks", "--count", "5", "--window", "0", "10",
               "-N", "128", "--seed", "1", "-o", "w.csv") == 0
    assert run(tmp_path, "gmc-sim", "--input", "w.csv", "--a", "0",
               "--moment-order", "2", "-o", "g.csv") == 0
    man = json.loads((tmp_path / "g.csv.manifest.json").read_text())
    weights = {}
    for r in read_csv(tmp_path / "w.csv")[1:]:
        weights[r[0]] = float(r[4])
    total = sum(weights.values())
    assert abs(man["moment"] - total * total) < 1e-9 * total * total


def test_binary_roundtrip_through_cli(tmp_path):
    assert run(tmp_path, "sample-walks", "--count", "3", "--window", "0", "6",
               "-N", "64", "--seed", "9", "-o", "w.bin") == 0
    from cplab.ensemble import ENSEMBLE_MAGIC

    raw = (tmp_path / "w.bin").read_bytes()
    assert raw.startswith(ENSEMBLE_MAGIC)
    assert run(tmp_path, "intersections", "--input", "w.bin",
               "--window", "0", "6", "-o", "l.csv") == 0


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------


def test_trial_commands(tmp_path):
    assert run(tmp_path, "trial-positivity", "--draws", "300",
               "-o", "tp.csv") == 0
    rep = json.loads((tmp_path / "tp.report.json").read_text())
    assert rep["verdict"] == "pass"
    assert run(tmp_path, "trial-strong-disorder", "--flows", "400",
               "--plot", "-o", "ts.csv") == 0
    assert (tmp_path / "ts.png").exists()
    assert run(tmp_path, "trial-variance-ratio", "--horizon", "512",
               "--replicas", "5", "-o", "tv.csv") == 0


# ---------------------------------------------------------------------------
# golden files
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("name,args", [
    ("golden_jtheta.csv", ["jtheta", "--theta", "0", "--t", "0.5", "--t", "1",
                           "--t", "2", "--seed", "0"]),
    ("golden_diagrams.csv", ["diagrams", "--n", "3", "--max-len", "2"]),
    ("golden_walks.csv", ["sample-walks", "--count", "4", "--window", "0", "8",
                          "-N", "64", "--box", "-1", "1", "-1", "1",
                          "--seed", "123"]),
])
def test_golden_files(tmp_path, name, args):
    assert run(tmp_path, *args, "-o", name) == 0
    assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes()


def test_plot_renders_png(tmp_path):
    assert run(tmp_path, "jtheta", "--theta", "0", "--t", "0.5", "--t", "1",
               "--t", "2", "--plot", "-o", "jt.csv") == 0
    assert (tmp_path / "jt.png").stat().st_size > 0
