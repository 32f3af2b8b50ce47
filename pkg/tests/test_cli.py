import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from rdmasparse import cli
from rdmasparse.gen_io import read_matrix_market

RMAT = "scale=6,ef=4"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_parse_kv():
    keys = {"scale": int, "d": float}
    assert cli.parse_kv("scale=5, d=0.5", keys) == {"scale": 5, "d": 0.5}
    for bad in ("scale", "scale=x", "nope=1"):
        with pytest.raises(cli.ConfigError):
            cli.parse_kv(bad, keys)


@pytest.mark.parametrize("alg", ["stationary_c", "stationary_a", "ws_locality"])
@pytest.mark.parametrize("kind", ["spmm", "spgemm"])
def test_run_writes_outputs_and_verifies(tmp_path, capsys, alg, kind):
    code, out, _ = run(capsys, "run", "--rmat", RMAT, "--alg", alg, "--kind", kind, "--n", "8",
                       "--p", "4", "--verify", "--out", str(tmp_path))
    assert code == 0
    summary = json.loads(out)
    assert summary["verified"] is True
    doc = json.loads((tmp_path / "run.json").read_text())
    assert set(doc) == {"deterministic", "nondeterministic"}
    assert doc["deterministic"]["verified"] is True
    with open(tmp_path / "timing.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["rank"]) for r in rows] == [0, 1, 2, 3]
    assert (tmp_path / "ranks.csv").exists()


def test_threads_workstealing_ranks_marked_nondeterministic(tmp_path, capsys):
    code, _, _ = run(capsys, "run", "--rmat", RMAT, "--alg", "ws_random", "--mode", "threads",
                     "--p", "4", "--out", str(tmp_path))
    assert code == 0
    assert (tmp_path / "ranks_nondeterministic.csv").exists()
    assert not (tmp_path / "ranks.csv").exists()


def test_deterministic_output_is_byte_identical(tmp_path, capsys):
    docs = []
    for name in ("one", "two"):
        d = tmp_path / name
        d.mkdir()
        assert run(capsys, "run", "--rmat", RMAT, "--alg", "ws_locality", "--p", "4", "--kind", "spgemm",
                   "--delay-max", "1e-6", "--out", str(d))[0] == 0
        doc = json.loads((d / "run.json").read_text())
        docs.append(json.dumps(doc["deterministic"], sort_keys=True))
        docs.append((d / "ranks.csv").read_bytes())
    assert docs[0] == docs[2] and docs[1] == docs[3]


def test_out_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert run(capsys, "run", "--uniform", "m=16,k=16,p=4,d=0.25", "--alg", "summa_bsp", "--p", "4")[0] == 0
    assert (tmp_path / "env" / "run.json").exists()


@pytest.mark.parametrize("argv", [
    ["run", "--rmat", RMAT, "--alg", "summa_bsp", "--p", "3"],
    ["run", "--rmat", RMAT, "--alg", "stationary_c", "--grid", "3x3", "--p", "4"],
    ["run", "--rmat", RMAT, "--alg", "stationary_c", "--tiles", "4,4"],
    ["run", "--rmat", "scale=6,bogus=1", "--alg", "stationary_c"],
    ["run", "--uniform", "m=10,k=10,p=4,d=0.3", "--alg", "stationary_c"],
    ["run", "--mtx", "/nonexistent.mtx", "--alg", "stationary_c"],
    ["model", "--m", "64", "--k", "64", "--n", "8", "--p", "3", "--d", "0.1"],
    ["model", "--m", "64", "--k", "64", "--n", "8", "--p", "4", "--d", "0.1", "--kind", "spgemm"],
], ids=["summa-p3", "grid-mismatch", "bad-tiles", "bad-key", "fractional-tile", "missing-file",
        "model-nonsquare", "model-spgemm-unmeasured"])
def test_config_errors_exit_2(capsys, tmp_path, argv):
    code, _, err = run(capsys, *argv, *(["--out", str(tmp_path)] if argv[0] == "run" else []))
    assert code == cli.EXIT_CONFIG
    assert err.startswith("error:")


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["run", "--alg", "cannon", "--rmat", RMAT])
    assert e.value.code == 2


def test_resource_exhaustion_exits_4(capsys, tmp_path):
    code, _, err = run(capsys, "run", "--rmat", RMAT, "--alg", "stationary_c", "--p", "4",
                       "--heap-bytes", "4096", "--out", str(tmp_path))
    assert code == cli.EXIT_RESOURCE
    assert "resource" in err


def test_verify_failure_exits_3(capsys, tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "serial_reference", lambda a, b, c=None: np.ones((a.rows, b.shape[1])) * 1e9)
    code, _, err = run(capsys, "run", "--rmat", RMAT, "--alg", "stationary_c", "--p", "4", "--verify",
                       "--out", str(tmp_path))
    assert code == cli.EXIT_VERIFY
    assert json.loads((tmp_path / "run.json").read_text())["deterministic"]["verified"] is False


def test_model_prints_roofline(capsys):
    code, out, _ = run(capsys, "model", "--m", "4096", "--k", "4096", "--n", "128", "--p", "16",
                       "--d", "0.001")
    assert code == 0
    doc = json.loads(out)
    assert doc["inputs"]["p"] == 16
    assert doc["comm_elems_per_iter"] > 0 and doc["comm_bytes_per_iter"] > 0
    assert "roofline" in doc


def test_imbalance_writes_csvs(capsys, tmp_path):
    code, out, _ = run(capsys, "imbalance", "--rmat", "scale=8,ef=8", "--grid", "4", "--out", str(tmp_path))
    assert code == 0
    doc = json.loads(out)
    assert doc["per_stage_flop_imbalance"] >= doc["end_to_end_flop_imbalance"] - 1e-12
    with open(tmp_path / "stage_flops.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 16 * 4 and set(rows[0]) == {"rank", "stage", "flops"}
    tiles = json.loads((tmp_path / "imbalance.json").read_text())["per_tile_nnz"]
    with open(tmp_path / "tile_nnz.csv") as fh:
        assert sum(int(r["nnz"]) for r in csv.DictReader(fh)) == sum(map(sum, tiles))


def test_gen_round_trips(capsys, tmp_path):
    path = tmp_path / "a.mtx"
    code, out, _ = run(capsys, "gen", "--rmat", RMAT, "-o", str(path))
    assert code == 0
    m = read_matrix_market(path)
    assert m.nnz == json.loads(out)["nnz"] and m.shape == (64, 64)
    code, out, _ = run(capsys, "run", "--mtx", str(path), "--alg", "stationary_b", "--p", "4", "--verify",
                       "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["verified"] is True


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rdmasparse", "model", "--m", "64", "--k", "64", "--n", "8",
                           "--p", "4", "--d", "0.25"], capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["inputs"]["m"] == 64
