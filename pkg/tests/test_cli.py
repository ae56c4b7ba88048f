"""End-to-end command-line tests: artifacts, determinism, exit codes."""

import csv
import json
import os

import numpy as np
import pytest

import obmlab.cli as cli
import obmlab.diffcore as dc
import obmlab.simworld as sw
import obmlab.trainer as tr


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One generated dataset + one trained checkpoint shared by the tests."""
    base = tmp_path_factory.mktemp("cli")
    cfg_path = base / "domain.json"
    domain = sw.config_a_style(num_tables=2, trajectory_length=30,
                               objects_per_table=1, seed=0)
    sw.write_config(domain, cfg_path)

    data = base / "data"
    rc = cli.main(["gen", "--config", str(cfg_path), "--n-trajectories", "12",
                   "--seed", "7", "--out", str(data)])
    assert rc == 0

    data4 = base / "data4"  # default 4-table domain, for mismatch tests
    rc = cli.main(["gen", "--n-trajectories", "2", "--seed", "1",
                   "--out", str(data4)])
    assert rc == 0

    train = base / "train"
    rc = cli.main(["train", "--data", str(data), "--model", "obmnet",
                   "--epochs", "2", "--batch-size", "4", "--eval-every", "5",
                   "--slots", "4", "--keep", "2", "--seed", "3",
                   "--out", str(train)])
    assert rc == 0

    return {
        "base": base,
        "cfg": cfg_path,
        "data": data,
        "data4": data4,
        "train": train,
        "checkpoint": train / "checkpoint_obmnet.json",
    }


# ---------------------------------------------------------------------------
# gen


def test_gen_is_byte_deterministic(ws, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        rc = cli.main(["gen", "--config", str(ws["cfg"]), "--n-trajectories",
                       "5", "--seed", "7", "--out", str(out)])
        assert rc == 0
    assert _read_bytes(a / "dataset.jsonl") == _read_bytes(b / "dataset.jsonl")
    assert _read_bytes(a / "config.json") == _read_bytes(b / "config.json")


def test_gen_manifest_records_checksums(ws):
    path = ws["data"] / "manifest_gen.json"
    with open(path) as fh:
        manifest = json.load(fh)
    assert manifest["command"] == "gen"
    assert manifest["seed"] == 7
    assert len(manifest["config_digest"]) == 16
    data_key = str(ws["data"] / "dataset.jsonl")
    assert data_key in manifest["outputs"]
    checksum = manifest["outputs"][data_key]
    assert checksum == cli._checksum(data_key)
    assert not os.path.exists(str(path) + ".tmp")


def test_gen_rejects_nonpositive_count(ws, tmp_path):
    rc = cli.main(["gen", "--config", str(ws["cfg"]), "--n-trajectories", "0",
                   "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_VALIDATION


def test_gen_missing_config_is_usage_error(tmp_path, capsys):
    rc = cli.main(["gen", "--config", str(tmp_path / "nope.json"),
                   "--n-trajectories", "1", "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_USAGE
    assert "missing file" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_wrote_expected_artifacts(ws):
    names = set(os.listdir(ws["train"]))
    assert "checkpoint_obmnet.json" in names
    assert "train_log_obmnet.csv" in names
    assert "manifest_train.json" in names
    _, header = tr.load_checkpoint(ws["checkpoint"])
    assert header["kind"] == "obmnet"
    assert header["hyper"]["K"] == 4
    assert header["train_config"]["epochs"] == 2


# ---------------------------------------------------------------------------
# eval


def test_eval_writes_metrics_and_is_deterministic(ws, tmp_path):
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        rc = cli.main(["eval", "--data", str(ws["data"]), "--checkpoint",
                       str(ws["checkpoint"]), "--obs-counts", "5,10",
                       "--out", str(out)])
        assert rc == 0
        outs.append(out / "metrics_obmnet.csv")
    assert _read_bytes(outs[0]) == _read_bytes(outs[1])
    with open(outs[0]) as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["observations"]) for r in rows] == [5, 10]
    for r in rows:
        assert 0.0 <= float(r["table_accuracy"]) <= 1.0


def test_eval_checkpoint_domain_mismatch(ws, tmp_path, capsys):
    rc = cli.main(["eval", "--data", str(ws["data4"]), "--checkpoint",
                   str(ws["checkpoint"]), "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_VALIDATION
    assert "tables" in capsys.readouterr().err


def test_eval_missing_checkpoint_is_usage_error(ws, tmp_path):
    rc = cli.main(["eval", "--data", str(ws["data"]), "--checkpoint",
                   str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_USAGE


def test_eval_poisoned_checkpoint_is_runtime_error(ws, tmp_path, capsys):
    params, header = tr.load_checkpoint(ws["checkpoint"])
    flat = params.flat_values()
    flat[0] = np.nan
    params.set_flat_values(flat)
    bad = tmp_path / "bad.json"
    dc.write_checkpoint(bad, params, header)
    rc = cli.main(["eval", "--data", str(ws["data"]), "--checkpoint", str(bad),
                   "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_RUNTIME
    assert "runtime error" in capsys.readouterr().err


def test_eval_bad_obs_counts(ws, tmp_path):
    rc = cli.main(["eval", "--data", str(ws["data"]), "--checkpoint",
                   str(ws["checkpoint"]), "--obs-counts", "0,10",
                   "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_VALIDATION
    rc = cli.main(["eval", "--data", str(ws["data"]), "--checkpoint",
                   str(ws["checkpoint"]), "--obs-counts", "a,b",
                   "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_USAGE


# ---------------------------------------------------------------------------
# compare / curves


def test_compare_row_per_method_six_numeric_columns(ws, tmp_path):
    out = tmp_path / "cmp"
    rc = cli.main(["compare", "--data", str(ws["data"]),
                   "--methods", "obmnet,daf,clustering",
                   "--checkpoint", f"obmnet={ws['checkpoint']}",
                   "--out", str(out)])
    assert rc == 0
    with open(out / "compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["obmnet", "daf", "clustering"]
    numeric = [c for c in rows[0] if c != "method"]
    assert len(numeric) == 6
    for row in rows:
        for col in numeric:
            float(row[col])  # parses; may be nan where a count is unreached


def test_compare_method_without_checkpoint_is_usage_error(ws, tmp_path, capsys):
    rc = cli.main(["compare", "--data", str(ws["data"]),
                   "--methods", "obmnet,daf", "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_USAGE
    assert "needs --checkpoint" in capsys.readouterr().err


def test_compare_unknown_method_is_usage_error(ws, tmp_path):
    rc = cli.main(["compare", "--data", str(ws["data"]),
                   "--methods", "oracle", "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_USAGE


def test_compare_malformed_checkpoint_flag(ws, tmp_path):
    rc = cli.main(["compare", "--data", str(ws["data"]),
                   "--methods", "obmnet", "--checkpoint", "obmnet-no-sep",
                   "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_USAGE


def test_curves_bins_respected(ws, tmp_path):
    out = tmp_path / "cur"
    rc = cli.main(["curves", "--data", str(ws["data"]),
                   "--methods", "clustering,daf", "--bins", "5",
                   "--out", str(out)])
    assert rc == 0
    with open(out / "curves.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["method"] for r in rows} == {"clustering", "daf"}
    for r in rows:
        assert int(r["gap_bin"]) % 5 == 0
        assert 0.0 <= float(r["accuracy"]) <= 1.0
        assert int(r["count"]) >= 1


def test_curves_zero_bin_width_rejected(ws, tmp_path):
    rc = cli.main(["curves", "--data", str(ws["data"]), "--methods",
                   "clustering", "--bins", "0", "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_VALIDATION


# ---------------------------------------------------------------------------
# common plumbing


def test_unknown_flag_is_usage_error(capsys):
    rc = cli.main(["gen", "--n-trajectories", "1", "--frobnicate"])
    assert rc == cli.EXIT_USAGE
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand_is_usage_error():
    assert cli.main(["transmogrify"]) == cli.EXIT_USAGE


def test_missing_dataset_is_usage_error(tmp_path):
    rc = cli.main(["compare", "--data", str(tmp_path / "ghost"),
                   "--methods", "daf", "--out", str(tmp_path / "x")])
    assert rc == cli.EXIT_USAGE


def test_out_dir_env_var_fallback(ws, tmp_path, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv(cli.ENV_OUT_DIR, str(target))
    rc = cli.main(["gen", "--config", str(ws["cfg"]), "--n-trajectories", "2",
                   "--seed", "9"])
    assert rc == 0
    assert (target / "dataset.jsonl").exists()
    assert (target / "manifest_gen.json").exists()


def test_compare_manifest_lists_inputs_and_outputs(ws, tmp_path):
    out = tmp_path / "cmp"
    rc = cli.main(["compare", "--data", str(ws["data"]), "--methods", "daf",
                   "--out", str(out)])
    assert rc == 0
    with open(out / "manifest_compare.json") as fh:
        manifest = json.load(fh)
    assert manifest["command"] == "compare"
    assert str(ws["data"] / "dataset.jsonl") in manifest["inputs"]
    cmp_path = str(out / "compare.csv")
    assert manifest["outputs"][cmp_path] == cli._checksum(cmp_path)
