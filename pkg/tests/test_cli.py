import csv
import json

import numpy as np
import pytest

from neighborfl import runner
from neighborfl.cli import main
from neighborfl.io import read_jsonl, write_text
from neighborfl.learner import load_checkpoint


def base_args(meta, data, out, *extra):
    return ["run", "--metadata-csv", str(meta), "--stream-csv", str(data), "--output-dir", str(out),
            "--learner", "linear", "--radius-km", "2", "--seed", "4", *extra]


def read_csv(path):
    raw = path.read_bytes()
    assert b"\r\n" in raw
    return list(csv.reader(raw.decode("utf-8").splitlines()))


def test_run_writes_expected_artifacts(tmp_path, small_files, capsys):
    meta, data = small_files
    out = tmp_path / "run"
    assert main(base_args(meta, data, out, "--rounds", "6", "--summary-last", "3")) == 0
    assert "6 rounds" in capsys.readouterr().out

    records = read_jsonl(out / "rounds.jsonl")
    assert len(records) == 6 * 5
    assert set(records[0]) == {"round", "device", "P", "P_eval", "Y", "E", "E_eval", "evaluated", "chosen",
                               "fn", "added", "removed", "selected"}

    pred = read_csv(out / "predictions" / "c0_d00.csv")
    assert pred[0] == ["round", "step", "prediction", "truth"]
    assert len(pred) == 1 + 6 * 12

    dev = read_csv(out / "device_mse_last.csv")
    assert dev[0] == ["device_id", "NeighborFL L1"] and len(dev) == 6
    last = read_csv(out / "avg_device_mse_last.csv")
    assert last[0] == ["Methods", "Non-Pretrain MSE"] and last[1][0] == "NeighborFL L1"
    assert float(last[1][1]) == pytest.approx(np.mean([float(r[1]) for r in dev[1:]]))
    assert read_csv(out / "avg_device_mse_all.csv")[0] == ["Methods", "Non-Pretrain MSE"]

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["summary_rounds"] == [4, 6] and manifest["rounds"] == 6
    assert set(manifest["inputs"]) == {"metadata_csv", "stream_csv"}
    assert manifest["config"]["seed"] == 4
    assert not list(out.rglob("*.tmp"))


def test_single_round_has_twelve_predictions(tmp_path, small_files):
    meta, data = small_files
    out = tmp_path / "one"
    assert main(base_args(meta, data, out, "--rounds", "1")) == 0
    for rec in read_jsonl(out / "rounds.jsonl"):
        assert len(rec["P"]) == 12 and len(rec["Y"]) == 12


def test_multi_output_columns(tmp_path, small_files):
    meta, data = small_files
    out = tmp_path / "o2"
    assert main(base_args(meta, data, out, "--rounds", "2", "--n-out", "2")) == 0
    rows = read_csv(out / "predictions" / "c0_d00.csv")
    assert rows[0] == ["round", "step", "horizon", "prediction", "truth"]
    assert len(rows) == 1 + 2 * (11 * 2)


def test_missing_device_column(tmp_path, small_files, capsys):
    meta, data = small_files
    lines = data.read_text().splitlines()
    header = lines[0].split(",")
    drop = header.index("c1_d01")
    trimmed = [",".join(v for k, v in enumerate(line.split(",")) if k != drop) for line in lines]
    data.write_text("\n".join(trimmed) + "\n")
    assert main(base_args(meta, data, tmp_path / "x", "--rounds", "2")) != 0
    assert "c1_d01" in capsys.readouterr().err


@pytest.mark.parametrize("flags,needle", [
    (["--tau-first", "5"], "tau_first"),
    (["--mode", "bogus"], "mode"),
    (["--rounds", "500"], "rounds"),
])
def test_invalid_configuration_exits_nonzero(tmp_path, small_files, capsys, flags, needle):
    meta, data = small_files
    assert main(base_args(meta, data, tmp_path / "bad", *flags)) == 2
    assert needle in capsys.readouterr().err


def test_manifest_rerun_is_bitwise_identical(tmp_path, small_files):
    meta, data = small_files
    first = tmp_path / "first"
    assert main(base_args(meta, data, first, "--rounds", "5")) == 0
    second = tmp_path / "second"
    runner.rerun_from_manifest(first / "manifest.json", second)
    for name in ("avg_device_mse_last.csv", "avg_device_mse_all.csv", "device_mse_last.csv", "rounds.jsonl"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_config_file_and_overrides(tmp_path, small_files):
    meta, data = small_files
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(
        f'mode = "central"\nlearner = "linear"\nrounds = 2\nmetadata_csv = "{meta}"\nstream_csv = "{data}"\n'
    )
    out = tmp_path / "c"
    assert main(["run", "--config", str(cfg), "--rounds", "3", "--output-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["method"] == "Central" and manifest["rounds"] == 3


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"rounds": 3, "colour": "red"}')
    assert main(["run", "--config", str(cfg)]) == 2


def test_pretrain_is_deterministic_and_loads(tmp_path, small_files):
    meta, data = small_files
    common = ["pretrain", "--metadata-csv", str(meta), "--pretrain-csv", str(data), "--learner", "linear",
              "--epochs", "1", "--devices", "c0_d00,c1_d00"]
    assert main([*common, "--checkpoint-dir", str(tmp_path / "a")]) == 0
    assert main([*common, "--checkpoint-dir", str(tmp_path / "b")]) == 0
    for d in ("c0_d00", "c1_d00"):
        a = load_checkpoint(tmp_path / "a" / f"{d}.npz")
        b = load_checkpoint(tmp_path / "b" / f"{d}.npz")
        assert a.values.tobytes() == b.values.tobytes()

    out = tmp_path / "pre"
    assert main(["run", "--metadata-csv", str(meta), "--stream-csv", str(data), "--learner", "linear",
                 "--devices", "c0_d00,c1_d00", "--checkpoint-dir", str(tmp_path / "a"), "--rounds", "2",
                 "--output-dir", str(out)]) == 0
    assert read_csv(out / "avg_device_mse_last.csv")[0] == ["Methods", "Pretrain MSE"]


def test_pretrain_rejects_wrong_architecture(tmp_path, small_files, capsys):
    meta, data = small_files
    assert main(["pretrain", "--metadata-csv", str(meta), "--pretrain-csv", str(data), "--learner", "linear",
                 "--epochs", "1", "--checkpoint-dir", str(tmp_path / "ck")]) == 0
    code = main(["run", "--metadata-csv", str(meta), "--stream-csv", str(data), "--learner", "lstm", "--hidden", "4",
                 "--checkpoint-dir", str(tmp_path / "ck"), "--rounds", "1", "--output-dir", str(tmp_path / "r")])
    assert code == 2
    assert "do not fit" in capsys.readouterr().err


@pytest.fixture
def two_runs(tmp_path, small_files):
    meta, data = small_files
    dirs = []
    for mode in ("central", "neighborfl"):
        out = tmp_path / mode
        assert main(base_args(meta, data, out, "--rounds", "30", "--mode", mode)) == 0
        dirs.append(out)
    return dirs


def test_compare_outputs(tmp_path, two_runs):
    out = tmp_path / "cmp"
    assert main(["compare", *map(str, two_runs), "--out", str(out)]) == 0
    table = read_csv(out / "avg_device_mse_last.csv")
    assert table[0] == ["Methods", "Pretrain MSE", "Non-Pretrain MSE"]
    assert [r[0] for r in table[1:]] == ["Central", "NeighborFL L1"]
    assert all(r[1] == "" and float(r[2]) > 0 for r in table[1:])
    dev = read_csv(out / "device_mse_last.csv")
    assert dev[0] == ["device_id", "Central", "NeighborFL L1"] and len(dev) == 6
    svg = (out / "charts" / "smoothed_mse_c0_d00.svg").read_text()
    assert svg.count('class="series"') == 2
    assert 'data-name="Central"' in svg and 'data-name="NeighborFL L1"' in svg


def test_chart_window(tmp_path, two_runs, capsys):
    run_dir = two_runs[1]
    assert main(["chart", str(run_dir), "--rounds", "3:5", "--device", "c0_d01"]) == 0
    svg = (run_dir / "charts" / "prediction_c0_d01_r3-5.svg").read_text()
    assert svg.startswith("<svg") or svg.startswith("<?xml")
    assert svg.count('class="series"') == 2
    assert main(["chart", str(run_dir)]) == 0
    assert (run_dir / "charts" / "prediction_c0_d00_r7-30.svg").exists()
    assert main(["chart", str(run_dir), "--rounds", "40:50"]) == 2
    assert "1:30" in capsys.readouterr().err
    assert main(["chart", str(run_dir), "--device", "nope"]) == 2


def test_chart_requires_completed_run(tmp_path):
    assert main(["chart", str(tmp_path)]) == 2


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "f.txt"
    write_text(target, "old")

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr("os.replace", boom)
    with pytest.raises(OSError):
        write_text(target, "new")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]


def test_output_root_env(tmp_path, monkeypatch):
    from neighborfl.config import SimConfig

    monkeypatch.setenv(runner.OUTPUT_ROOT_ENV, str(tmp_path))
    assert runner.resolve_output_dir(SimConfig(mode="naivefl")) == tmp_path / "naivefl"
