import csv
import json

import numpy as np
import pytest

from safemogp.cli import AGGREGATE_METRICS, TRAJECTORY_COLUMNS, main

FAST_INFERENCE = {"method": "type2", "restarts": 1}


def write_config(tmp_path, **overrides):
    doc = {
        "dataset": {"kind": "sin_sigmoid", "params": {"n_pool": 60, "n_test": 30}},
        "pipeline": ["AL_MOGP", "RS_MOGP"],
        "inference": FAST_INFERENCE,
        "iter_num": 3,
        "repeats": 2,
        "seed": 5,
    }
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_zero_iterations_writes_baseline_only(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(write_config(tmp_path, iter_num=0, repeats=1, pipeline=["AL_MOGP"])),
                 "--out", str(out)]) == 0
    rows = read_rows(out / "trajectories" / "AL_MOGP_r000.csv")
    assert tuple(rows[0]) == TRAJECTORY_COLUMNS
    assert len(rows) == 2 and rows[1][2] == "0" and rows[1][3] == "12"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["iter_num"] == 0 and manifest["runs"][0]["status"] == "completed"


def test_outputs_and_aggregate(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
    files = sorted(p.name for p in (out / "trajectories").iterdir())
    assert files == ["AL_MOGP_r000.csv", "AL_MOGP_r001.csv", "RS_MOGP_r000.csv", "RS_MOGP_r001.csv"]
    for name in files:
        rows = read_rows(out / "trajectories" / name)
        assert len(rows) == 1 + 1 + 3
        assert [int(r[3]) for r in rows[1:]] == [12, 13, 14, 15]
        assert all(len(r[10].split(";")) == 2 for r in rows[1:])

    with open(out / "aggregate.csv", newline="") as fh:
        agg = list(csv.DictReader(fh))
    assert len(agg) == 2 * 4
    for row in agg:
        per_repeat = []
        for r in range(2):
            with open(out / "trajectories" / f"{row['pipeline']}_r{r:03d}.csv", newline="") as fh:
                per_repeat.append(list(csv.DictReader(fh))[int(row["iteration"])])
        for m in AGGREGATE_METRICS:
            vals = np.array([float(p[m]) for p in per_repeat if p[m] != ""])
            if len(vals) < 2:  # the baseline row has no query, so no truly_safe
                assert m == "truly_safe" and row[f"{m}_se"] == "nan"
                continue
            assert float(row[f"{m}_mean"]) == pytest.approx(np.mean(vals), abs=1e-12)
            assert float(row[f"{m}_se"]) == pytest.approx(np.std(vals, ddof=1) / np.sqrt(2), abs=1e-12)

    timings = read_rows(out / "timings.csv")
    assert len(timings) == 1 + 4 * 4


def test_byte_identical_reruns(tmp_path):
    cfg = write_config(tmp_path, pipeline=["AL_MOGP", "AL_indGPs"], repeats=1)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(b)]) == 0
    for name in ("AL_MOGP_r000.csv", "AL_indGPs_r000.csv"):
        assert (a / "trajectories" / name).read_bytes() == (b / "trajectories" / name).read_bytes()
    assert (a / "aggregate.csv").read_bytes() == (b / "aggregate.csv").read_bytes()


def test_seed_override_changes_results(tmp_path):
    cfg = write_config(tmp_path, pipeline=["RS_MOGP"], repeats=1, iter_num=2)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "6"]) == 0
    name = "trajectories/RS_MOGP_r000.csv"
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 6 and manifest["runs"][0]["seed"][:2] == [6, 0]


def test_parallel_matches_serial(tmp_path):
    cfg = write_config(tmp_path, pipeline=["RS_MOGP"], iter_num=2)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "p"), "--jobs", "2"]) == 0
    assert (tmp_path / "s" / "aggregate.csv").read_bytes() == (tmp_path / "p" / "aggregate.csv").read_bytes()


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["run", "--config", str(write_config(tmp_path, iter_num=-2))]) == 1
    assert "iter_num" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1


def test_csv_dataset_requires_threshold(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text("x,y,z\n" + "".join(f"{i},{i},{i}\n" for i in range(30)))
    cfg = write_config(tmp_path, dataset={"kind": "csv", "params": {
        "path": str(data), "input_columns": ["x"], "output_columns": ["y"], "safety_column": "z"}})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "safety.z_bar" in capsys.readouterr().err


class TestVerify:
    def test_default_corpus_passes(self, tmp_path):
        out = tmp_path / "report.csv"
        assert main(["verify", "--count", "30", "--out", str(out)]) == 0
        rows = read_rows(out)
        assert rows[0] == ["check", "lhs", "rhs", "slack", "holds", "precondition", "detail"]
        assert len(rows) == 1 + 5 * 30 and all(r[4] == "1" for r in rows[1:])

    @pytest.mark.parametrize("seed", ["1", "987654321", str(2 ** 64 - 1)])
    def test_varied_seed_passes(self, tmp_path, seed):
        assert main(["verify", "--seed", seed, "--count", "20", "--out", str(tmp_path / "r.csv")]) == 0

    def test_halved_constant_fails(self, tmp_path):
        code = main(["verify", "--count", "50", "--checks", "lemma1", "--c1-scale", "0.5",
                     "--out", str(tmp_path / "r.csv")])
        assert code == 3

    def test_bad_seed_rejected(self):
        with pytest.raises(SystemExit):
            main(["verify", "--seed", "-1"])
