import json

import pytest

from genlab.cli import build_parser, config_from_args, main


def test_parser_maps_flags():
    args = build_parser().parse_args(["spatial", "--seed", "7", "--cmig", "2", "--sites", "3", "--replicates", "9"])
    cfg = config_from_args(args)
    assert cfg.seed == 7 and cfg.replicates == 9
    assert cfg.params.cmig == 2.0 and cfg.options == {"sites": 3}


def test_simulate_writes_tree(tmp_path, capsys):
    assert main(["simulate", "--seed", "1", "--N", "100", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "[PASS] total mass" in out and "record:" in out
    tree = json.loads((tmp_path / "tree.json").read_text())
    assert "merges" in tree
    assert len(list((tmp_path / "runs").glob("simulate-*.json"))) == 1


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "cox.toml"
    cfg.write_text('command = "cox"\nseed = 4\nreplicates = 300\n[options]\nh = 0.5\n')
    assert main(["cox", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path)]) == 0
    rec = json.loads(next((tmp_path / "runs").glob("cox-*.json")).read_text())
    assert rec["config"]["seed"] == 5 and rec["config"]["options"]["h"] == 0.5
    with pytest.raises(SystemExit):
        main(["simulate", "--config", str(cfg), "--out", str(tmp_path)])


def test_exit_codes(tmp_path, capsys):
    assert main(["cox", "--replicates", "0", "--out", str(tmp_path)]) == 2
    assert main(["accept", "--criteria", "12", "--out", str(tmp_path)]) == 0
    assert "[PASS] 12 algebra exactness" in capsys.readouterr().out


def test_failing_run_exits_one(tmp_path, monkeypatch):
    from genlab import harness
    from genlab.conditioned import Report
    monkeypatch.setitem(harness.DISPATCH, "cox", lambda cfg, p: ([Report("x", 0.0, 1.0, 0.1, False)], {}))
    assert main(["cox", "--out", str(tmp_path)]) == 1
