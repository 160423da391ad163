import json

import pytest

from fewshot_ad import cli
from fewshot_ad.cli import EXIT_INTERNAL, EXIT_OK, EXIT_USER, main
from fewshot_ad.errors import TrainingDivergedError


def _summary(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


def test_unknown_flag_is_a_user_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", "x", "--bogus"])
    assert exc.value.code == EXIT_USER
    assert "usage" in capsys.readouterr().err


def test_missing_command(capsys):
    assert main([]) == EXIT_USER


def test_synth_emits_one_json_line(tmp_path, capsys):
    out = tmp_path / "data"
    code = main(["synth", "--out", str(out), "--families", "grid", "--image-size", "16", "16",
                 "--n-train", "2", "--n-test-normal", "1", "--n-test-anom", "3"])
    assert code == EXIT_OK
    summary = _summary(capsys)
    assert summary["command"] == "synth"
    assert summary["categories"] == [{"category": "grid", "files": 6}]
    assert (out / "grid" / "manifest.json").exists()


def test_missing_checkpoint_is_a_user_error(tmp_path, capsys):
    code = main(["generate-normals", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "pool")])
    assert code == EXIT_USER
    assert "error:" in capsys.readouterr().err


def test_customize_needs_a_category(tmp_path):
    assert main(["customize", str(tmp_path), "--out", str(tmp_path / "m.ckpt")]) == EXIT_USER


def test_bad_config_value_is_a_user_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--t-ratio", "1.5"]) == EXIT_USER


def test_internal_errors_exit_2(tmp_path, monkeypatch):
    def broken(args, config):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "cmd_synth", broken)
    assert main(["synth", "--out", str(tmp_path)]) == EXIT_INTERNAL


def test_diverged_training_is_internal(tmp_path, monkeypatch, capsys):
    def diverged(args, config):
        raise TrainingDivergedError("loss became non-finite at epoch 3")

    monkeypatch.setattr(cli, "cmd_synth", diverged)
    assert main(["synth", "--out", str(tmp_path)]) == EXIT_INTERNAL
    assert "non-finite" in capsys.readouterr().err


def test_pipeline_commands(tmp_path, tiny_dataset, tiny_config, capsys):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(tiny_config.to_dict()))
    common = ["--config", str(config)]
    ckpt, bank, pool = tmp_path / "stripes.ckpt", tmp_path / "stripes.bank", tmp_path / "pool"

    assert main(["customize", str(tiny_dataset), "--category", "stripes", "--out", str(ckpt),
                 *common]) == EXIT_OK
    assert _summary(capsys)["shots"] == 2

    assert main(["generate-normals", str(ckpt), "--count", "2", "--out", str(pool), *common]) == EXIT_OK
    assert _summary(capsys)["count"] == 2

    assert main(["bank", str(ckpt), "--pool", str(pool), "--out", str(bank), *common]) == EXIT_OK
    assert _summary(capsys)["entries"] == 4

    reports = tmp_path / "reports.json"
    assert main(["score", str(ckpt), str(bank), str(tiny_dataset / "stripes" / "test"),
                 "--out", str(reports), *common]) == EXIT_OK
    assert _summary(capsys)["queries"] == 5
    stored = json.loads(reports.read_text())
    assert stored["branches"] == "P,N,text"
    assert {r["query"] for r in stored["reports"]} >= {"good/000", "spot/000"}

    query = tiny_dataset / "stripes" / "test" / "spot" / "000.png"
    mask = tiny_dataset / "stripes" / "ground_truth" / "spot" / "000_mask.png"
    assert main(["map", str(ckpt), str(bank), str(query), "--out", str(tmp_path / "map.png"),
                 "--figure", str(tmp_path / "panel.png"), "--mask", str(mask), *common]) == EXIT_OK
    assert (tmp_path / "map.png").exists() and (tmp_path / "panel.png").exists()

    assert main(["personalize", str(ckpt), str(query), "--out", str(tmp_path / "pers"),
                 *common]) == EXIT_OK
    assert (tmp_path / "pers" / "000_personalized.png").exists()


def test_eval_tables_repeat_exactly(tmp_path, tiny_dataset, tiny_config, capsys):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(tiny_config.to_dict()))
    tables = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["eval", str(tiny_dataset), "--category", "stripes", "--no-cache",
                     "--out", str(out), "--config", str(config)]) == EXIT_OK
        assert _summary(capsys)["rows"] == 6
        tables.append((out / "table.txt").read_text())
    assert tables[0] == tables[1]
    assert "P,N,text" in tables[0]
