import csv
import io
import json

import pytest

from mgipt import cli, viz
from mgipt.net import NumericError, save_checkpoint


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen", "--out", str(root), "--seed", "4", "--n-per-domain", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def model(tmp_path_factory, source_net):
    path = tmp_path_factory.mktemp("model") / "m.mseg"
    save_checkpoint(source_net, path)
    return path


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gen_layout_and_digests(tmp_path, capsys):
    code, first, _ = _run(capsys, "gen", "--out", tmp_path / "a", "--seed", 2, "--n-per-domain", 2)
    assert code == 0
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == list("ABCDE")
    assert len(list((tmp_path / "a" / "C").glob("*.imgt"))) == 2
    _, second, _ = _run(capsys, "gen", "--out", tmp_path / "b", "--seed", 2, "--n-per-domain", 2)
    assert first == second
    assert _run(capsys, "gen", "--out", tmp_path / "c", "--n-per-domain", 0)[0] == 2


def test_pretrain_zero_steps_is_reproducible(data_dir, tmp_path, capsys):
    code, out1, _ = _run(capsys, "pretrain", "--data", data_dir, "--out", tmp_path / "a.mseg", "--steps", 0)
    assert code == 0 and "held-out A DSC" in out1
    _, out2, _ = _run(capsys, "pretrain", "--data", data_dir, "--out", tmp_path / "b.mseg", "--steps", 0)
    assert out1 == out2
    assert (tmp_path / "a.mseg").read_bytes() == (tmp_path / "b.mseg").read_bytes()


def test_pretrain_gate(data_dir, tmp_path, capsys):
    code, _, err = _run(capsys, "pretrain", "--data", data_dir, "--out", tmp_path / "m.mseg", "--steps", 2)
    assert code == 4 and "gate" in err
    assert _run(capsys, "pretrain", "--data", data_dir, "--out", tmp_path / "m.mseg", "--steps", 2, "--no-gate")[0] == 0


def test_adapt_source_only_has_zero_pd(data_dir, model, tmp_path, capsys):
    out = tmp_path / "rep"
    code, text, _ = _run(capsys, "adapt", "--model", model, "--data", data_dir, "--out", out,
                         "--method", "source_only", "--rounds", 3)
    assert code == 0 and "PD 0.00" in text
    summary = json.loads((out / "summary.json").read_text())
    assert summary["pd"] == 0.0 and len(summary["per_round_avg"]) == 3
    assert json.loads((out / "config.json").read_text())["method"] == "source_only"


def test_adapt_mgipt_rounds_and_dumps(data_dir, model, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# three rounds\nrounds = 3\nlam = 0.8\ndomains = B, E\n")
    out = tmp_path / "rep"
    code, _, _ = _run(capsys, "adapt", "--model", model, "--data", data_dir, "--config", cfg, "--out", out,
                      "--dump-images")
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["per_round_avg"]) == 3 and "pd" in summary
    assert summary["config"]["domains"] == ["B", "E"] and summary["weights_unchanged"]
    ppms = sorted((out / "images").glob("*.ppm"))
    assert len(ppms) == 3 * 2 * 3
    for p in ppms:
        assert viz.read_ppm(p).shape == (64, 64, 3)
    assert (out / "bank" / "teacher_5.prmt").is_file()


def test_config_errors(data_dir, model, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    for text in ("learning_rate = 0.1\n", "lam = high\n", "lam 0.8\n", "lam = 2\n", "reset_student_optimizer = maybe\n"):
        bad.write_text(text)
        code, _, err = _run(capsys, "adapt", "--model", model, "--data", data_dir, "--config", bad, "--out", tmp_path / "r")
        assert code == 2, text
        assert "config error" in err
    assert _run(capsys, "adapt", "--model", model, "--data", data_dir, "--config", tmp_path / "none.cfg",
                "--out", tmp_path / "r")[0] == 2
    assert _run(capsys, "adapt", "--model", model, "--data", data_dir, "--out", tmp_path / "r", "--method", "tent")[0] == 2


def test_data_errors(data_dir, model, tmp_path, capsys):
    assert _run(capsys, "adapt", "--model", model, "--data", tmp_path / "empty", "--out", tmp_path / "r")[0] == 3
    junk = tmp_path / "junk.mseg"
    junk.write_bytes(b"NOPE" + bytes(60))
    assert _run(capsys, "adapt", "--model", junk, "--data", data_dir, "--out", tmp_path / "r")[0] == 3
    assert _run(capsys, "report", "--in", tmp_path / "missing")[0] == 3
    assert _run(capsys, "pretrain", "--data", tmp_path / "empty", "--out", tmp_path / "m.mseg")[0] == 3


def test_numeric_failure_exit_code(data_dir, model, tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite activations after enc1.bn1")

    monkeypatch.setattr(cli, "run_stream", boom)
    code, _, err = _run(capsys, "adapt", "--model", model, "--data", data_dir, "--out", tmp_path / "r")
    assert code == 4 and "enc1.bn1" in err


def test_report_formats_agree(data_dir, model, tmp_path, capsys):
    out = tmp_path / "rep"
    _run(capsys, "adapt", "--model", model, "--data", data_dir, "--out", out, "--method", "bn_calib_only", "--rounds", 2)
    _, csv_text, _ = _run(capsys, "report", "--in", out, "--format", "csv")
    _, md_text, _ = _run(capsys, "report", "--in", out, "--format", "md")
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    assert len(rows) == 4 * 2
    md_rows = [line for line in md_text.splitlines() if line.startswith("| ") and line.count("|") == 4
               and not line.startswith("| round")]
    assert len(md_rows) == 8
    for row, line in zip(rows, md_rows):
        cells = [c.strip() for c in line.strip("|").split("|")]
        assert cells == [row["round"], row["domain"], row["dsc"]]


def test_report_grid_over_several_runs(data_dir, model, tmp_path, capsys):
    for m in ("source_only", "bn_calib_only"):
        _run(capsys, "adapt", "--model", model, "--data", data_dir, "--out", tmp_path / m, "--method", m)
    _, text, _ = _run(capsys, "report", "--in", tmp_path / "source_only", tmp_path / "bn_calib_only", "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 8 and {r["run"] for r in rows} == {"source_only", "bn_calib_only"}


def test_sweep_parsing():
    key, vals = cli.parse_sweep("e=0.0:1.0:0.1")
    assert key == "ema_decay" and vals == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert cli.parse_sweep("lam=0,0.5,1") == ("lam", [0.0, 0.5, 1.0])
    assert cli.parse_sweep("bs=3,5") == ("bs", [3, 5])
    for bad in ("e", "zeta=0:1:0.1", "e=1:0:0.1", "e=0:1:0"):
        with pytest.raises(cli.ConfigError):
            cli.parse_sweep(bad)


def test_sweep_writes_one_report_per_value(data_dir, model, tmp_path, capsys):
    out = tmp_path / "sw"
    code, _, _ = _run(capsys, "adapt", "--model", model, "--data", data_dir, "--out", out,
                      "--method", "bn_calib_only", "--sweep", "lambda=0.0,1.0")
    assert code == 0
    assert (out / "lam=0.0" / "summary.json").is_file() and (out / "lam=1.0" / "summary.json").is_file()
    assert len((out / "sweep.csv").read_text().splitlines()) == 3


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert all(c in text for c in ("gen", "pretrain", "adapt", "report"))
