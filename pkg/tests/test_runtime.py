import json

import numpy as np
import pytest

from mgipt import bench, runtime, training
from mgipt.metrics import confidence, dsc
from mgipt.net import NumericError, forward, sigmoid
from mgipt.prompt import to_nchw
from mgipt.runtime import ConfigError, RunConfig, adapt_sample, ensemble, run_stream, summary_json


def test_confidence_values():
    assert confidence(np.zeros((2, 4, 4))) == 0.5
    assert confidence(np.full((2, 4, 4), 80.0)) == pytest.approx(1.0)
    mixed = np.zeros((2, 4, 4))
    mixed[:, :2] = 60.0
    assert confidence(mixed) == pytest.approx(0.75, abs=1e-6)
    assert confidence(mixed, "min") == 0.5
    with pytest.raises(ValueError):
        confidence(mixed, "median")


def test_ensemble_weights():
    rng = np.random.default_rng(0)
    maps = [rng.uniform(size=(2, 4, 4)) for _ in range(4)]
    _, w_ip, w_gp = ensemble(maps[0], maps[1:], 0.9, [0.8, 0.7, 0.6])
    np.testing.assert_allclose([w_ip, *w_gp], [0.3, 0.2667, 0.2333, 0.2], atol=1e-4)
    out, w_ip, w_gp = ensemble(maps[0], maps[1:], 1.0, [0.0, 0.0, 0.0])
    assert np.array_equal(out, maps[0]) and w_ip == 1.0
    _, w_ip, w_gp = ensemble(maps[0], maps[1:], 0.0, [0.0, 0.0, 0.0])
    assert [w_ip, *w_gp] == [0.25] * 4
    same, w_ip, w_gp = ensemble(maps[0], [maps[0]] * 3, 0.7, [0.7] * 3)
    np.testing.assert_allclose(same, maps[0], atol=1e-15)
    assert [w_ip, *w_gp] == pytest.approx([0.25] * 4)
    _, w_ip, w_gp = ensemble(None, maps[1:], None, [1.0, 1.0, 2.0])
    assert w_ip == 0.0 and w_gp == pytest.approx([0.25, 0.25, 0.5])
    with pytest.raises(ValueError):
        ensemble(maps[0], maps[1:], -0.1, [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        ensemble(None, [], None, [])


def test_dsc_values():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a.flat[:6] = True
    b.flat[2:10] = True
    assert dsc(a, b)[0] == pytest.approx(8 / 14, abs=1e-4)
    assert dsc(a, a)[0] == 1.0
    assert dsc(a, ~a)[0] == 0.0
    assert dsc(np.zeros((4, 4)), np.zeros((4, 4)))[0] == 1.0
    with pytest.raises(ValueError):
        dsc(a, np.zeros((4, 5)))


def test_config_validation():
    for kw in ({"method": "tent"}, {"lam": 1.5}, {"ema_decay": -0.1}, {"rounds": 0},
               {"bn_loss_scope": "decoder"}, {"confidence_reduce": "max"}, {"student_init": "zero"}):
        with pytest.raises(ConfigError):
            RunConfig(**kw)
    assert RunConfig().to_dict()["domains"] == ["B", "C", "D", "E"]


@pytest.fixture(scope="module")
def sample():
    ds = bench.generate_domain("D", 1, seed=12)
    return ds.images[0], ds.masks[0]


def test_source_only_is_plain_forward(source_net, sample):
    x, m = sample
    out, rec, _ = adapt_sample(x, source_net, None, RunConfig(method="source_only"), mask=m)
    assert np.array_equal(out, sigmoid(forward(source_net, to_nchw(x), "source")[0][0]))
    assert rec.w_ip == 1.0 and rec.trace == [] and rec.w_gp == []


def test_bn_calib_only_is_calibrated_forward(source_net, sample):
    x, m = sample
    out, _, _ = adapt_sample(x, source_net, None, RunConfig(method="bn_calib_only"), mask=m)
    assert np.array_equal(out, sigmoid(forward(source_net, to_nchw(x), 0.8)[0][0]))


def test_full_sample_record(source_net, sample):
    x, m = sample
    cfg = RunConfig()
    out, rec, extras = adapt_sample(x, source_net, cfg.make_bank(), cfg, "s", "D", 1, m)
    weights = [rec.w_ip, *rec.w_gp]
    assert len(weights) == 4 and min(weights) >= 0 and sum(weights) == pytest.approx(1.0, abs=1e-9)
    assert rec.trace and rec.best_scale % 2 == 1
    assert np.all(np.isfinite(rec.dsc)) and len(rec.dsc) == 2
    assert out.shape == (2, 64, 64) and extras["prompt"] is not None
    assert "wall_time" not in json.loads(rec.to_json()) and "wall_time" in json.loads(rec.to_json(True))


def test_failed_branch_is_dropped(source_net, sample, monkeypatch):
    x, m = sample
    real = runtime._branch

    def flaky(net, image, prompt, mode, reduce):
        if prompt is not None and prompt.size == 5 and not prompt.frozen.any():
            raise NumericError("injected")
        return real(net, image, prompt, mode, reduce)

    monkeypatch.setattr(runtime, "_branch", flaky)
    cfg = RunConfig(method="gp_only")
    _, rec, _ = adapt_sample(x, source_net, cfg.make_bank(), cfg, mask=m)
    assert len(rec.w_gp) == 2 and sum(rec.w_gp) == pytest.approx(1.0, abs=1e-9)


def test_source_only_on_source_data_matches_validation(source_net):
    ds = bench.generate_domain("A", 12, seed=30)
    summary, _ = run_stream([ds], source_net, RunConfig(method="source_only", domains=("A",)))
    ref = 100 * training.evaluate(source_net, ds.images, ds.masks, "source")
    assert summary["per_domain_dsc"]["1"]["A"] == pytest.approx(ref, abs=0.1)


def test_stateless_method_has_zero_pd(source_net):
    streams = [bench.generate_domain(d, 3, seed=31) for d in "BCDE"]
    summary, records = run_stream(streams, source_net, RunConfig(method="source_only", rounds=3))
    assert summary["pd"] == 0.0
    assert len(records) == 36 and {r.round for r in records} == {1, 2, 3}
    assert summary["per_round_avg"][0] == summary["per_round_avg"][2]


def test_stream_keeps_weights_and_is_deterministic(source_net, tmp_path):
    streams = [bench.generate_domain(d, 2, seed=32) for d in "BCDE"]
    cfg = RunConfig(rounds=2)
    digest = source_net.digest()
    s1, recs = run_stream(streams, source_net, cfg, dump_dir=tmp_path / "img")
    s2, _ = run_stream(streams, source_net, cfg)
    assert s1["weights_unchanged"] and source_net.digest() == digest == s1["weights_digest"]
    assert summary_json(s1) == summary_json(s2)
    assert s1["teacher_samples_seen"] == 16
    for rec in recs:
        w = [rec.w_ip, *rec.w_gp]
        assert min(w) >= 0 and sum(w) == pytest.approx(1.0, abs=1e-9)
    assert len(list((tmp_path / "img").glob("*_prompt.ppm"))) == 16


def test_report_files(source_net, tmp_path):
    streams = [bench.generate_domain(d, 2, seed=33) for d in "BC"]
    cfg = RunConfig(method="bn_calib_only", domains=("B", "C"), rounds=2)
    summary, records = run_stream(streams, source_net, cfg)
    runtime.write_report(tmp_path, summary, records, cfg)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["config.json", "records.jsonl", "summary.csv", "summary.json"]
    assert len((tmp_path / "records.jsonl").read_text().splitlines()) == 8
    assert len((tmp_path / "summary.csv").read_text().splitlines()) == 1 + 2 * 2
    assert runtime.load_report(tmp_path) == json.loads(summary_json(summary))
    assert json.loads((tmp_path / "config.json").read_text())["method"] == "bn_calib_only"
    with pytest.raises(FileNotFoundError):
        runtime.load_report(tmp_path / "missing")
