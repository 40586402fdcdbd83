import json

import numpy as np
import pytest

from seld3d.cli import main
from seld3d.tensorio import load_tensor, read_wav


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--clips", "4", "--seed", "7", "--format", "foa", "--out", str(d)]) == 0
    return d


def test_synth_writes_pairs_and_is_repeatable(dataset, tmp_path):
    wavs = sorted((dataset / "foa").glob("*.wav"))
    assert len(wavs) == 4 and len(list((dataset / "metadata").glob("*.csv"))) == 4
    other = tmp_path / "again"
    assert main(["synth", "--clips", "4", "--seed", "7", "--out", str(other)]) == 0
    for w in wavs:
        assert (other / "foa" / w.name).read_bytes() == w.read_bytes()
    assert (other / "manifest.csv").read_bytes() == (dataset / "manifest.csv").read_bytes()


def test_synth_binaural_is_stereo(tmp_path):
    assert main(["synth", "--clips", "1", "--format", "binaural", "--out", str(tmp_path)]) == 0
    sr, audio = read_wav(tmp_path / "binaural" / "clip_0000.wav")
    assert sr == 24000 and audio.shape[0] == 2


def test_extract_shapes_and_idempotence(dataset, tmp_path):
    out = tmp_path / "feat"
    assert main(["extract", "--data", str(dataset), "--out", str(out)]) == 0
    files = sorted(out.glob("*.s3dt"))
    assert len(files) == 4
    assert load_tensor(files[0]).shape == (7, 250, 64)
    stamp = files[0].stat().st_mtime_ns
    assert main(["extract", "--data", str(dataset), "--out", str(out)]) == 0
    assert files[0].stat().st_mtime_ns == stamp


def test_extract_binaural_shape(tmp_path):
    main(["synth", "--clips", "1", "--format", "binaural", "--out", str(tmp_path)])
    assert main(["extract", "--data", str(tmp_path), "--format", "binaural"]) == 0
    arr = load_tensor(tmp_path / "features_binaural" / "clip_0000.s3dt")
    assert arr.shape == (4, 250, 512)


def test_extract_reports_bad_files(tmp_path):
    (tmp_path / "a.wav").write_bytes(b"not audio")
    assert main(["extract", "--data", str(tmp_path), "--out", str(tmp_path / "f")]) == 2


def test_score_self_is_perfect(dataset, tmp_path):
    report = tmp_path / "r.json"
    meta = str(dataset / "metadata")
    assert main(["score", "--refs", meta, "--preds", meta, "--json", str(report)]) == 0
    r = json.loads(report.read_text())
    assert r["schema"] == 1
    assert (r["er"], r["f1"], r["doa_error"], r["recall"], r["dist_error"]) == (0, 100, 0, 100, 0)
    assert set(r["ci"]) == {"er", "f1", "doa_error", "recall", "dist_error"}
    assert main(["eval", "--refs", meta, "--preds", meta, "--no-ci", "--json", str(report)]) == 0
    assert json.loads(report.read_text())["ci"] == {}


def test_score_missing_predictions(dataset, tmp_path):
    (tmp_path / "p").mkdir()
    assert main(["score", "--refs", str(dataset / "metadata"), "--preds", str(tmp_path / "p")]) == 2


def test_train_and_eval_from_checkpoint(tmp_path):
    dataset = tmp_path / "data"
    assert main(["synth", "--clips", "4", "--seed", "3", "--out", str(dataset),
                 "--same-class-overlap", "false"]) == 0
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# tiny run\nepochs=2\nhidden=8\ncontext=0\n")
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(run), "--config", str(cfg),
                 "--method", "mt", "--dist-loss", "mape"]) == 0
    assert (run / "model.s3dc").exists()
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "r2"), "--config", str(cfg),
                 "--loss", "mae"]) == 0
    log = (run / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,val_loss" and len(log) == 3
    assert "dist_loss=mape" in (run / "config.txt").read_text()
    report = tmp_path / "e.json"
    assert main(["eval", "--checkpoint", str(run / "model.s3dc"), "--data", str(dataset),
                 "--json", str(report), "--write-preds", str(tmp_path / "preds")]) == 0
    r = json.loads(report.read_text())
    assert r["n_clips"] == 4 and 0 <= r["f1"] <= 100
    assert len(list((tmp_path / "preds").glob("*.csv"))) == 4


def test_usage_errors_exit_1(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "x"),
                 "--method", "multi-accddoa", "--loss", "mspe"]) == 1
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus"])
    assert e.value.code == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense=3\n")
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "y"), "--config", str(bad)]) == 1
    assert main(["eval", "--refs", str(dataset)]) == 1


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    assert "default: 75" in capsys.readouterr().out


def test_threads_env(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("SELD3D_THREADS", "2")
    out = tmp_path / "f2"
    assert main(["extract", "--data", str(dataset), "--out", str(out)]) == 0
    ref = tmp_path / "f1"
    monkeypatch.setenv("SELD3D_THREADS", "1")
    main(["extract", "--data", str(dataset), "--out", str(ref)])
    for f in sorted(out.glob("*.s3dt")):
        np.testing.assert_array_equal(load_tensor(f), load_tensor(ref / f.name))
