import json
import shutil

import numpy as np
import pytest

from avse import cli, data, evaluation
from avse.model import load_checkpoint
from avse.train import load_examples

TINY = {"model": {"channels": 2, "visual_dim": 2}, "train": {"epochs": 1}}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture(scope="module")
def trained(small_corpus, tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    manifest = str(small_corpus.path("manifest.jsonl"))
    assert cli.main(["train", "--manifest", manifest, "--config", tiny_config,
                     "--loss", "stoi", "--mode", "av", "--out", str(out)]) == 0
    return out


def test_train_outputs(trained):
    history = [json.loads(ln) for ln in (trained / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in history] == [0, 1]
    assert set(history[0]) == {"epoch", "train_loss", "val_loss", "val_modified_stoi"}
    ck = load_checkpoint(trained / "best.ckpt")
    assert ck.config.use_visual and ck.config.channels == 2
    saved = json.loads((trained / "train_config.json").read_text())
    assert saved["train"]["loss"] == "stoi"


def test_audio_only_training_ignores_visual_files(small_corpus, tiny_config, tmp_path):
    root = tmp_path / "corpus"
    shutil.copytree(small_corpus.root, root)
    shutil.rmtree(root / "visual")
    assert cli.main(["train", "--manifest", str(root / "manifest.jsonl"), "--config", tiny_config,
                     "--loss", "mse", "--mode", "ao", "--out", str(tmp_path / "ao")]) == 0
    assert cli.main(["train", "--manifest", str(root / "manifest.jsonl"), "--config", tiny_config,
                     "--loss", "mse", "--mode", "av", "--out", str(tmp_path / "av")]) == cli.EXIT_DATA


def test_usage_errors(small_corpus, tmp_path, capsys):
    manifest = str(small_corpus.path("manifest.jsonl"))
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--manifest", manifest, "--loss", "huber", "--out", str(tmp_path)])
    assert e.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        cli.main(["evaluate", "--manifest", manifest])
    assert e.value.code == cli.EXIT_USAGE


def test_data_errors(tmp_path, capsys):
    assert cli.main(["evaluate", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == cli.EXIT_DATA
    assert "no such manifest" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert cli.main(["synth-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_DATA


def test_evaluate_report(small_corpus, trained, tmp_path, capsys):
    manifest = str(small_corpus.path("manifest.jsonl"))
    rc = cli.main(["evaluate", "--manifest", manifest, "--checkpoint", f"av={trained / 'best.ckpt'}",
                   "--identity", "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "report.jsonl").read_text().splitlines()
    records, agg = [json.loads(x) for x in lines[:-1]], json.loads(lines[-1])["aggregates"]
    assert {r["system"] for r in records} == {"noisy", "av", "irm", "clean"}
    assert len(records) == 4 * len(small_corpus.split("test"))
    assert set(records[0]["metrics"]) == set(evaluation.METRIC_FIELDS)
    for m in ("stoi", "estoi", "modified_stoi", "modified_estoi"):
        assert agg["clean"][m] == pytest.approx(1.0, abs=1e-6)
    assert agg["irm"]["modified_stoi"] > agg["noisy"]["modified_stoi"]
    table = (tmp_path / "table.txt").read_text()
    assert "PESQ" in table and "irm" in table
    assert table == capsys.readouterr().out


def test_report_aggregates_are_means(small_corpus):
    ex = load_examples(small_corpus, "test", visual=False)
    report = evaluation.evaluate(ex)
    agg = report.aggregates()
    noisy = [r["metrics"]["si_sdr"] for r in report.records if r["system"] == "noisy"]
    assert agg["noisy"]["si_sdr"] == pytest.approx(np.mean(noisy), abs=1e-12)
    assert agg["noisy"]["count"] == len(ex)


def test_correlate(small_corpus, tmp_path):
    manifest = str(small_corpus.path("manifest.jsonl"))
    assert cli.main(["correlate", "--manifest", manifest, "--split", "all", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "correlation.json").read_text())
    assert summary["pairs"] == 2 * len(small_corpus.entries)
    rows = (tmp_path / "scatter.csv").read_text().splitlines()
    assert rows[0] == "id,system,stoi,modified_stoi,estoi,modified_estoi"
    assert len(rows) == summary["pairs"] + 1
    assert cli.main(["correlate", "--manifest", manifest, "--split", "dev", "--out", str(tmp_path)]) == cli.EXIT_DATA


def test_spectrogram_export(small_corpus, tmp_path):
    wav = small_corpus.path(small_corpus.entries[0].clean_path)
    assert cli.main(["spectrogram", str(wav), "--out", str(tmp_path)]) == 0
    db = np.load(tmp_path / f"{wav.stem}.npy")
    T = data.extract_features(data.load_wav(wav)).mag.mags.shape[1]
    assert db.shape == (257, T) and db.min() >= cli.DB_FLOOR
    blob = (tmp_path / f"{wav.stem}.pgm").read_bytes()
    header = f"P5\n{T} 257\n255\n".encode()
    assert blob.startswith(header) and len(blob) == len(header) + 257 * T


def test_write_pgm_orientation(tmp_path):
    db = np.full((4, 3), -80.0)
    db[0] = 0.0  # lowest frequency row is loudest
    cli.write_pgm(db, tmp_path / "x.pgm")
    img = np.frombuffer((tmp_path / "x.pgm").read_bytes()[-12:], np.uint8).reshape(4, 3)
    assert np.all(img[-1] == 255) and np.all(img[:-1] == 0)


def test_spectrogram_silent_input(tmp_path):
    wav = tmp_path / "silence.wav"
    data.save_wav(data.Waveform(np.zeros(8000), data.SAMPLE_RATE), wav)
    assert cli.main(["spectrogram", str(wav), "--out", str(tmp_path)]) == 0
    assert np.all(np.load(tmp_path / "silence.npy") == cli.DB_FLOOR)
    img = np.frombuffer((tmp_path / "silence.pgm").read_bytes(), np.uint8)
    assert np.unique(img[-257:]).size == 1


def test_spectrogram_db_spot_values():
    mags = np.array([[1.0, 0.1], [1e-3, 1e-5]])
    assert np.allclose(cli.spectrogram_db(mags), [[0.0, -20.0], [-60.0, -80.0]])
    assert cli.spectrogram_db(np.array([[0.5]]))[0, 0] == pytest.approx(20 * np.log10(0.5))


def test_synth_data_seed_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"corpus": {"clean_per_split": {"train": 2, "val": 2, "test": 2},
                                          "speakers_per_split": {"train": 2, "val": 2, "test": 2},
                                          "duration": 0.6}}))
    for name in ("a", "b"):
        assert cli.main(["synth-data", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "manifest.jsonl").read_text().splitlines()[1:] == \
        (tmp_path / "b" / "manifest.jsonl").read_text().splitlines()[1:]
