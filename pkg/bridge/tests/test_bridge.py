import json

import numpy as np
import pytest

from ldae_bridge.encode import BridgeConfig, BridgeError, bridge_encode, main, read_corpus

# The primary toolkit is only a test dependency: it verifies that bridge output
# loads through the consumer's own reader.
ldae_embeddings = pytest.importorskip("ldae.embeddings")


def _write_corpus(path, n_ped=60, n_bg=40):
    lines = []
    for i in range(n_ped):
        lines.append({"id": i, "text": f"A photo of a person number {i}.", "category": "Pedestrian"})
    for i in range(n_bg):
        lines.append({"id": n_ped + i, "text": f"A photo of a truck number {i}.", "category": "Background"})
    path.write_text("\n".join(json.dumps(obj) for obj in lines) + "\n")
    return lines


def test_hundred_line_corpus_roundtrip(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    lines = _write_corpus(corpus)
    out = tmp_path / "embeddings.ldae"
    summary = bridge_encode(BridgeConfig(str(corpus), str(out), model="hash"))
    assert summary["count"] == 100 and summary["dim"] == 768

    loaded = ldae_embeddings.load_embeddings(out)
    assert loaded.count == 100
    assert loaded.dim == 768
    assert loaded.normalized
    expected = np.array([1 if obj["category"] == "Pedestrian" else 0 for obj in lines], np.uint8)
    assert np.array_equal(loaded.labels, expected)
    assert np.allclose(np.linalg.norm(loaded.data, axis=1), 1.0, atol=1e-5)


def test_row_order_follows_corpus_order(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    _write_corpus(corpus, n_ped=3, n_bg=2)
    out_a, out_b = tmp_path / "a.ldae", tmp_path / "b.ldae"
    bridge_encode(BridgeConfig(str(corpus), str(out_a), model="hash"))
    # Encoding one line at a time must give the same rows in the same order.
    bridge_encode(BridgeConfig(str(corpus), str(out_b), model="hash", batch_size=1))
    assert out_a.read_bytes() == out_b.read_bytes()


def test_rerun_is_deterministic(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    _write_corpus(corpus, n_ped=10, n_bg=10)
    out = tmp_path / "embeddings.ldae"
    a = bridge_encode(BridgeConfig(str(corpus), str(out), model="hash"))
    b = bridge_encode(BridgeConfig(str(corpus), str(out), model="hash"))
    assert a["digest"] == b["digest"]


def test_empty_corpus_writes_nothing(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_text("\n")
    out = tmp_path / "embeddings.ldae"
    with pytest.raises(BridgeError):
        bridge_encode(BridgeConfig(str(corpus), str(out), model="hash"))
    assert not out.exists()


def test_malformed_line_reports_line_number(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_text(
        json.dumps({"text": "A photo of a person.", "category": "Pedestrian"})
        + "\nnot json\n"
    )
    with pytest.raises(BridgeError, match="line 2"):
        read_corpus(corpus)


def test_unknown_category_rejected(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_text(json.dumps({"text": "x.", "category": "Other"}) + "\n")
    with pytest.raises(BridgeError, match="line 1"):
        read_corpus(corpus)


def test_unnormalized_flag(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    _write_corpus(corpus, n_ped=4, n_bg=4)
    out = tmp_path / "raw.ldae"
    bridge_encode(BridgeConfig(str(corpus), str(out), model="hash", normalize=False))
    loaded = ldae_embeddings.load_embeddings(out)
    assert not loaded.normalized
    assert not np.allclose(np.linalg.norm(loaded.data, axis=1), 1.0, atol=1e-3)


def test_cli_entry_point(tmp_path, capsys):
    corpus = tmp_path / "corpus.jsonl"
    _write_corpus(corpus, n_ped=5, n_bg=5)
    out = tmp_path / "cli.ldae"
    code = main(["--corpus", str(corpus), "--out", str(out), "--model", "hash"])
    assert code == 0
    assert "10 x 768" in capsys.readouterr().out
    assert out.exists()


def test_cli_error_exit(tmp_path, capsys):
    out = tmp_path / "cli.ldae"
    code = main(["--corpus", str(tmp_path / "missing.jsonl"), "--out", str(out), "--model", "hash"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_config_validation(tmp_path):
    with pytest.raises(BridgeError):
        BridgeConfig("a", "b", batch_size=0)
