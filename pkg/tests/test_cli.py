import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cxrkit import __version__
from cxrkit.cli import main

REPORTS = [
    {"id": "r1", "findings": "Moderate cardiomegaly. No pleural effusion.", "impression": "Cardiomegaly."},
    {"id": "r2", "findings": "Lungs are clear.", "impression": "No acute cardiopulmonary process."},
    {"id": "r3", "findings": "Small left pleural effusion.", "impression": "Small left pleural effusion."},
]


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line]


@pytest.fixture
def corpus(write_jsonl):
    return write_jsonl("reports.jsonl", REPORTS)


def test_label(corpus, tmp_path):
    out = tmp_path / "labels.jsonl"
    assert main(["label", "--corpus", str(corpus), "--out", str(out)]) == 0
    rows = read_jsonl(out)
    assert [r["id"] for r in rows] == ["r1", "r2", "r3"]
    assert rows[0]["states"][2] == "Positive"  # Cardiomegaly
    assert rows[0]["fine"] == ["cardiomegaly", "moderate cardiomegaly"]
    assert rows[1]["states"][0] == "Positive"  # No Finding
    assert all(len(r["states"]) == 14 for r in rows)


def test_label_skips_reports_without_section(write_jsonl, tmp_path, caplog):
    corpus = write_jsonl("c.jsonl", REPORTS + [{"id": "r4", "impression": "Edema."}])
    out = tmp_path / "labels.jsonl"
    assert main(["label", "--corpus", str(corpus), "--out", str(out)]) == 0
    assert [r["id"] for r in read_jsonl(out)] == ["r1", "r2", "r3"]
    assert "lack section" in caplog.text


def test_vocab(corpus, tmp_path):
    out = tmp_path / "vocab.tsv"
    assert main(["vocab", "--corpus", str(corpus), "--threshold", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "surface\tcategory\tcount"
    assert {l.split("\t")[0] for l in lines[1:]} == {"cardiomegaly", "moderate cardiomegaly", "pleural effusion",
                                                    "small pleural effusion", "left pleural effusion"}
    assert main(["vocab", "--corpus", str(corpus), "--threshold", "0", "--out", str(out)]) == 2


def test_cluster(corpus, tmp_path, capsys):
    out = tmp_path / "clusters.jsonl"
    assert main(["cluster", "--corpus", str(corpus), "--out", str(out)]) == 0
    got = {r["id"]: r["cluster_name"] for r in read_jsonl(out)}
    assert got == {"r1": "Cardiomegaly", "r2": "No Finding", "r3": "Pleural Effusion/Other"}
    assert "Pleural Effusion/Other" in capsys.readouterr().out


@pytest.fixture
def eval_files(write_jsonl):
    refs = [{"id": r["id"], "text": r["findings"]} for r in REPORTS]
    return write_jsonl("cands.jsonl", refs), write_jsonl("refs.jsonl", refs)


def test_eval_identity_json(eval_files, tmp_path):
    cands, refs = eval_files
    out = tmp_path / "scores.json"
    assert main(["eval", "--candidates", str(cands), "--references", str(refs), "--out", str(out),
                 "--per-class"]) == 0
    res = json.loads(out.read_text())
    assert res["n_pairs"] == 3
    for key in ("B1", "B2", "B3", "B4", "RG", "P", "R", "F1"):
        assert res[key] == pytest.approx(1.0), key
    # one chunk per pair: the fragmentation penalty never quite vanishes
    lengths = [5, 3, 4]
    assert res["MTR"] == pytest.approx(np.mean([1 - 0.5 * (1 / m) ** 3 for m in lengths]))
    assert res["per_class"]["Cardiomegaly"] == 1.0
    assert res["per_class"]["Fracture"] is None


def test_eval_csv(eval_files, tmp_path):
    cands, refs = eval_files
    out = tmp_path / "scores.csv"
    assert main(["eval", "--candidates", str(cands), "--references", str(refs), "--out", str(out),
                 "--format", "csv"]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1
    assert list(rows[0])[:9] == ["n_pairs", "B1", "B2", "B3", "B4", "RG", "MTR", "CDR", "P"]
    assert float(rows[0]["F1"]) == 1.0


def test_eval_id_mismatch_is_domain_error(write_jsonl, tmp_path):
    cands = write_jsonl("c.jsonl", [{"id": "a", "text": "edema"}])
    refs = write_jsonl("r.jsonl", [{"id": "b", "text": "edema"}])
    out = tmp_path / "x.json"
    assert main(["eval", "--candidates", str(cands), "--references", str(refs), "--out", str(out)]) == 1
    assert not out.exists()


def test_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(["label", "--corpus", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")]) == 2
    assert main(["nonsense"]) == 2
    assert main(["gradcheck"]) == 2  # --seed is required


def test_all_invalid_corpus_is_domain_error(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n{\"id\": 3}\n")
    assert main(["label", "--corpus", str(bad), "--out", str(tmp_path / "o.jsonl")]) == 1


def test_failed_write_leaves_previous_output(corpus, tmp_path, monkeypatch):
    out = tmp_path / "labels.jsonl"
    out.write_text("previous\n")
    import cxrkit.io

    def boom(*a, **k):
        raise OSError("disk full")
    monkeypatch.setattr(cxrkit.io.os, "replace", boom)
    assert main(["label", "--corpus", str(corpus), "--out", str(out)]) == 1
    assert out.read_text() == "previous\n"
    assert [p.name for p in tmp_path.iterdir() if p.name.endswith(".tmp")] == []


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.startswith(f"cxrkit {__version__} (lexicons ")


def test_ccve_pipeline(tmp_path):
    data = tmp_path / "synth"
    assert main(["ccve-synth", "--clusters", "3", "--per-cluster", "4", "--size", "12", "--seed", "0",
                 "--out", str(data)]) == 0
    assert {p.name for p in data.iterdir()} == {"images.jsonl", "reports.jsonl", "clusters.jsonl"}
    model = tmp_path / "model.json"
    hist = tmp_path / "hist.tsv"
    args = ["ccve-train", "--corpus", str(data / "reports.jsonl"), "--clusters", str(data / "clusters.jsonl"),
            "--images", str(data / "images.jsonl"), "--K", "3", "--steps", "5", "--batch-size", "4",
            "--m", "4", "--d", "6", "--dt", "5", "--seed", "1"]
    assert main(args + ["--out", str(model), "--history", str(hist)]) == 0
    assert len(hist.read_text().splitlines()) == 5
    doc = json.loads(model.read_text())
    assert (doc["K"], doc["d"]) == (3, 6)

    img = tmp_path / "img.json"
    img.write_text(json.dumps(np.eye(12).tolist()))
    emb = tmp_path / "emb.json"
    assert main(["ccve-embed", "--model", str(model), "--image", str(img), "--out", str(emb)]) == 0
    E = np.array(json.loads(emb.read_text())["embeddings"])
    assert E.shape == (3, 6)
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0)

    many = tmp_path / "emb_many.json"
    assert main(["ccve-embed", "--model", str(model), "--image", str(data / "images.jsonl"),
                 "--out", str(many)]) == 0
    assert len(json.loads(many.read_text())["embeddings"]) == 12

    cve = tmp_path / "cve.json"
    assert main(args + ["--cve", "--out", str(cve)]) == 0
    assert json.loads(cve.read_text())["K"] == 1

    assert main(["gradcheck", "--model", str(model), "--seed", "0", "--batch-size", "3"]) == 0


def test_gradcheck_random_model(capsys):
    assert main(["gradcheck", "--seed", "3", "--K", "2", "--batch-size", "3", "--image-size", "6"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cxrkit.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "cxrkit" in proc.stdout
