import json
import os
import re

import pytest

from sgnlg.cli import main
from sgnlg.config import CACHE_ENV, ConfigError, RunConfig, load_config
from sgnlg.schema import iter_jsonl, load_records, read_jsonl_meta

ERROR_LINE = re.compile(r"^error: E_[A-Z_]+: \S.*$")
TINY = ["--hidden-dim", "12", "--token-dim", "8", "--symbolic-dim", "6", "--model-dim", "10",
        "--sentence-encoder", "hashing:8", "--epochs", "2", "--batch-size", "2", "--beam-width", "2",
        "--max-len", "12"]


def run(argv, capsys):
    status = main(argv)
    out, err = capsys.readouterr()
    return status, out, err


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("family: cvae\nepochs: 3\nfeatures: mr_only\n")
    cfg = load_config(str(path), {"epochs": 7, "seed": None})
    assert (cfg.family, cfg.epochs, cfg.seed, cfg.feature_list()) == ("cvae", 7, 0, ("mr",))
    jpath = tmp_path / "run.json"
    jpath.write_text(json.dumps({"top_k": "9", "dedupe": "yes"}))
    cfg = load_config(str(jpath))
    assert cfg.top_k == 9 and cfg.dedupe is True
    (tmp_path / "bad.yaml").write_text("colour: red\n")
    with pytest.raises(ConfigError, match="colour"):
        load_config(str(tmp_path / "bad.yaml"))


def test_config_hash_ignores_paths_but_not_settings():
    a = RunConfig(output_dir="/a", checkpoint="/x.pt")
    b = RunConfig(output_dir="/b")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != RunConfig(features="mr_only").config_hash()
    assert a.config_hash() != RunConfig(seed=1).config_hash()


def test_cache_dir_from_environment(monkeypatch):
    monkeypatch.setenv(CACHE_ENV, "/tmp/sgnlg-cache")
    assert RunConfig().cache_dir == "/tmp/sgnlg-cache"


@pytest.mark.parametrize("argv,code", [
    (["train", "--family", "gru"], "E_CONFIG"),
    (["train", "--data-dir", "/nonexistent/dir", "--checkpoint", "x.pt"], "E_CONFIG"),
    (["stats", "--data-dir", "/nonexistent/dir"], "E_CONFIG"),
    (["preprocess", "--input-dir", "/nonexistent/dir", "--output-dir", "/tmp/x"], "E_CONFIG"),
    (["train", "--features", "mr,colour"], "E_CONFIG"),
])
def test_errors_are_single_machine_readable_lines(argv, code, capsys):
    status, _, err = run(argv, capsys)
    assert status != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and ERROR_LINE.match(lines[0]) and lines[0].startswith(f"error: {code}:")


def test_bad_checkpoint_error(tmp_path, capsys):
    bogus = tmp_path / "bogus.pt"
    bogus.write_bytes(b"not a checkpoint")
    inp = tmp_path / "in.jsonl"
    inp.write_text("")
    status, _, err = run(["generate", "--checkpoint", str(bogus), "--input", str(inp), "--output",
                          str(tmp_path / "o.jsonl")], capsys)
    assert status != 0 and err.startswith("error: E_CHECKPOINT:")


def pipeline(root, capsys, features="full_schema", family="seq2seq"):
    data, out = os.path.join(root, "data"), os.path.join(root, "out")
    ckpt = os.path.join(root, f"{family}-{features}.pt")
    assert run(["preprocess", "--fixture", "--output-dir", data], capsys)[0] == 0
    assert run(["train", "--data-dir", data, "--checkpoint", ckpt, "--family", family, "--features", features]
               + TINY, capsys)[0] == 0
    gens = os.path.join(out, "gens.jsonl")
    assert run(["generate", "--checkpoint", ckpt, "--input", os.path.join(data, "test.jsonl"), "--output", gens],
               capsys)[0] == 0
    assert run(["evaluate", "--generations", gens, "--test", os.path.join(data, "test.jsonl"), "--train",
                os.path.join(data, "train.jsonl"), "--output-dir", out, "--name", "s2s"], capsys)[0] == 0
    assert run(["report", "--reports", f"s2s={os.path.join(out, 's2s.json')}", "--data-dir", data,
                "--output-dir", out], capsys)[0] == 0
    return data, out, ckpt


def test_end_to_end_is_byte_deterministic(tmp_path, capsys):
    runs = [pipeline(str(tmp_path / name), capsys) for name in ("a", "b")]
    (_, out_a, ckpt_a), (_, out_b, _) = runs
    for name in ("gens.jsonl", "s2s.json", "s2s.csv", "s2s.md", "report.md", "comparison.csv"):
        with open(os.path.join(out_a, name), "rb") as fa, open(os.path.join(out_b, name), "rb") as fb:
            assert fa.read() == fb.read(), name
    meta = read_jsonl_meta(os.path.join(out_a, "gens.jsonl"))
    assert meta["config_hash"] == json.load(open(os.path.join(out_a, "s2s.json")))["meta"]["generations_config_hash"]
    assert meta["seed"] == 0
    assert os.path.exists(os.path.join(out_a, "refdist_train.csv"))


def test_feature_ablations_get_distinct_hashes(tmp_path, capsys):
    _, _, full = pipeline(str(tmp_path / "full"), capsys, "full_schema")
    _, _, mr = pipeline(str(tmp_path / "mr"), capsys, "mr_only")
    import torch
    hashes = {torch.load(p, weights_only=False)["config_hash"] for p in (full, mr)}
    assert len(hashes) == 2


def test_evaluate_identity_outputs(tmp_path, capsys):
    data = str(tmp_path / "data")
    assert run(["preprocess", "--fixture", "--output-dir", data], capsys)[0] == 0
    test = load_records(os.path.join(data, "test.jsonl"))
    gens = tmp_path / "gens.jsonl"
    with open(gens, "w") as f:
        for i, r in enumerate(test):
            f.write(json.dumps({"index": i, "mr_key": r.schema.mr_string(), "template": r.references[0].text}) + "\n")
    singles = tmp_path / "single.jsonl"
    from sgnlg.schema import save_records
    import dataclasses
    save_records(str(singles), [dataclasses.replace(r, references=r.references[:1]) for r in test])
    status, out, _ = run(["evaluate", "--generations", str(gens), "--test", str(singles), "--train",
                          os.path.join(data, "train.jsonl"), "--output-dir", str(tmp_path / "ev")], capsys)
    assert status == 0
    rep = json.load(open(tmp_path / "ev" / "report.json"))
    assert rep["bleu"] == pytest.approx(1.0)
    assert rep["ser"] in (0.0, None) and rep["slot_match"] == 1.0


def test_evaluate_mismatch(tmp_path, capsys):
    data = str(tmp_path / "data")
    run(["preprocess", "--fixture", "--output-dir", data], capsys)
    gens = tmp_path / "g.jsonl"
    gens.write_text("")
    status, _, err = run(["evaluate", "--generations", str(gens), "--test", os.path.join(data, "test.jsonl"),
                          "--train", os.path.join(data, "train.jsonl"), "--output-dir", str(tmp_path)], capsys)
    test_n = sum(1 for _ in iter_jsonl(os.path.join(data, "test.jsonl")))
    if test_n:
        assert status != 0 and err.startswith("error: E_MISMATCH:")
