import json
import subprocess
import sys
from pathlib import Path

import pytest

from crepe.cli import apply_overrides, main, parse_value

TINY = ["--set", "model.d_model=16", "--set", "model.n_heads=2", "--set", "model.encoder_layers=1",
        "--set", "model.shared_decoder_layers=1", "--set", "model.head_decoder_layers=1",
        "--set", "model.ffn_dim=32", "--set", "model.coord_hidden=16"]


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_overrides():
    cfg = {"model": {"d_model": 8}}
    apply_overrides(cfg, ["model.d_model=16", "lr=1e-3", "weak=true", "name=abc", "ratio=[1,4]"])
    assert cfg == {"model": {"d_model": 16}, "lr": 1e-3, "weak": True, "name": "abc", "ratio": [1, 4]}
    assert parse_value("null") is None and parse_value("3") == 3


def test_synth_twice_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(["synth", "--task", "ocr", "--n", 4, "--seed", 1, "--out", tmp_path / d], capsys)[0] == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and len(a) == 5
    run(["synth", "--task", "ocr", "--n", 4, "--seed", 2, "--out", tmp_path / "c"], capsys)
    assert tree_bytes(tmp_path / "c") != a


@pytest.mark.parametrize("task", ["parse", "multi", "layout", "class", "scene"])
def test_synth_every_task(tmp_path, capsys, task):
    assert run(["synth", "--task", task, "--n", 2, "--out", tmp_path], capsys)[0] == 0
    lines = (tmp_path / "train.jsonl").read_text().splitlines()
    assert [json.loads(x)["id"] for x in lines] == [f"{task}_00000", f"{task}_00001"]


def test_render_three_spans_three_polygons(tmp_path, capsys):
    spans = [{"text": t, "field": "menu", "quad": [.1 + i / 10, .1, .15 + i / 10, .1, .15 + i / 10, .2, .1 + i / 10, .2],
              "bbox": [.1 + i / 10, .1, .15 + i / 10, .2]} for i, t in enumerate(["a", "b", "c"])]
    res = tmp_path / "r.json"
    res.write_text(json.dumps({"id": "r", "task": "parse", "parse": [], "spans": spans,
                               "truncated": False, "diagnostics": []}))
    assert run(["render", "--result", res, "--svg", tmp_path / "r.svg"], capsys)[0] == 0
    svg = (tmp_path / "r.svg").read_text()
    assert svg.count("<polygon") == 3


def test_missing_file_exit_code(tmp_path, capsys):
    code, _, err = run(["render", "--result", tmp_path / "nope.json"], capsys)
    assert code == 1 and err.startswith("error: missing-file:")
    code, _, err = run(["pretrain", "--set", f"corpus={tmp_path / 'none'}", "--out", tmp_path / "o"] + TINY, capsys)
    assert code == 1 and "missing-file" in err


def test_invalid_config_exit_code(tmp_path, capsys):
    code, _, err = run(["pretrain", "--set", "bogus=1", "--out", tmp_path], capsys)
    assert code == 1 and err.startswith("error: invalid-config:")
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    code, _, err = run(["synth", "--task", "ocr", "--n", 1, "--config", bad], capsys)
    assert code == 1 and "invalid-config" in err


def test_weak_finetune_needs_ocr_corpus(tmp_path, capsys):
    run(["synth", "--task", "parse", "--n", 2, "--out", tmp_path / "p", "--weak"], capsys)
    code, _, err = run(["finetune", "--weak", "--set", f"corpus={tmp_path / 'p'}", "--set", "task=parse",
                        "--out", tmp_path / "f"] + TINY, capsys)
    assert code == 1 and "invalid-config" in err


def test_schema_mismatch_on_wrong_image_size(tmp_path, capsys):
    run(["synth", "--task", "ocr", "--n", 2, "--out", tmp_path / "c"], capsys)
    run(["pretrain", "--set", f"corpus={tmp_path / 'c'}", "--set", "steps=1", "--set", "batch=2",
         "--out", tmp_path / "m"] + TINY, capsys)
    run(["synth", "--task", "ocr", "--n", 1, "--set", "gen.width=64", "--set", "gen.height=64",
         "--out", tmp_path / "small"], capsys)
    code, _, err = run(["infer", "--checkpoint", tmp_path / "m" / "last.crpe", "--task", "ocr",
                        "--corpus", tmp_path / "small", "--out", tmp_path / "pred"], capsys)
    assert code == 1 and "schema-mismatch" in err


def test_pipeline_and_resume(tmp_path, capsys):
    c, m, pred, ev = (tmp_path / x for x in ("corpus", "model", "pred", "eval"))
    assert run(["synth", "--task", "ocr", "--n", 3, "--seed", 4, "--out", c], capsys)[0] == 0
    assert run(["pretrain", "--set", f"corpus={c}", "--set", "steps=3", "--set", "batch=2", "--seed", 4,
                "--out", m] + TINY, capsys)[0] == 0
    log = [json.loads(x) for x in (m / "loss.jsonl").read_text().splitlines()]
    assert [x["step"] for x in log] == [1, 2, 3]
    # a second run resumes from last.crpe and continues the step count
    assert run(["pretrain", "--set", f"corpus={c}", "--set", "steps=5", "--set", "batch=2", "--seed", 4,
                "--out", m] + TINY, capsys)[0] == 0
    log = [json.loads(x) for x in (m / "loss.jsonl").read_text().splitlines()]
    assert [x["step"] for x in log] == [1, 2, 3, 4, 5]
    assert run(["infer", "--checkpoint", m / "last.crpe", "--task", "ocr", "--corpus", c, "--out", pred],
               capsys)[0] == 0
    results = sorted(pred.glob("*.json"))
    assert [p.stem for p in results] == ["ocr_00000", "ocr_00001", "ocr_00002"]
    rec = json.loads(results[0].read_text())
    assert set(rec) == {"id", "task", "parse", "spans", "truncated", "diagnostics"}
    code, out, _ = run(["eval", "--pred", pred, "--gt", c, "--task", "ocr", "--out", ev], capsys)
    assert code == 0 and "field_f1" in json.loads(out)
    assert (ev / "report.json").exists() and (ev / "per_document.csv").exists()
    assert run(["render", "--result", results[0], "--image", c / "ocr_00000.ppm"], capsys)[0] == 0
    assert results[0].with_suffix(".svg").read_text().startswith("<svg")


def test_resume_equals_uninterrupted(tmp_path, capsys):
    c = tmp_path / "corpus"
    run(["synth", "--task", "ocr", "--n", 3, "--out", c], capsys)
    base = ["pretrain", "--set", f"corpus={c}", "--set", "batch=2"] + TINY
    run(base + ["--set", "steps=4", "--out", tmp_path / "full"], capsys)
    run(base + ["--set", "steps=2", "--out", tmp_path / "split"], capsys)
    run(base + ["--set", "steps=4", "--out", tmp_path / "split"], capsys)
    assert (tmp_path / "full" / "last.crpe").read_bytes() == (tmp_path / "split" / "last.crpe").read_bytes()
    assert (tmp_path / "full" / "loss.jsonl").read_bytes() == (tmp_path / "split" / "loss.jsonl").read_bytes()


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "crepe", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("synth", "pretrain", "finetune", "infer", "eval", "render", "gradcheck"):
        assert cmd in out.stdout
