import json
import re
import subprocess
import sys

import pytest

from optimforge.cli import main
from optimforge.program import load_asset, print_program


def run(*args, env=None):
    return subprocess.run([sys.executable, "-m", "optimforge", *args], capture_output=True,
                          text=True, env=env)


def test_hash_of_shipped_listing(capsys):
    assert main(["hash", "programs/lion.prog"]) == 0
    digest = capsys.readouterr().out.strip()
    assert re.fullmatch(r"[0-9a-f]{32}", digest)


def test_hash_file_and_raw(tmp_path, capsys):
    f = tmp_path / "p.prog"
    f.write_text("def train(w, g, m, v, lr):\n  u = m + g\n  update = u * lr\n  return update, m, v\n")
    g = tmp_path / "q.prog"
    g.write_text("def train(w, g, m, v, lr):\n  u = g + m\n  update = u * lr\n  return update, m, v\n")
    outs = []
    for args in (["hash", str(f)], ["hash", str(g)], ["hash", "--raw", str(f)], ["hash", "--raw", str(g)]):
        assert main(args) == 0
        outs.append(capsys.readouterr().out.strip())
    assert outs[0] == outs[1] and outs[2] != outs[3]


def test_estimate_space(capsys):
    assert main(["estimate-space", "--functions", "1", "--variables", "5", "--arity", "2",
                 "--length", "3"]) == 0
    assert capsys.readouterr().out.strip() == "15625"
    assert main(["estimate-space", "--functions", "0", "--variables", "5", "--arity", "2",
                 "--length", "3"]) == 1


def test_usage_errors_exit_one():
    for args in (["bogus"], ["hash"], ["search", "--nope"], []):
        r = run(*args)
        assert r.returncode == 1, args
        assert "usage" in r.stderr


def test_user_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.prog"
    bad.write_text("def train(w, g, m, v, lr):\n  update = bogus(g)\n  return update, m, v\n")
    assert main(["hash", str(bad)]) == 1
    assert main(["hash", str(tmp_path / "missing.prog")]) == 1
    assert main(["eval", "adamw", "--task", "no-such-task"]) == 1
    invalid = tmp_path / "scalar.prog"
    invalid.write_text("def train(w, g, m, v, lr):\n  update = dot(g, g)\n  return update, m, v\n")
    assert main(["eval", str(invalid), "--task", "quadratic"]) == 1
    assert "not valid" in capsys.readouterr().err


def test_internal_error_exit_two(monkeypatch):
    import optimforge.analysis as analysis

    def boom(*args, **kwargs):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(analysis, "functional_hash", boom)
    assert main(["hash", "adamw"]) == 2


def test_strip(tmp_path, capsys):
    assert main(["strip", "raw"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("def train(w, g, m, v, lr):")
    assert main(["strip", "adamw"]) == 0
    assert capsys.readouterr().out == print_program(load_asset("adamw"))


def test_eval(capsys):
    assert main(["eval", "adamw", "--task", "quadratic", "--seed", "1"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["status"] == "ok" and doc["task"] == "quadratic"


def test_train_emits_metrics(tmp_path):
    out = tmp_path / "m.jsonl"
    assert main(["train", "--optimizer", "lion", "--task", "quadratic", "--lr", "0.01",
                 "--out", str(out)]) == 0
    recs = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(recs) == 200
    assert set(recs[0]) == {"step", "loss", "lr", "update_norm", "weight_norm"}
    assert main(["train", "--program", "adamw", "--task", "quadratic", "--out", str(out)]) == 0
    assert main(["train", "--optimizer", "adamw", "--preset", "diffusion", "--task", "quadratic",
                 "--out", str(out)]) == 0
    assert main(["train", "--optimizer", "adamw", "--preset", "nope", "--task", "quadratic"]) == 1


def test_simplify_verb(tmp_path, capsys):
    assert main(["simplify", "raw", "--task", "quadratic", "--out", str(tmp_path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["original_statements"] >= doc["stripped_statements"] >= doc["pruned_statements"]
    assert (tmp_path / "simplified.prog").read_text() == doc["program"]


def test_funnel_verb(capsys):
    assert main(["funnel", "adamw", "lion", "--task", "quadratic", "--levels", "A"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["baseline"]["A"]["status"] == "ok"
    assert main(["funnel", "--task", "quadratic", "--levels", "Q", "lion"]) == 1


def _search(out, *extra):
    return main(["search", "--task", "quadratic", "--population", "10", "--budget", "40",
                 "--seed", "3", "--out", str(out), *extra])


def test_search_reruns_are_byte_identical(tmp_path):
    assert _search(tmp_path / "a") == 0
    assert _search(tmp_path / "b") == 0
    for name in ("log.jsonl", "best.prog"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    cfg = json.loads((tmp_path / "a/config.json").read_text())
    assert cfg["search"]["population"] == 10
    assert main(["search", "--config", str(tmp_path / "a/config.json"), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c/log.jsonl").read_bytes() == (tmp_path / "a/log.jsonl").read_bytes()


def test_search_threads_do_not_change_results(tmp_path, monkeypatch):
    assert _search(tmp_path / "a", "--batch", "4", "--threads", "1") == 0
    monkeypatch.setenv("OPTIMFORGE_THREADS", "2")
    assert _search(tmp_path / "b", "--batch", "4") == 0
    assert json.loads((tmp_path / "b/config.json").read_text())["threads"] == 2
    for name in ("log.jsonl", "best.prog"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    monkeypatch.setenv("OPTIMFORGE_THREADS", "zero")
    assert _search(tmp_path / "c") == 1


def test_search_desk_flag(tmp_path):
    assert main(["search", "--task", "quadratic", "--desk", "--budget", "5", "--out", str(tmp_path)]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["search"]["population"] == 50


def test_module_entry_point():
    r = run("estimate-space", "--functions", "2", "--variables", "2", "--arity", "1", "--length", "1")
    assert r.returncode == 0 and r.stdout.strip() == "4"


@pytest.mark.parametrize("verb", ["search", "eval", "train", "simplify", "strip", "hash", "funnel",
                                  "estimate-space"])
def test_every_verb_has_help(verb):
    with pytest.raises(SystemExit) as exc:
        main([verb, "--help"])
    assert exc.value.code == 0
