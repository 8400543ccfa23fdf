import json

import pytest

from searchlab.cli import EXIT_CONFIG, EXIT_IO, main
from searchlab.config import DESK_NAS_SPACE
from searchlab.search import load_runlog
from table8 import LOG_DIR

SMALL = ["--steps", "3", "--n-synthetic", "200"]


def test_run_fixed_default(tmp_path, capsys):
    out = tmp_path / "fd.jsonl"
    assert main(["run", "fixed_default", "--track", "smiles_like", "--seed", "1", "--out", str(out), *SMALL]) == 0
    log = load_runlog(out)
    assert log.records == [] and log.n_experiments == 100 and log.seed == 1
    manifest = json.loads((tmp_path / "fd.jsonl.manifest.json").read_text())
    assert manifest["settings"]["seed"] == 1 and manifest["budget"] == {"steps": 3}
    assert "keep rate: n/a" in capsys.readouterr().out


def test_run_random_nas(tmp_path):
    out = tmp_path / "r.jsonl"
    assert main(["run", "random_nas", "--n", "5", "--out", str(out), "--eval-batches", "1", *SMALL]) == 0
    log = load_runlog(out)
    assert len(log.records) == 5
    for r in log.records:
        assert r.arch_after.depth in DESK_NAS_SPACE.depths and r.arch_after.width in DESK_NAS_SPACE.widths
        assert r.hp_after == log.baseline_hp


def test_run_scripted_replay_is_deterministic(tmp_path):
    script = tmp_path / "s.json"
    script.write_text(json.dumps([{"edits": {"arch.depth": 1}}, {"edits": {"hp.lr_matrix": 0.02}},
                                  {"edits": {"arch.heads": 3}}]))
    logs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.jsonl"
        assert main(["run", "agent", "--proposer", f"scripted:{script}", "--n", "3", "--out", str(out),
                     "--run-id", "x", "--eval-batches", "1", *SMALL]) == 0
        logs.append(load_runlog(out))
    strip = lambda lg: [(r.val_bpb, r.kept, r.crashed, r.arch_after, r.hp_after) for r in lg.records]
    assert strip(logs[0]) == strip(logs[1])
    assert logs[0].records[2].crashed  # 3 heads do not divide width 32: contained, exit status 0


def test_run_errors(tmp_path, capsys):
    assert main(["run", "agent", "--track", "nowhere", "--out", str(tmp_path / "x.jsonl")]) == EXIT_CONFIG
    assert main(["run", "agent", "--n", "1", "--out", str(tmp_path / "x.jsonl"), *SMALL]) == EXIT_CONFIG
    assert main(["run", "agent", "--proposer", "scripted:/no/such.json", "--n", "1",
                 "--out", str(tmp_path / "x.jsonl"), *SMALL]) == EXIT_IO
    bad = tmp_path / "bad.txt"
    bad.write_text("depht = 3\n")
    assert main(["run", "fixed_default", "--config", str(bad), "--out", str(tmp_path / "y.jsonl"),
                 *SMALL]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(["run", "fixed_default", "--bogus-flag"])


def test_analyze_fixture_logs(tmp_path, capsys):
    out = tmp_path / "rep"
    assert main(["analyze", str(LOG_DIR / "*.jsonl"), "--out", str(out), "--resamples", "200",
                 "--perms", "200"]) == 0
    text = capsys.readouterr().out
    assert "smiles_like: total 0.0103 bpb, HP 151%, arch -51%" in text
    assert "nlp_like: total 0.0300 bpb, HP 19%, arch 81%" in text
    assert (out / "manifest.json").exists() and (out / "tables/decomposition.csv").exists()
    first = {p.name: p.read_bytes() for p in (out / "tables").iterdir()}
    assert main(["analyze", str(LOG_DIR / "*.jsonl"), "--out", str(out), "--resamples", "200",
                 "--perms", "200"]) == 0
    assert {p.name: p.read_bytes() for p in (out / "tables").iterdir()} == first


def test_analyze_single_run(tmp_path):
    out = tmp_path / "rep"
    assert main(["analyze", str(LOG_DIR / "smiles_like-agent-1.jsonl"), "--out", str(out)]) == 0
    report = (out / "report.md").read_text()
    assert "No comparisons (insufficient-n)." in report
    assert "| smiles_like | agent | smiles_like-agent-1 | 59.18 | 0.5918 | 1.00 |" in report
    assert main(["analyze", str(tmp_path / "none*.jsonl"), "--out", str(out)]) == EXIT_IO


def test_transfer_and_innovations(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["transfer", "--tracks", "smiles_like,protein_like", "--out", str(out), *SMALL]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 5
    assert "smiles_like,smiles_like" in rows[1] and rows[1].split(",")[4] == "0.0"
    script = tmp_path / "s.json"
    script.write_text(json.dumps([{"edits": {"arch.ffn_mult": 2.0}}]))
    log = tmp_path / "agent.jsonl"
    main(["run", "agent", "--proposer", f"scripted:{script}", "--n", "1", "--out", str(log),
          "--eval-batches", "1", *SMALL])
    inn = tmp_path / "inn.csv"
    assert main(["innovations", "--tracks", "smiles_like,protein_like", "--logs", str(log),
                 "--out", str(inn), *SMALL]) == 0
    assert inn.read_text().splitlines()[-1].startswith("summary,")
    assert main(["transfer", "--tracks", "smiles_like", "--out", str(out)]) == EXIT_CONFIG


def test_freeze_and_lengthmatch(tmp_path):
    f = tmp_path / "f.csv"
    assert main(["freeze", "--source", "protein_like", "--target", "smiles_like", "--source-steps", "3",
                 "--out", str(f), *SMALL]) == 0
    lines = f.read_text().splitlines()
    assert lines[0] == "k,n_frozen,val_bpb,degradation_pct,frozen_intact" and len(lines) == 4
    assert all(l.endswith("True") for l in lines[1:])
    lm = tmp_path / "lm.csv"
    assert main(["lengthmatch", "--target", "smiles_like", "--lengths", "16,64", "--out", str(lm), *SMALL]) == 0
    first, last = (l.split(",") for l in lm.read_text().splitlines()[1:])
    assert first[0] == "16" and first[2] != "" and first[3] != ""
    assert last[0] == "64" and last[3] == "0.0"


def test_sample_nas_and_gen_corpus(tmp_path, capsys):
    assert main(["sample-nas", "--n", "50", "--scale", "paper", "--seed", "3"]) == 0
    archs = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert len(archs) == 50
    assert all(3 <= a["depth"] <= 8 and a["width"] % 32 == 0 and 128 <= a["width"] <= 512 for a in archs)
    out = tmp_path / "c.txt"
    assert main(["gen-corpus", "protein_like", "--n", "20", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 20
    assert (tmp_path / "c.txt.manifest.json").exists()
