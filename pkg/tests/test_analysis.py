import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest

import searchlab.analysis as analysis
from searchlab.analysis import (TECHNIQUES, Comparison, Innovation, adapt_params, best_config,
                                classify_degradations, classify_innovations, classify_techniques,
                                collect_innovations, extract_features, frozen_names, generate_report,
                                layer_freeze_curve, length_match_eval, load_families, rebase_mutation,
                                register_technique, transfer_matrix)
from searchlab.config import ArchConfig, ConfigMutation, FieldEdit, HPConfig, default_hp, desk_arch
from searchlab.model import init_params
from searchlab.search import RunLog
from searchlab.stats import binomial_tail
from searchlab.trainer import Budget, ExperimentRecord
from table8 import build_logs

A, H = ArchConfig(), HPConfig()


def kept_log(*mutations, track="t", condition="agent", run_id="r", vals=None):
    arch, hp = A, H
    recs = []
    for i, m in enumerate(mutations, 1):
        arch, hp = (replace(arch, **{e.path[5:]: e.new for e in m.edits if e.path.startswith("arch.")}),
                    replace(hp, **{e.path[3:]: e.new for e in m.edits if e.path.startswith("hp.")}))
        v = 1.0 - 0.01 * i if vals is None else vals[i - 1]
        recs.append(ExperimentRecord(i, m, arch, hp, v, False, True, 0, 0, 0.0, 0))
    return RunLog(condition, track, run_id, 0, 100, 1.0, "p", A, H, records=recs)


def m(*edits):
    return ConfigMutation(tuple(FieldEdit(*e) for e in edits))


# -- techniques -------------------------------------------------------------

def test_technique_rules():
    assert classify_techniques(kept_log(m(("arch.width", 320, 256))))["embedding_reduction"]
    assert not any(classify_techniques(kept_log()).values())
    log = kept_log(m(("arch.depth", 6, 4)), m(("arch.width", 320, 384)))
    assert classify_techniques(log)["depth_width_rebalance"]
    assert not classify_techniques(kept_log(m(("arch.depth", 6, 8)), m(("arch.width", 320, 384))))[
        "depth_width_rebalance"]
    assert classify_techniques(kept_log(m(("arch.window_size", 64, 32))))["local_attention"]
    assert classify_techniques(kept_log(m(("arch.positional", "rope", "none"))))["positional_change"]
    assert classify_techniques(kept_log(m(("hp.weight_decay", 0.2, 0.3))))["small_data_regularization"]
    assert len(TECHNIQUES) == 5


def test_only_kept_mutations_count():
    log = kept_log(m(("arch.width", 320, 256)))
    log.records[0] = replace(log.records[0], kept=False)
    assert not classify_techniques(log)["embedding_reduction"]


def test_register_technique(monkeypatch):
    monkeypatch.setattr(analysis, "TECHNIQUES", dict(TECHNIQUES))
    register_technique("gated_mlp", lambda kept: any(e.new in ("swiglu", "geglu")
                                                     for k in kept for e in k.edits))
    assert classify_techniques(kept_log(m(("arch.activation", "relu_squared", "swiglu"))))["gated_mlp"]
    with pytest.raises(ValueError):
        register_technique("gated_mlp", lambda kept: False)


# -- features ---------------------------------------------------------------

def test_features_read_best_kept_state():
    log = kept_log(m(("arch.width", 320, 256)), m(("arch.depth", 6, 4)), vals=[0.8, 0.9])
    assert best_config(log)[0] == ArchConfig(width=256)
    f = extract_features(log)
    assert f.numeric["width"] == 256.0 and f.numeric["depth"] == 6.0 and f.label == "t"
    assert extract_features(kept_log()).numeric["width"] == 320.0


def test_features_from_fixture_logs():
    logs = [l for l in build_logs() if l.condition == "agent"]
    assert len(logs) == 13
    feats = [extract_features(l) for l in logs]
    assert [f.label for f in feats].count("smiles_like") == 5
    with pytest.raises(ValueError):
        extract_features(RunLog("agent", "t", "r", 0, 100, None, "p", A, H))


# -- innovations ------------------------------------------------------------

def test_threshold_is_strict():
    assert classify_degradations({"a": 1.0, "b": 0.0}) == "specific"
    assert classify_degradations({"a": 0.999999, "b": -3.0}) == "universal"
    assert classify_degradations({"a": 0.5, "b": None}) == "excluded"
    assert classify_degradations({}) == "excluded"


def test_rebase_reads_old_values_from_base():
    r = rebase_mutation(m(("arch.depth", 6, 4)), ArchConfig(depth=2), H)
    assert r.edits == (FieldEdit("arch.depth", 2, 4),)


def test_collect_innovations():
    logs = [kept_log(m(("arch.depth", 6, 4)), ConfigMutation(), run_id="a"),
            kept_log(m(("hp.lr_matrix", 0.04, 0.02)), condition="hp_only")]
    inns = collect_innovations(logs)
    assert [i.origin_run for i in inns] == ["a"] and inns[0].mutation.paths == ("arch.depth",)


def fake_bpb(table):
    def run(arch, hp, track, budget, seed):
        v = table(arch, hp, track.track.name)
        return ExperimentRecord(1, ConfigMutation(), arch, hp, v, v is None, False, 0, 0, 0.0, 0)
    return run


def test_classify_innovations(monkeypatch, smiles_track, protein_track):
    tracks = {"smiles_like": smiles_track, "protein_like": protein_track}

    def table(arch, hp, t):
        if arch.depth == 9:
            return None
        if arch.activation == "gelu" and t == "protein_like":
            return 1.5  # 50% worse on protein
        return 1.0 + (0.0078125 if arch.depth == 3 else 0.0)  # 0.78% worse

    monkeypatch.setattr(analysis, "_train_eval", fake_bpb(table))
    inns = [Innovation(m(("arch.depth", 2, 3)), "r1", "smiles_like"),
            Innovation(m(("arch.activation", "relu_squared", "gelu")), "r2", "smiles_like"),
            Innovation(ConfigMutation(), "r3", "smiles_like"),
            Innovation(m(("arch.depth", 2, 9)), "r4", "smiles_like"),
            Innovation(m(("arch.heads", 2, 5)), "r5", "protein_like")]
    s = classify_innovations(inns, tracks, Budget(steps=1))
    assert [i.classification for i in s.innovations] == ["universal", "specific", "universal", "excluded",
                                                         "excluded"]
    assert set(s.innovations[0].degradations) == {"protein_like"}  # origin track skipped
    assert s.innovations[0].degradations["protein_like"] == pytest.approx(0.78125)
    assert "inapplicable" in s.innovations[4].note
    assert (s.n_universal, s.n_classified) == (2, 3)
    assert s.binomial_p == binomial_tail(2, 3, 0.35)
    s2 = classify_innovations(inns[:1], tracks, Budget(steps=1), include_origin=True)
    assert set(s2.innovations[0].degradations) == {"smiles_like", "protein_like"}


# -- transfer ---------------------------------------------------------------

def test_transfer_diagonal_and_sign(monkeypatch, smiles_track, protein_track):
    tracks = {"smiles_like": smiles_track, "protein_like": protein_track}
    table = lambda arch, hp, t: {("smiles_like", 2): 1.0, ("smiles_like", 3): 0.9,
                                 ("protein_like", 3): 2.0, ("protein_like", 2): 2.2}[(t, arch.depth)]
    monkeypatch.setattr(analysis, "_train_eval", fake_bpb(table))
    cells = transfer_matrix({"smiles_like": ArchConfig(depth=2), "protein_like": ArchConfig(depth=3)},
                            tracks, Budget(steps=1))
    by = {(c.source_track, c.target_track): c for c in cells}
    assert by[("smiles_like", "smiles_like")].rel_change_pct == 0.0
    assert by[("protein_like", "protein_like")].rel_change_pct == 0.0
    assert by[("protein_like", "smiles_like")].rel_change_pct == pytest.approx(-10.0)  # transfer better
    assert by[("smiles_like", "protein_like")].rel_change_pct == pytest.approx(10.0)
    with pytest.raises(ValueError):
        transfer_matrix({"smiles_like": A}, tracks, Budget(steps=1))


def test_transfer_uses_target_hps(monkeypatch, smiles_track, protein_track):
    seen = []

    def run(arch, hp, track, budget, seed):
        seen.append((track.track.name, hp))
        return ExperimentRecord(1, ConfigMutation(), arch, hp, 1.0, False, False, 0, 0, 0.0, 0)

    monkeypatch.setattr(analysis, "_train_eval", run)
    tracks = {"smiles_like": smiles_track, "protein_like": protein_track}
    transfer_matrix({t: desk_arch(tracks[t].track) for t in tracks}, tracks, Budget(steps=1))
    assert all(hp == default_hp(tracks[t].track) for t, hp in seen)


# -- freezing ---------------------------------------------------------------

def test_frozen_names():
    arch = desk_arch()
    assert frozen_names(arch, 0) == set()
    assert all(n.startswith("h1.") for n in frozen_names(arch, 1))
    assert {n.split(".")[0] for n in frozen_names(arch, 2)} == {"h0", "h1"}
    with pytest.raises(ValueError):
        frozen_names(arch, 3)


def test_adapt_params_reinitializes_vocab_tensors():
    arch = desk_arch()
    src = init_params(arch, 30, 0)
    out, reinit = adapt_params(src, arch, 25, 1)
    assert reinit == {"tok_emb", "unemb", "h0.ve"}
    assert np.array_equal(out["h1.wq"], src["h1.wq"])
    same, none = adapt_params(src, arch, 30, 1)
    assert none == set() and all(np.array_equal(same[k], src[k]) for k in src)
    with pytest.raises(ValueError):
        adapt_params(init_params(replace(arch, width=48, heads=2, kv_heads=2), 30, 0), arch, 30, 0)


def test_freeze_curve_keeps_frozen_blocks(smiles_track, protein_track):
    arch = desk_arch(smiles_track.track)
    src = init_params(arch, smiles_track.corpus.vocab_size, 0)
    levels = layer_freeze_curve(src, arch, protein_track, budget=Budget(steps=10))
    assert [l.k for l in levels] == [0, 1, 2]
    assert levels[0].degradation_pct == 0.0
    assert all(l.frozen_intact and l.val_bpb is not None for l in levels)
    assert levels[0].n_frozen == 0 and levels[2].n_frozen > levels[1].n_frozen > 0


# -- length matching --------------------------------------------------------

def test_length_match_full_length_is_zero(smiles_track):
    arch = desk_arch(smiles_track.track)
    r = length_match_eval(arch, smiles_track, smiles_track.corpus.seq_len, Budget(steps=5))
    assert r.rel_change_pct == 0.0 and r.train_bytes_full == r.train_bytes_truncated
    half = length_match_eval(arch, smiles_track, 16, Budget(steps=5), full_bpb=r.full_bpb)
    assert half.train_bytes_truncated < half.train_bytes_full
    assert half.truncated_bpb is not None and math.isfinite(half.rel_change_pct)
    rows = smiles_track.corpus.train_idx
    assert half.train_bytes_truncated == int(smiles_track.corpus.token_bytes[rows, :16].sum())
    with pytest.raises(ValueError):
        length_match_eval(arch, smiles_track, 1, Budget(steps=1))
    with pytest.raises(ValueError):
        length_match_eval(arch, smiles_track, 65, Budget(steps=1))


# -- report -----------------------------------------------------------------

def read_csv(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_report_reproduces_decomposition(tmp_path):
    bundle = generate_report(build_logs(), tmp_path, n_resamples=500, n_perm=500)
    rows = {r["track"]: r for r in read_csv(tmp_path / "tables/decomposition.csv")}
    assert round(float(rows["nlp_like"]["hp_pct"])) == 19 and round(float(rows["nlp_like"]["arch_pct"])) == 81
    assert round(float(rows["smiles_like"]["hp_pct"])) == 151
    assert round(float(rows["smiles_like"]["arch_pct"])) == -51
    assert {"tables/runs.csv", "tables/stats.csv", "tables/auc_comparison.csv", "report.md",
            "figures/best_so_far_smiles_like.svg"} <= set(bundle.files)
    assert "| smiles_like | 0.0103 | 151 | -51 |" in (tmp_path / "report.md").read_text()
    stats = read_csv(tmp_path / "tables/stats.csv")
    assert all(r["adjusted_p"] != "" for r in stats)


def test_report_is_deterministic(tmp_path):
    logs = build_logs()
    generate_report(logs, tmp_path / "a", n_resamples=200, n_perm=200)
    generate_report(list(reversed(logs)), tmp_path / "b", n_resamples=200, n_perm=200)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_empty_report_skeleton(tmp_path):
    bundle = generate_report([], tmp_path)
    assert (tmp_path / "report.md").read_text().startswith("# Search report")
    assert (tmp_path / "tables/decomposition.csv").read_text().startswith("track,total_impr_bpb")
    assert "tables/gower_matrix.csv" not in bundle.files


def test_custom_families(tmp_path):
    p = tmp_path / "fam.json"
    p.write_text('{"mine": [{"track": "nlp_like", "a": "agent", "b": "hp_only"},'
                 ' {"track": "nlp_like", "a": "agent", "b": "nothing"}]}')
    fams = load_families(p)
    assert fams[0] == Comparison("nlp_like", "agent", "hp_only", "mine")
    bundle = generate_report(build_logs(), tmp_path / "out", fams, n_resamples=100, n_perm=100)
    rows = read_csv(tmp_path / "out/tables/auc_comparison.csv")
    assert [r["status"] for r in rows] == ["ok", "insufficient-n"]
    assert any("nothing" in w for w in bundle.warnings)
