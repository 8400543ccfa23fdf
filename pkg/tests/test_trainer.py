import math

import numpy as np
import pytest

from searchlab.config import ArchConfig, ConfigMutation, FieldEdit, HPConfig, desk_arch
from searchlab.data import build_char_tokenizer, corpus_from_text
from searchlab.model import init_params
from searchlab.trainer import Budget, ExperimentRecord, evaluate_bpb, evaluate_val_bpb, run_experiment, train_model


def checksum(params):
    return {k: v.tobytes() for k, v in params.items()}


def test_budget_validation():
    with pytest.raises(ValueError):
        Budget()
    with pytest.raises(ValueError):
        Budget(steps=1, seconds=1.0)
    assert Budget.from_dict(Budget(seconds=2.5).to_dict()) == Budget(seconds=2.5)


def test_record_invariants_and_roundtrip():
    m = ConfigMutation((FieldEdit("arch.depth", 2, 3),), "deeper")
    rec = ExperimentRecord(4, m, ArchConfig(depth=3), HPConfig(), 1.25, False, True, 7, 20, 0.5, 1000)
    assert ExperimentRecord.from_dict(rec.to_dict()) == rec
    with pytest.raises(ValueError):
        ExperimentRecord(1, m, ArchConfig(), HPConfig(), 1.0, True, False, 0, 0, 0.0, 0)
    with pytest.raises(ValueError):
        ExperimentRecord(1, m, ArchConfig(), HPConfig(), None, True, True, 0, 0, 0.0, 0)


def test_same_seed_same_bpb(smiles_track, tiny_base):
    arch, hp = tiny_base
    a = run_experiment(arch, hp, smiles_track, Budget(steps=10), seed=3)
    b = run_experiment(arch, hp, smiles_track, Budget(steps=10), seed=3)
    assert not a.crashed and a.val_bpb == b.val_bpb and a.steps_run == 10


def test_divergence_is_a_crash(smiles_track, tiny_base):
    from dataclasses import replace
    arch, hp = tiny_base
    # float64 takes about 30 steps of a 1e6 matrix LR to overflow
    rec = run_experiment(arch, replace(hp, lr_matrix=1e6), smiles_track, Budget(steps=100), seed=0)
    assert rec.crashed and rec.val_bpb is None and not rec.kept
    assert "non-finite" in rec.note


def test_invalid_and_oversized_configs_crash(smiles_track, tiny_base):
    arch, hp = tiny_base
    rec = run_experiment(ArchConfig(width=30, heads=4, kv_heads=4), hp, smiles_track, Budget(steps=1), 0)
    assert rec.crashed and "invalid config" in rec.note
    rec = run_experiment(arch, hp, smiles_track, Budget(steps=1), 0, max_params=10)
    assert rec.crashed and "too large" in rec.note


def test_training_beats_uniform_bound(smiles_track, tiny_base):
    arch, hp = tiny_base
    rec = run_experiment(arch, hp, smiles_track, Budget(steps=500), seed=0)
    assert not rec.crashed
    assert rec.val_bpb < math.log2(smiles_track.corpus.vocab_size)


def test_evaluation_is_pure_and_repeatable(smiles_track, tiny_base):
    arch, _ = tiny_base
    params = init_params(arch, smiles_track.corpus.vocab_size, 0)
    before = checksum(params)
    a = evaluate_val_bpb(params, arch, smiles_track.corpus, 3, seed=1)
    b = evaluate_val_bpb(params, arch, smiles_track.corpus, 3, seed=1)
    assert a == b and checksum(params) == before


def test_untrained_model_on_256_symbols_is_near_eight_bits():
    rng = np.random.default_rng(0)
    symbols = [chr(c) for c in range(0x100, 0x200)]  # 256 distinct one-char symbols
    text = "\n".join("".join(rng.choice(symbols, size=40)) for _ in range(100))
    tok = build_char_tokenizer(text)
    corpus = corpus_from_text(text.encode("utf-8"), tok, 32)
    arch = desk_arch()
    params = init_params(arch, tok.vocab_size, 0)
    # two UTF-8 bytes per symbol: bits per token is about 8, so bits per byte about 4
    bpb = evaluate_val_bpb(params, arch, corpus, 5)
    assert 2 * bpb == pytest.approx(8.0, abs=0.2)


def test_budget_monotonicity(smiles_track, tiny_base):
    arch, hp = tiny_base
    short = train_model(arch, hp, smiles_track.corpus, Budget(steps=40), 0)
    long = train_model(arch, hp, smiles_track.corpus, Budget(steps=80), 0)
    n = evaluate_bpb(short.params, arch, smiles_track.corpus, 10, seed=0, split="train")
    d = evaluate_bpb(long.params, arch, smiles_track.corpus, 10, seed=0, split="train")
    assert d <= n + 0.05


def test_wall_clock_budget_runs(smiles_track, tiny_base):
    arch, hp = tiny_base
    rec = run_experiment(arch, hp, smiles_track, Budget(seconds=0.3), seed=0)
    assert not rec.crashed and rec.steps_run >= 1


def test_frozen_parameters_do_not_move(smiles_track, tiny_base):
    arch, hp = tiny_base
    init = init_params(arch, smiles_track.corpus.vocab_size, 0)
    res = train_model(arch, hp, smiles_track.corpus, Budget(steps=5), 0, init=init, frozen={"h1.wq", "tok_emb"})
    assert np.array_equal(res.params["h1.wq"], init["h1.wq"])
    assert np.array_equal(res.params["tok_emb"], init["tok_emb"])
    assert not np.array_equal(res.params["h0.wq"], init["h0.wq"])
