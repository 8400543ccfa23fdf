"""One budgeted train-and-evaluate experiment."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .config import (ArchConfig, ConfigMutation, HPConfig, arch_from_dict, config_to_dict,
                     hp_from_dict, validate_config)
from .data import Corpus, TrackData, iter_batches, make_batches
from .model import Params, compute_grads, forward_logits, init_params, param_count, param_shapes, token_nats
from .optim import MuonAdamW, lr_at

log = logging.getLogger(__name__)

DEFAULT_EVAL_BATCHES = 5
MAX_PARAMS = 50_000_000


@dataclass(frozen=True)
class Budget:
    """Either a fixed number of optimizer steps or a wall-clock limit."""

    steps: int | None = None
    seconds: float | None = None

    def __post_init__(self):
        if (self.steps is None) == (self.seconds is None):
            raise ValueError("give exactly one of steps or seconds")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.seconds is not None and self.seconds <= 0:
            raise ValueError("seconds must be > 0")

    def to_dict(self) -> dict:
        return {"steps": self.steps} if self.steps is not None else {"seconds": self.seconds}

    @classmethod
    def from_dict(cls, d: dict) -> "Budget":
        return cls(steps=d.get("steps"), seconds=d.get("seconds"))


@dataclass(frozen=True)
class ExperimentRecord:
    index: int
    mutation: ConfigMutation
    arch_after: ArchConfig
    hp_after: HPConfig
    val_bpb: float | None
    crashed: bool
    kept: bool
    seed: int
    steps_run: int
    wall_seconds: float
    param_count: int
    rejected: bool = False
    note: str = ""

    def __post_init__(self):
        if self.crashed and self.val_bpb is not None:
            raise ValueError("crashed record cannot carry a val_bpb")
        if self.kept and self.crashed:
            raise ValueError("crashed record cannot be kept")

    @property
    def ok(self) -> bool:
        return not self.crashed and not self.rejected and self.val_bpb is not None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "mutation": self.mutation.to_dict(),
            "arch_after": config_to_dict(self.arch_after),
            "hp_after": config_to_dict(self.hp_after),
            "val_bpb": self.val_bpb,
            "crashed": self.crashed,
            "kept": self.kept,
            "seed": self.seed,
            "steps_run": self.steps_run,
            "wall_seconds": self.wall_seconds,
            "param_count": self.param_count,
            "rejected": self.rejected,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(
            index=int(d["index"]),
            mutation=ConfigMutation.from_dict(d.get("mutation") or {}),
            arch_after=arch_from_dict(d["arch_after"]),
            hp_after=hp_from_dict(d["hp_after"]),
            val_bpb=None if d.get("val_bpb") is None else float(d["val_bpb"]),
            crashed=bool(d["crashed"]),
            kept=bool(d["kept"]),
            seed=int(d.get("seed", 0)),
            steps_run=int(d.get("steps_run", 0)),
            wall_seconds=float(d.get("wall_seconds", 0.0)),
            param_count=int(d.get("param_count", 0)),
            rejected=bool(d.get("rejected", False)),
            note=str(d.get("note", "")),
        )


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: Params
    steps_run: int
    final_train_loss: float
    losses: list[float] = field(default_factory=list)


def evaluate_bpb(params: Params, arch: ArchConfig, corpus: Corpus, eval_batches: int = DEFAULT_EVAL_BATCHES,
                 seed: int = 0, batch_seqs: int = 8, split: str = "val") -> float:
    """Byte-weighted bits per byte over a seeded selection of batches; params untouched."""
    total_nats = 0.0
    total_bytes = 0
    for i, batch in enumerate(iter_batches(corpus, batch_seqs, seed, split)):
        if i >= eval_batches:
            break
        nats, valid = token_nats(forward_logits(params, arch, batch), batch)
        total_nats += float(nats.sum())
        total_bytes += int(batch.token_bytes[:, 1:][valid].sum())
    if total_bytes == 0:
        return float("nan")
    return total_nats / (math.log(2.0) * total_bytes)


def evaluate_val_bpb(params: Params, arch: ArchConfig, corpus: Corpus,
                     eval_batches: int = DEFAULT_EVAL_BATCHES, seed: int = 0,
                     batch_seqs: int = 8) -> float:
    return evaluate_bpb(params, arch, corpus, eval_batches, seed, batch_seqs, "val")


def train_model(arch: ArchConfig, hp: HPConfig, corpus: Corpus, budget: Budget, seed: int,
                init: Params | None = None, frozen: Iterable[str] = ()) -> TrainResult:
    """Train from a seeded init (or a copy of ``init``); raises TrainingDiverged on NaN/inf."""
    params = init_params(arch, corpus.vocab_size, seed) if init is None else \
        {k: v.copy() for k, v in init.items()}
    frozen = frozenset(frozen)
    by_steps = budget.steps is not None
    total = budget.steps if by_steps else 1000
    opt = MuonAdamW(params, hp, total)
    stream = make_batches(corpus, hp.device_batch_seqs, seed)
    losses: list[float] = []
    start = time.perf_counter()
    step = 0
    with np.errstate(all="ignore"):
        while True:
            if by_steps:
                if step >= total:
                    break
                sched_step = step
            else:
                frac = (time.perf_counter() - start) / budget.seconds
                if frac >= 1.0:
                    break
                sched_step = int(frac * total)
            grads: Params | None = None
            loss = 0.0
            for _ in range(hp.grad_accum_steps):
                l, g = compute_grads(params, arch, next(stream), 1.0 / hp.grad_accum_steps)
                loss += l
                if grads is None:
                    grads = g
                else:
                    for k in grads:
                        grads[k] += g[k]
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            assert grads is not None
            opt.step(params, grads, sched_step, frozen)
            losses.append(loss)
            step += 1
        for name, p in params.items():
            if not np.all(np.isfinite(p)):
                raise TrainingDiverged(f"non-finite parameter {name} after {step} steps")
    return TrainResult(params, step, losses[-1] if losses else float("nan"), losses)


def run_experiment(arch: ArchConfig, hp: HPConfig, track: TrackData, budget: Budget, seed: int,
                   *, index: int = 1, mutation: ConfigMutation | None = None,
                   eval_batches: int = DEFAULT_EVAL_BATCHES, max_params: int = MAX_PARAMS,
                   init: Params | None = None, frozen: Iterable[str] = ()) -> ExperimentRecord:
    """Train and evaluate; every failure becomes a crashed record instead of an exception."""
    mutation = mutation if mutation is not None else ConfigMutation()
    start = time.perf_counter()
    n_params = 0
    steps_run = 0

    def crashed(note: str) -> ExperimentRecord:
        return ExperimentRecord(index, mutation, arch, hp, None, True, False, seed, steps_run,
                                time.perf_counter() - start, n_params, note=note)

    violations = validate_config(arch, hp, track.track)
    if violations:
        return crashed("invalid config: " + "; ".join(map(str, violations)))
    try:
        n_params = sum(int(np.prod(s)) for s in param_shapes(arch, track.corpus.vocab_size).values())
        if n_params > max_params:
            return crashed(f"model too large: {n_params} > {max_params} parameters")
        result = train_model(arch, hp, track.corpus, budget, seed, init=init, frozen=frozen)
        steps_run = result.steps_run
        with np.errstate(all="ignore"):
            bpb = evaluate_val_bpb(result.params, arch, track.corpus, eval_batches, seed,
                                   hp.device_batch_seqs)
        if not math.isfinite(bpb):
            return crashed("non-finite val_bpb")
        n_params = param_count(result.params)
    except Exception as e:  # noqa: BLE001 - crash containment is the contract
        log.debug("experiment %d crashed", index, exc_info=True)
        return crashed(f"{type(e).__name__}: {e}")
    return ExperimentRecord(index, mutation, arch, hp, float(bpb), False, False, seed, steps_run,
                            time.perf_counter() - start, n_params)


def schedule_preview(hp: HPConfig, total_steps: int) -> list[float]:
    """LR multipliers per step, handy for manifests."""
    return [lr_at(s, total_steps, 1.0, hp.warmdown_ratio) for s in range(total_steps)]


def with_index(rec: ExperimentRecord, index: int, mutation: ConfigMutation, kept: bool) -> ExperimentRecord:
    return replace(rec, index=index, mutation=mutation, kept=kept)
