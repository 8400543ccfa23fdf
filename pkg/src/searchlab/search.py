"""The four search conditions and their JSONL run logs."""

from __future__ import annotations

import datetime as _dt
import json
import logging
import os
import re
import string
import uuid
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO, Callable, Protocol

import numpy as np

from .config import (ALL_PATHS, DESK_NAS_SPACE, ArchConfig, ConfigMutation, FieldEdit, HPConfig,
                     MutationRejected, NasSpace, SearchConstraint, _same, apply_mutation,
                     arch_from_dict, baseline_arch, coerce_field, config_to_dict, default_hp,
                     diff_configs, get_field, hp_from_dict, sample_random_nas)
from .data import TrackData
from .optim import MUON_MOMENTUM, NS_COEFFS, NS_STEPS
from .trainer import DEFAULT_EVAL_BATCHES, Budget, ExperimentRecord, run_experiment, with_index

log = logging.getLogger(__name__)

DEFAULT_N = 100


class ProposerError(RuntimeError):
    """Raised by proposers; ``kind`` is network_error or auth_error."""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(f"{kind}: {message}")


class Proposer(Protocol):
    def propose(self, history: "RunLog", current: tuple[ArchConfig, HPConfig],
                constraint: SearchConstraint) -> ConfigMutation: ...

    def describe(self) -> str: ...


@dataclass
class RunLog:
    condition: str
    track: str
    run_id: str
    seed: int
    n_experiments: int
    baseline_val_bpb: float | None
    proposer: str
    baseline_arch: ArchConfig
    baseline_hp: HPConfig
    created: str = ""
    metadata: dict = field(default_factory=dict)
    records: list[ExperimentRecord] = field(default_factory=list)

    def header(self) -> dict:
        return {
            "condition": self.condition,
            "track": self.track,
            "run_id": self.run_id,
            "seed": self.seed,
            "n_experiments": self.n_experiments,
            "baseline_val_bpb": self.baseline_val_bpb,
            "proposer": self.proposer,
            "created": self.created,
            "baseline_arch": config_to_dict(self.baseline_arch),
            "baseline_hp": config_to_dict(self.baseline_hp),
            "metadata": self.metadata,
        }

    @classmethod
    def from_header(cls, h: dict) -> "RunLog":
        return cls(
            condition=h["condition"], track=h["track"], run_id=str(h["run_id"]),
            seed=int(h.get("seed", 0)), n_experiments=int(h.get("n_experiments", DEFAULT_N)),
            baseline_val_bpb=None if h.get("baseline_val_bpb") is None else float(h["baseline_val_bpb"]),
            proposer=str(h.get("proposer", "")),
            baseline_arch=arch_from_dict(h.get("baseline_arch") or {}),
            baseline_hp=hp_from_dict(h.get("baseline_hp") or {}),
            created=str(h.get("created", "")), metadata=dict(h.get("metadata") or {}))

    def current_config(self) -> tuple[ArchConfig, HPConfig]:
        for rec in reversed(self.records):
            if rec.kept:
                return rec.arch_after, rec.hp_after
        return self.baseline_arch, self.baseline_hp

    def best_val_bpb(self) -> float | None:
        vals = [r.val_bpb for r in self.records if r.ok]
        if self.baseline_val_bpb is not None:
            vals.append(self.baseline_val_bpb)
        return min(vals) if vals else None

    def kept_mutations(self) -> list[ConfigMutation]:
        return [r.mutation for r in self.records if r.kept]

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def load_runlog(path: str | Path) -> RunLog:
    """Read a JSONL run log; a truncated final line (interrupted write) is skipped."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty run log")
    runlog = RunLog.from_header(json.loads(lines[0]))
    for i, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines):
                log.warning("%s: ignoring truncated last line", path)
                break
            raise
        runlog.records.append(ExperimentRecord.from_dict(d))
    return runlog


class _Writer:
    def __init__(self, path: str | Path | None):
        self.fh: IO[str] | None = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w")

    def write(self, obj: dict) -> None:
        if self.fh is None:
            return
        self.fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self.fh.flush()
        os.fsync(self.fh.fileno())

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def run_metadata(budget: Budget, eval_batches: int) -> dict:
    from . import kernels
    return {
        "budget": budget.to_dict(),
        "eval_batches": eval_batches,
        "value_embedding_layers": "even",
        "muon_momentum": MUON_MOMENTUM,
        "muon_nesterov": False,
        "newton_schulz": {"coeffs": list(NS_COEFFS), "steps": NS_STEPS},
        "kernels": kernels.BACKEND,
    }


def run_search(condition: str, proposer: Proposer | None, track: TrackData, n: int = DEFAULT_N,
               budget: Budget = Budget(steps=200), seed: int = 0, *,
               base_arch: ArchConfig | None = None, base_hp: HPConfig | None = None,
               out: str | Path | None = None, run_id: str | None = None,
               eval_batches: int = DEFAULT_EVAL_BATCHES, reuse_results: bool = True) -> RunLog:
    """Baseline evaluation followed by ``n`` propose / train / keep-or-revert steps.

    A mutation is kept only if its val_bpb is strictly below the best so far.
    Constraint violations are logged as rejected records and still use a slot.
    With a step budget, repeated configs reuse the earlier (deterministic) result.
    """
    constraint = SearchConstraint.for_condition(condition)
    arch = base_arch if base_arch is not None else baseline_arch(track.track)
    hp = base_hp if base_hp is not None else default_hp(track.track)
    if condition != "fixed_default" and proposer is None:
        raise ValueError(f"condition {condition!r} needs a proposer")

    baseline = run_experiment(arch, hp, track, budget, seed, index=0, eval_batches=eval_batches)
    runlog = RunLog(condition=condition, track=track.track.name,
                    run_id=run_id or uuid.uuid4().hex[:12], seed=seed, n_experiments=n,
                    baseline_val_bpb=baseline.val_bpb,
                    proposer=proposer.describe() if proposer is not None else "none",
                    baseline_arch=arch, baseline_hp=hp,
                    created=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                    metadata=run_metadata(budget, eval_batches))
    if baseline.crashed:
        runlog.metadata["baseline_note"] = baseline.note
    cache: dict[tuple[ArchConfig, HPConfig], ExperimentRecord] = {}
    if reuse_results and budget.steps is not None and not baseline.crashed:
        cache[(arch, hp)] = baseline

    writer = _Writer(out)
    try:
        writer.write(runlog.header())
        if condition == "fixed_default":
            return runlog
        assert proposer is not None
        current = (arch, hp)
        best = baseline.val_bpb if baseline.val_bpb is not None else float("inf")
        for i in range(1, n + 1):
            try:
                m = proposer.propose(runlog, current, constraint)
            except ProposerError as e:
                if e.kind == "auth_error":
                    raise
                m = ConfigMutation(rationale=f"proposer error: {e}", malformed=True)
            try:
                new_arch, new_hp = apply_mutation(*current, m, constraint)
            except MutationRejected as e:
                rec = ExperimentRecord(i, m, *current, None, True, False, seed, 0, 0.0, 0,
                                       rejected=True, note=str(e))
            else:
                key = (new_arch, new_hp)
                if key in cache:
                    rec = with_index(cache[key], i, m, False)
                    rec = ExperimentRecord(**{**rec.__dict__, "note": "reused earlier result"})
                else:
                    rec = run_experiment(new_arch, new_hp, track, budget, seed, index=i, mutation=m,
                                         eval_batches=eval_batches)
                    if reuse_results and budget.steps is not None and not rec.crashed:
                        cache[key] = rec
                if rec.ok and rec.val_bpb < best:
                    best = rec.val_bpb
                    current = key
                    rec = with_index(rec, i, m, True)
            runlog.records.append(rec)
            writer.write(rec.to_dict())
            log.info("[%s %s] %d/%d bpb=%s kept=%s %s", condition, track.track.name, i, n,
                     None if rec.val_bpb is None else f"{rec.val_bpb:.4f}", rec.kept, rec.note)
    finally:
        writer.close()
    return runlog


# ---------------------------------------------------------------------------
# proposers
# ---------------------------------------------------------------------------

class RandomNasProposer:
    """Every call draws a fresh architecture; hyperparameters stay at the baseline's."""

    def __init__(self, seed: int, space: NasSpace = DESK_NAS_SPACE):
        self.seed = seed
        self.space = space
        self.calls = 0

    def describe(self) -> str:
        return f"random_nas(seed={self.seed})"

    def propose(self, history: RunLog, current, constraint) -> ConfigMutation:
        self.calls += 1
        call_seed = int(np.random.SeedSequence([self.seed, self.calls]).generate_state(1)[0])
        arch = sample_random_nas(call_seed, history.baseline_arch, self.space)
        return diff_configs(current, (arch, history.baseline_hp), f"random sample #{self.calls}")


def random_nas_proposer(seed: int, space: NasSpace = DESK_NAS_SPACE) -> RandomNasProposer:
    return RandomNasProposer(seed, space)


class ScriptedProposer:
    """Replays a fixed list of mutations, then proposes no-ops.

    An edit whose ``old`` is None is filled in from the current config at
    replay time, so scripts can be written without tracking state.
    """

    def __init__(self, script: list[ConfigMutation], name: str = "scripted"):
        self.script = list(script)
        self.name = name
        self.pos = 0

    def describe(self) -> str:
        return f"{self.name}({len(self.script)} mutations)"

    def propose(self, history: RunLog, current, constraint) -> ConfigMutation:
        if self.pos >= len(self.script):
            return ConfigMutation(rationale="script exhausted")
        m = self.script[self.pos]
        self.pos += 1
        edits = tuple(FieldEdit(e.path, get_field(*current, e.path) if e.old is None else e.old, e.new)
                      for e in m.edits)
        return ConfigMutation(edits, m.rationale, m.malformed)


def scripted_proposer(script: list[ConfigMutation]) -> ScriptedProposer:
    return ScriptedProposer(script)


def load_script(path: str | Path) -> list[ConfigMutation]:
    """A JSON list of mutations; each edit may be a dict {path: new} or [path, old, new] triples."""
    raw = json.loads(Path(path).read_text())
    out = []
    for item in raw:
        edits = item.get("edits", [])
        if isinstance(edits, dict):
            item = {**item, "edits": [[k, None, v] for k, v in edits.items()]}
        out.append(ConfigMutation.from_dict(item))
    return out


PROMPTS = ("agent", "hp_only")


def load_prompt(name_or_path: str) -> str:
    if name_or_path in PROMPTS:
        return (resources.files("searchlab") / "prompts" / f"{name_or_path}.md").read_text()
    return Path(name_or_path).read_text()


def _history_text(history: RunLog, limit: int = 30) -> str:
    rows = []
    if history.baseline_val_bpb is not None:
        rows.append(f"baseline: val_bpb={history.baseline_val_bpb:.6f}")
    for r in history.records[-limit:]:
        edits = ", ".join(f"{e.path}: {e.old!r} -> {e.new!r}" for e in r.mutation.edits) or "no change"
        if r.rejected:
            status = "rejected"
        elif r.crashed:
            status = "crashed"
        else:
            status = f"val_bpb={r.val_bpb:.6f} " + ("KEPT" if r.kept else "reverted")
        rows.append(f"#{r.index}: {edits} | {status}")
    return "\n".join(rows) if rows else "(no experiments yet)"


def render_prompt(template: str, history: RunLog, current, constraint: SearchConstraint) -> str:
    arch, hp = current
    cfg = json.dumps({"arch": config_to_dict(arch), "hp": config_to_dict(hp)}, indent=2, sort_keys=True)
    return string.Template(template).safe_substitute(
        track=history.track,
        current_config=cfg,
        editable_fields=", ".join(sorted(constraint.mutable_fields)),
        history=_history_text(history),
    )


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.S)


def extract_json_object(text: str) -> dict | None:
    """First JSON object in ``text``, looking inside code fences first."""
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    dec = json.JSONDecoder()
    for cand in candidates:
        for i, ch in enumerate(cand):
            if ch != "{":
                continue
            try:
                obj, _ = dec.raw_decode(cand[i:])
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict):
                return obj
    return None


def _resolve_path(key: str) -> str:
    if key in ALL_PATHS:
        return key
    hits = [p for p in ALL_PATHS if p.split(".", 1)[1] == key]
    if len(hits) != 1:
        raise ValueError(f"unknown field {key!r}")
    return hits[0]


def parse_mutation_reply(obj: dict, current) -> ConfigMutation:
    """Turn a {"edits": {path: value}, "rationale": ...} reply into a mutation against ``current``."""
    edits = obj.get("edits")
    if isinstance(edits, list):
        edits = {e["path"]: e["new"] for e in edits}
    if not isinstance(edits, dict):
        raise ValueError("reply has no 'edits' object")
    out = []
    for key, value in edits.items():
        path = _resolve_path(key)
        old = get_field(*current, path)
        new = coerce_field(path, value)
        if not _same(old, new):
            out.append(FieldEdit(path, old, new))
    return ConfigMutation(tuple(out), str(obj.get("rationale", "")))


PostFn = Callable[[str, dict, dict], tuple[int, str]]


def _requests_post(url: str, headers: dict, payload: dict) -> tuple[int, str]:
    import requests
    try:
        resp = requests.post(url, headers=headers, json=payload, timeout=120)
    except requests.RequestException as e:
        raise ProposerError("network_error", str(e)) from e
    return resp.status_code, resp.text


class LlmProposer:
    """Chat-completions client that asks for one JSON mutation per call."""

    def __init__(self, endpoint: str, model_name: str, prompt_template: str, key: str,
                 post: PostFn | None = None, max_attempts: int = 3, temperature: float = 0.7):
        self.endpoint = endpoint
        self.model_name = model_name
        self.template = prompt_template
        self.key = key
        self.post = post or _requests_post
        self.max_attempts = max_attempts
        self.temperature = temperature
        self.last_raw: list[str] = []

    def describe(self) -> str:
        return f"llm(model={self.model_name}, endpoint={self.endpoint})"

    def _complete(self, prompt: str) -> str:
        headers = {"Authorization": f"Bearer {self.key}", "Content-Type": "application/json"}
        payload = {"model": self.model_name, "temperature": self.temperature,
                   "messages": [{"role": "user", "content": prompt}]}
        status, body = self.post(self.endpoint, headers, payload)
        if status in (401, 403):
            raise ProposerError("auth_error", f"HTTP {status}")
        if status >= 400:
            raise ProposerError("network_error", f"HTTP {status}: {body[:200]}")
        try:
            return json.loads(body)["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            return body  # not chat-completions shaped; try to parse it directly

    def propose(self, history: RunLog, current, constraint) -> ConfigMutation:
        prompt = render_prompt(self.template, history, current, constraint)
        self.last_raw = []
        problems = []
        for _ in range(self.max_attempts):
            text = self._complete(prompt)
            self.last_raw.append(text)
            obj = extract_json_object(text)
            if obj is None:
                problems.append("no JSON object in reply")
                continue
            try:
                return parse_mutation_reply(obj, current)
            except (ValueError, TypeError, KeyError) as e:
                problems.append(str(e))
        return ConfigMutation(rationale="malformed after retries: " + "; ".join(problems), malformed=True)


def llm_proposer(endpoint: str | None, model_name: str, prompt_template: str,
                 key: str | None = None, post: PostFn | None = None,
                 max_attempts: int = 3) -> LlmProposer:
    """Endpoint and key fall back to SEARCHLAB_LLM_ENDPOINT / SEARCHLAB_LLM_KEY."""
    endpoint = endpoint or os.environ.get("SEARCHLAB_LLM_ENDPOINT", "")
    key = key if key is not None else os.environ.get("SEARCHLAB_LLM_KEY", "")
    if not endpoint:
        raise ProposerError("network_error", "no endpoint (set SEARCHLAB_LLM_ENDPOINT)")
    if not key:
        raise ProposerError("auth_error", "no credential (set SEARCHLAB_LLM_KEY)")
    return LlmProposer(endpoint, model_name, load_prompt(prompt_template), key, post, max_attempts)
