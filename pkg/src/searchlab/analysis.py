"""Cross-run studies: features, transfer, freezing, length matching, innovations, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .config import (ArchConfig, ConfigMutation, FieldEdit, HPConfig, SearchConstraint, apply_mutation,
                     default_hp, get_field, validate_config)
from .data import TrackData
from .metrics import (BestSoFarCurve, auc_oc, best_so_far, decompose, decomposition_csv, keep_rate,
                      crash_count)
from .model import Params, init_params, param_shapes
from .search import RunLog
from .stats import (FeatureVector, StatReport, adjust_families, binomial_tail, bootstrap_ci, cohens_d,
                    fisher_exact, gower_matrix, mann_whitney_u, permutation_cluster_test, stats_csv,
                    welch_t)
from .trainer import Budget, evaluate_val_bpb, run_experiment, train_model

log = logging.getLogger(__name__)

UNIVERSAL_THRESHOLD_PCT = 1.0
UNIVERSAL_PRIOR = 0.35


def rel_change_pct(new: float, ref: float) -> float:
    return (new - ref) / ref * 100.0


def run_best(log_: RunLog) -> float:
    """Lowest val_bpb in the run: successful experiments plus the baseline when recorded."""
    vals = [r.val_bpb for r in log_.records if r.ok]
    if log_.baseline_val_bpb is not None:
        vals.append(log_.baseline_val_bpb)
    if not vals:
        raise ValueError(f"run {log_.run_id} has no successful evaluation")
    return min(vals)


def _pmap(fn: Callable, jobs: Sequence[tuple], parallel: int = 1) -> list:
    if parallel <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as ex:
        futures = [ex.submit(fn, *j) for j in jobs]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

NUMERIC_FEATURES = ("depth", "width", "heads", "kv_heads", "ffn_mult")
HP_FEATURES = ("lr_matrix", "lr_embedding", "lr_unembedding")
CATEGORICAL_FEATURES = ("activation", "attention_pattern", "value_embeddings", "weight_tying")


def best_config(log_: RunLog) -> tuple[ArchConfig, HPConfig]:
    """Config of the lowest-bpb kept state (the baseline if nothing was kept)."""
    kept = [r for r in log_.records if r.kept and r.ok]
    if not kept:
        return log_.baseline_arch, log_.baseline_hp
    best = min(kept, key=lambda r: (r.val_bpb, r.index))
    return best.arch_after, best.hp_after


def extract_features(log_: RunLog) -> FeatureVector:
    if log_.baseline_val_bpb is None and not any(r.ok for r in log_.records):
        raise ValueError(f"run {log_.run_id} has no successful experiments")
    arch, hp = best_config(log_)
    numeric = {k: float(getattr(arch, k)) for k in NUMERIC_FEATURES}
    numeric.update({k: float(getattr(hp, k)) for k in HP_FEATURES})
    categorical = {k: str(getattr(arch, k)) for k in CATEGORICAL_FEATURES}
    return FeatureVector(numeric, categorical, log_.track)


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransferCell:
    source_track: str
    target_track: str
    native_bpb: float | None
    transfer_bpb: float | None
    rel_change_pct: float | None
    crashed: bool = False
    note: str = ""


def _train_eval(arch: ArchConfig, hp: HPConfig, track: TrackData, budget: Budget, seed: int):
    return run_experiment(arch, hp, track, budget, seed)


def transfer_matrix(best_configs: Mapping[str, ArchConfig], tracks: Mapping[str, TrackData],
                    budget: Budget, seed: int = 0, hps: Mapping[str, HPConfig] | None = None,
                    parallel: int = 1) -> list[TransferCell]:
    """Train each track's best architecture on every other track.

    HPs are the target track's (defaults unless ``hps`` is given). The native
    value for a target is its own best architecture under the same budget.
    Diagonal cells carry rel_change 0 without extra training.
    """
    names = [n for n in tracks if n in best_configs]
    missing = [n for n in tracks if n not in best_configs]
    if missing:
        raise ValueError(f"no best config for tracks {missing}")

    def hp_for(t: str) -> HPConfig:
        return hps[t] if hps and t in hps else default_hp(tracks[t].track)

    jobs = [(best_configs[s], hp_for(t), tracks[t], budget, seed) for s in names for t in names]
    recs = dict(zip([(s, t) for s in names for t in names], _pmap(_train_eval, jobs, parallel)))
    cells = []
    for s in names:
        for t in names:
            native = recs[(t, t)]
            if s == t:
                cells.append(TransferCell(s, t, native.val_bpb, native.val_bpb,
                                          0.0 if native.ok else None, not native.ok, native.note))
                continue
            tr = recs[(s, t)]
            if not (native.ok and tr.ok):
                cells.append(TransferCell(s, t, native.val_bpb, tr.val_bpb, None, True,
                                          tr.note or native.note))
            else:
                cells.append(TransferCell(s, t, native.val_bpb, tr.val_bpb,
                                          rel_change_pct(tr.val_bpb, native.val_bpb)))
    return cells


TRANSFER_COLUMNS = ("source_track", "target_track", "native_bpb", "transfer_bpb", "rel_change_pct",
                    "crashed")


def transfer_csv(cells: Sequence[TransferCell]) -> str:
    return _csv(TRANSFER_COLUMNS, [[c.source_track, c.target_track, c.native_bpb, c.transfer_bpb,
                                    c.rel_change_pct, c.crashed] for c in cells])


# ---------------------------------------------------------------------------
# layer freezing
# ---------------------------------------------------------------------------

VOCAB_TENSORS = ("tok_emb", "unemb", "ve")


def _is_vocab_tensor(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in VOCAB_TENSORS


def adapt_params(source: Params, arch: ArchConfig, vocab_size: int, seed: int) -> tuple[Params, set[str]]:
    """Source weights for a target vocabulary.

    Block weights are copied. Token tables (embedding, unembedding, value
    embeddings) are copied when the vocab matches and freshly initialized
    otherwise. Returns the params and the names that were re-initialized.
    """
    shapes = param_shapes(arch, vocab_size)
    fresh = init_params(arch, vocab_size, seed)
    out: Params = {}
    reinit: set[str] = set()
    for name, shape in shapes.items():
        src = source.get(name)
        if src is not None and src.shape == shape:
            out[name] = src.copy()
        elif src is not None and _is_vocab_tensor(name):
            out[name] = fresh[name]
            reinit.add(name)
        else:
            got = None if src is None else src.shape
            raise ValueError(f"source parameter {name} has shape {got}, target needs {shape}")
    return out, reinit


def frozen_names(arch: ArchConfig, k: int, exclude: Iterable[str] = ()) -> set[str]:
    """Parameters of the ``k`` deepest blocks."""
    if not 0 <= k <= arch.depth:
        raise ValueError(f"cannot freeze {k} blocks of a depth-{arch.depth} model")
    exclude = set(exclude)
    blocks = {f"h{l}." for l in range(arch.depth - k, arch.depth)}
    return {n for n in param_shapes(arch, 2)
            if n.split(".", 1)[0] + "." in blocks and n not in exclude}


def _checksum(params: Mapping[str, np.ndarray], names: Iterable[str]) -> str:
    h = hashlib.sha256()
    for n in sorted(names):
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n]).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class FreezeLevel:
    k: int
    n_frozen: int
    val_bpb: float | None
    degradation_pct: float | None
    frozen_intact: bool
    note: str = ""


def _freeze_job(source: Params, arch: ArchConfig, hp: HPConfig, target: TrackData, k: int,
                budget: Budget, seed: int) -> FreezeLevel:
    init, reinit = adapt_params(source, arch, target.corpus.vocab_size, seed)
    frozen = frozen_names(arch, k, exclude=reinit)
    before = _checksum(init, frozen)
    try:
        res = train_model(arch, hp, target.corpus, budget, seed, init=init, frozen=frozen)
        with np.errstate(all="ignore"):
            bpb = evaluate_val_bpb(res.params, arch, target.corpus, seed=seed,
                                   batch_seqs=hp.device_batch_seqs)
    except Exception as e:  # noqa: BLE001 - a failed level is reported, not raised
        return FreezeLevel(k, len(frozen), None, None, True, f"{type(e).__name__}: {e}")
    intact = _checksum(res.params, frozen) == before
    ok = math.isfinite(bpb)
    return FreezeLevel(k, len(frozen), bpb if ok else None, None, intact, "" if ok else "non-finite val_bpb")


def layer_freeze_curve(source_params: Params, arch: ArchConfig, target: TrackData,
                       levels: Sequence[int] | None = None, budget: Budget = Budget(steps=100),
                       seed: int = 0, hp: HPConfig | None = None, parallel: int = 1) -> list[FreezeLevel]:
    """Fine-tune copies of the source model on ``target`` with the k deepest blocks frozen.

    Degradation is relative to the k = 0 (nothing frozen) fine-tune.
    """
    levels = list(range(arch.depth + 1)) if levels is None else sorted(set(levels) | {0})
    for k in levels:
        if not 0 <= k <= arch.depth:
            raise ValueError(f"freeze level {k} outside 0..{arch.depth}")
    hp = hp if hp is not None else default_hp(target.track)
    jobs = [(source_params, arch, hp, target, k, budget, seed) for k in levels]
    out = _pmap(_freeze_job, jobs, parallel)
    ref = out[0].val_bpb
    return [replace(lv, degradation_pct=None if lv.val_bpb is None or ref is None
                    else rel_change_pct(lv.val_bpb, ref)) for lv in out]


FREEZE_COLUMNS = ("k", "n_frozen", "val_bpb", "degradation_pct", "frozen_intact")


def freeze_csv(levels: Sequence[FreezeLevel]) -> str:
    return _csv(FREEZE_COLUMNS, [[l.k, l.n_frozen, l.val_bpb, l.degradation_pct, l.frozen_intact]
                                 for l in levels])


# ---------------------------------------------------------------------------
# length matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LengthMatchResult:
    truncated_len: int
    full_bpb: float | None
    truncated_bpb: float | None
    rel_change_pct: float | None
    train_bytes_full: int
    train_bytes_truncated: int


def truncate_track(track: TrackData, length: int) -> TrackData:
    if length < 2:
        raise ValueError("truncated length must be >= 2")
    return replace(track, track=replace(track.track, seq_len=length), corpus=track.corpus.truncated(length))


def length_match_eval(arch: ArchConfig, target: TrackData, truncated_len: int, budget: Budget,
                      seed: int = 0, hp: HPConfig | None = None,
                      full_bpb: float | None = None) -> LengthMatchResult:
    """Train on target sequences cut to ``truncated_len`` and compare with the untruncated run."""
    if truncated_len < 2:
        raise ValueError("truncated length must be >= 2")
    if truncated_len > target.corpus.seq_len:
        raise ValueError(f"truncated length {truncated_len} exceeds seq_len {target.corpus.seq_len}")
    hp = hp if hp is not None else default_hp(target.track)
    if full_bpb is None:
        full_bpb = run_experiment(arch, hp, target, budget, seed).val_bpb
    short = truncate_track(target, truncated_len)
    # same sequences per step, fewer tokens per sequence
    short_hp = replace(hp, total_batch_tokens=hp.device_batch_seqs * truncated_len * hp.grad_accum_steps)
    rec = run_experiment(arch, short_hp, short, budget, seed)
    rel = None
    if full_bpb is not None and rec.val_bpb is not None:
        rel = rel_change_pct(rec.val_bpb, full_bpb)
    rows = target.corpus.train_idx
    return LengthMatchResult(truncated_len, full_bpb, rec.val_bpb, rel,
                             int(target.corpus.token_bytes[rows].sum()),
                             int(short.corpus.token_bytes[rows].sum()))


def length_sweep(arch: ArchConfig, target: TrackData, lengths: Sequence[int], budget: Budget,
                 seed: int = 0, hp: HPConfig | None = None) -> list[LengthMatchResult]:
    hp = hp if hp is not None else default_hp(target.track)
    full = run_experiment(arch, hp, target, budget, seed).val_bpb
    return [length_match_eval(arch, target, L, budget, seed, hp, full) for L in lengths]


LENGTH_COLUMNS = ("truncated_len", "full_bpb", "truncated_bpb", "rel_change_pct", "train_bytes_full",
                  "train_bytes_truncated")


def length_csv(results: Sequence[LengthMatchResult]) -> str:
    return _csv(LENGTH_COLUMNS, [[getattr(r, c) for c in LENGTH_COLUMNS] for r in results])


# ---------------------------------------------------------------------------
# innovations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Innovation:
    mutation: ConfigMutation
    origin_run: str
    origin_track: str
    degradations: Mapping[str, float | None] = field(default_factory=dict)
    classification: str = "unclassified"  # universal | specific | excluded
    note: str = ""


@dataclass(frozen=True)
class InnovationSummary:
    innovations: tuple[Innovation, ...]
    n_universal: int
    n_classified: int
    p0: float
    binomial_p: float | None


def collect_innovations(logs: Iterable[RunLog], condition: str = "agent") -> list[Innovation]:
    """Every kept, non-empty mutation from runs of ``condition``."""
    out = []
    for lg in logs:
        if lg.condition != condition:
            continue
        for r in lg.records:
            if r.kept and not r.mutation.is_noop:
                out.append(Innovation(r.mutation, lg.run_id, lg.track))
    return out


def rebase_mutation(m: ConfigMutation, arch: ArchConfig, hp: HPConfig) -> ConfigMutation:
    """The same new values, with old values read from (arch, hp)."""
    return ConfigMutation(tuple(FieldEdit(e.path, get_field(arch, hp, e.path), e.new) for e in m.edits),
                          m.rationale)


def classify_degradations(degradations: Mapping[str, float | None],
                          threshold_pct: float = UNIVERSAL_THRESHOLD_PCT) -> str:
    """``universal`` iff every track degrades by strictly less than the threshold."""
    if not degradations or any(d is None for d in degradations.values()):
        return "excluded"
    return "universal" if all(d < threshold_pct for d in degradations.values()) else "specific"


def classify_innovations(innovations: Sequence[Innovation], tracks: Mapping[str, TrackData],
                         budget: Budget, seed: int = 0,
                         bases: Mapping[str, tuple[ArchConfig, HPConfig]] | None = None,
                         include_origin: bool = False, threshold_pct: float = UNIVERSAL_THRESHOLD_PCT,
                         p0: float = UNIVERSAL_PRIOR, parallel: int = 1) -> InnovationSummary:
    """Apply each innovation to every track's baseline and classify by the degradation rule.

    Inapplicable innovations (invalid config on some track) and crashed
    evaluations are marked ``excluded`` and left out of the binomial count.
    """
    from .config import desk_arch

    def base_for(t: str) -> tuple[ArchConfig, HPConfig]:
        if bases and t in bases:
            return bases[t]
        return desk_arch(tracks[t].track), default_hp(tracks[t].track)

    constraint = SearchConstraint.for_condition("agent")
    names = list(tracks)
    base_recs = dict(zip(names, _pmap(_train_eval, [(*base_for(t), tracks[t], budget, seed) for t in names],
                                      parallel)))
    plan: list[tuple[int, str, ArchConfig, HPConfig]] = []
    notes: dict[int, list[str]] = {}
    degr: dict[int, dict[str, float | None]] = {i: {} for i in range(len(innovations))}
    for i, inn in enumerate(innovations):
        for t in names:
            if t == inn.origin_track and not include_origin and len(names) > 1:
                continue
            arch, hp = base_for(t)
            new_arch, new_hp = apply_mutation(arch, hp, rebase_mutation(inn.mutation, arch, hp), constraint)
            bad = validate_config(new_arch, new_hp, tracks[t].track)
            if bad:
                notes.setdefault(i, []).append(f"{t}: inapplicable ({bad[0]})")
                degr[i][t] = None
                continue
            plan.append((i, t, new_arch, new_hp))
    jobs = [(a, h, tracks[t], budget, seed) for _, t, a, h in plan]
    results = _pmap(_train_eval, jobs, parallel)
    for (i, t, _, _), rec in zip(plan, results):
        base = base_recs[t]
        degr[i][t] = rel_change_pct(rec.val_bpb, base.val_bpb) if rec.ok and base.ok else None
    out = []
    for i, inn in enumerate(innovations):
        d = dict(sorted(degr[i].items()))
        out.append(replace(inn, degradations=d, classification=classify_degradations(d, threshold_pct),
                           note="; ".join(notes.get(i, []))))
    classified = [x for x in out if x.classification != "excluded"]
    n_univ = sum(1 for x in classified if x.classification == "universal")
    p = binomial_tail(n_univ, len(classified), p0) if classified else None
    return InnovationSummary(tuple(out), n_univ, len(classified), p0, p)


def innovations_csv(summary: InnovationSummary) -> str:
    tracks = sorted({t for inn in summary.innovations for t in inn.degradations})
    rows = []
    for inn in summary.innovations:
        rows.append([inn.origin_run, inn.origin_track,
                     ";".join(f"{e.path}={json.dumps(e.new)}" for e in inn.mutation.edits),
                     *[inn.degradations.get(t) for t in tracks], inn.classification])
    rows.append(["summary", "", f"universal={summary.n_universal}/{summary.n_classified}",
                 *([""] * len(tracks)), f"binomial_p(p0={summary.p0})={summary.binomial_p!r}"])
    return _csv(("origin_run", "origin_track", "edits", *[f"degr_pct_{t}" for t in tracks],
                 "classification"), rows)


# ---------------------------------------------------------------------------
# technique matching
# ---------------------------------------------------------------------------

TechniqueRule = Callable[[Sequence[ConfigMutation]], bool]


def _edits(kept: Sequence[ConfigMutation], path: str) -> list[FieldEdit]:
    return [e for m in kept for e in m.edits if e.path == path]


def _local_attention(kept):
    return (any(e.new == "windowed" for e in _edits(kept, "arch.attention_pattern"))
            or any(e.new < e.old for e in _edits(kept, "arch.window_size")))


def _embedding_reduction(kept):
    return any(e.new < e.old for e in _edits(kept, "arch.width"))


def _positional_change(kept):
    return any(e.new != e.old for e in _edits(kept, "arch.positional"))


def _depth_width_rebalance(kept):
    depth = {int(np.sign(e.new - e.old)) for e in _edits(kept, "arch.depth")} - {0}
    width = {int(np.sign(e.new - e.old)) for e in _edits(kept, "arch.width")} - {0}
    return any(d * w < 0 for d in depth for w in width)


def _regularization(kept):
    return any(e.new > e.old for e in _edits(kept, "hp.weight_decay"))


TECHNIQUES: dict[str, TechniqueRule] = {
    "local_attention": _local_attention,
    "embedding_reduction": _embedding_reduction,
    "positional_change": _positional_change,
    "depth_width_rebalance": _depth_width_rebalance,
    "small_data_regularization": _regularization,
}


def register_technique(name: str, rule: TechniqueRule) -> None:
    if name in TECHNIQUES:
        raise ValueError(f"technique {name!r} already registered")
    TECHNIQUES[name] = rule


def classify_techniques(log_: RunLog, registry: Mapping[str, TechniqueRule] | None = None) -> dict[str, bool]:
    registry = TECHNIQUES if registry is None else registry
    kept = [r.mutation for r in log_.records if r.kept]
    return {name: bool(rule(kept)) for name, rule in registry.items()}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


CONDITION_ORDER = ("agent", "hp_only", "random_nas", "fixed_default")
CONDITION_COLORS = {"agent": "#1f77b4", "hp_only": "#2ca02c", "random_nas": "#ff7f0e",
                    "fixed_default": "#7f7f7f"}


@dataclass(frozen=True)
class Comparison:
    track: str
    a: str
    b: str
    family: str


@dataclass
class ReportBundle:
    out_dir: Path
    files: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    decompositions: list = field(default_factory=list)
    reports: list[StatReport] = field(default_factory=list)


def default_families(by_track: Mapping[str, Mapping[str, list[RunLog]]]) -> list[Comparison]:
    """Agent against each other present condition, one Holm family per track."""
    out = []
    for t in sorted(by_track):
        for b in ("random_nas", "hp_only"):
            if "agent" in by_track[t] and b in by_track[t]:
                out.append(Comparison(t, "agent", b, f"{t}_primary"))
    return out


def load_families(path: str | Path) -> list[Comparison]:
    """JSON: {"family": [{"track": ..., "a": ..., "b": ...}, ...], ...}."""
    raw = json.loads(Path(path).read_text())
    return [Comparison(c["track"], c["a"], c["b"], fam) for fam, comps in raw.items() for c in comps]


def _svg_curves(track: str, curves: Sequence[tuple[str, BestSoFarCurve]], width: int = 640,
                height: int = 400) -> str:
    pad = 50
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
             f'best-so-far val_bpb: {track}</text>']
    vals = [v for _, c in curves for v in c.values]
    if vals:
        lo, hi = min(vals), max(vals)
        span = hi - lo or 1.0
        n = max(len(c) for _, c in curves)
        xs = (width - 2 * pad) / max(1, n - 1)
        lines.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>')
        lines.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
        lines.append(f'<text x="{pad}" y="{height - pad + 16}" font-size="10">1</text>')
        lines.append(f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" '
                     f'text-anchor="end">{n}</text>')
        lines.append(f'<text x="{pad - 4}" y="{pad}" font-size="10" text-anchor="end">{hi:.4f}</text>')
        lines.append(f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{lo:.4f}</text>')
        for cond, c in curves:
            pts = " ".join(f"{pad + i * xs:.2f},{height - pad - (v - lo) / span * (height - 2 * pad):.2f}"
                           for i, v in enumerate(c.values))
            lines.append(f'<polyline fill="none" stroke="{CONDITION_COLORS.get(cond, "black")}" '
                         f'stroke-width="1.5" points="{pts}"><title>{cond} {c.run_id}</title></polyline>')
        for j, cond in enumerate(sorted({c for c, _ in curves}, key=_cond_key)):
            y = pad + 14 * j
            lines.append(f'<text x="{width - pad}" y="{y}" font-size="11" text-anchor="end" '
                         f'fill="{CONDITION_COLORS.get(cond, "black")}">{cond}</text>')
    else:
        lines.append(f'<text x="{width / 2:.1f}" y="{height / 2:.1f}" text-anchor="middle">no runs</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _cond_key(c: str) -> tuple[int, str]:
    return (CONDITION_ORDER.index(c) if c in CONDITION_ORDER else len(CONDITION_ORDER), c)


def generate_report(logs: Sequence[RunLog], out_dir: str | Path,
                    families: Sequence[Comparison] | None = None,
                    transfer: Sequence[TransferCell] | None = None,
                    n_resamples: int = 10_000, n_perm: int = 10_000, seed: int = 0) -> ReportBundle:
    """Write tables/*.csv, figures/*.svg and report.md; identical inputs give identical bytes."""
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(out)
    logs = sorted(logs, key=lambda l: (l.track, _cond_key(l.condition), l.run_id))
    by_track: dict[str, dict[str, list[RunLog]]] = {}
    for lg in logs:
        by_track.setdefault(lg.track, {}).setdefault(lg.condition, []).append(lg)

    def write(rel: str, text: str) -> None:
        (out / rel).write_text(text)
        bundle.files.append(rel)

    # per-run table
    run_rows = []
    curves: dict[str, list[tuple[str, BestSoFarCurve]]] = {}
    aucs: dict[tuple[str, str], list[float]] = {}
    bests: dict[tuple[str, str], list[float]] = {}
    for lg in logs:
        try:
            curve = best_so_far(lg)
        except ValueError as e:
            bundle.warnings.append(str(e))
            continue
        kr = keep_rate(lg)
        a = auc_oc(curve)
        b = run_best(lg)
        curves.setdefault(lg.track, []).append((lg.condition, curve))
        aucs.setdefault((lg.track, lg.condition), []).append(a)
        bests.setdefault((lg.track, lg.condition), []).append(b)
        run_rows.append([lg.track, lg.condition, lg.run_id, len(lg.records), a, b,
                         None if kr.degenerate else kr.rate, kr.kept, kr.eligible, crash_count(lg)])
    write("tables/runs.csv", _csv(("track", "condition", "run_id", "n_records", "auc_oc", "best_val_bpb",
                                   "keep_rate", "kept", "eligible", "crashes"), run_rows))

    # decomposition
    decs = []
    for t in sorted(by_track):
        have = {c: bests.get((t, c), []) for c in ("fixed_default", "hp_only", "agent")}
        missing = [c for c, v in have.items() if not v]
        if missing:
            bundle.warnings.append(f"{t}: decomposition skipped, missing {', '.join(missing)}")
            continue
        fixed = have["fixed_default"]
        if len(fixed) > 1:
            bundle.warnings.append(f"{t}: {len(fixed)} fixed_default runs, using their mean")
        decs.append(decompose(float(np.mean(fixed)), have["hp_only"], have["agent"], track=t))
    bundle.decompositions = decs
    write("tables/decomposition.csv", decomposition_csv(decs))

    # AUC comparisons
    comps = list(families) if families is not None else default_families(by_track)
    reports: list[StatReport] = []
    comp_rows = []
    for comp in comps:
        xa, xb = aucs.get((comp.track, comp.a), []), aucs.get((comp.track, comp.b), [])
        label = f"{comp.track}:{comp.a}_vs_{comp.b}"
        if not xa or not xb:
            bundle.warnings.append(f"{label}: missing runs, comparison skipped")
            comp_rows.append([comp.family, comp.track, comp.a, comp.b, len(xa), len(xb)] + [None] * 6 +
                             ["insufficient-n"])
            continue
        mw = replace(mann_whitney_u(xa, xb), family=comp.family, label=label)
        reports.append(mw)
        boot = bootstrap_ci(xa, xb, n_resamples, seed)
        d = None
        status = "ok"
        if len(xa) >= 2 and len(xb) >= 2:
            try:
                d = cohens_d(xa, xb)
            except ValueError:
                status = "zero-variance"
            reports.append(replace(welch_t(xa, xb), family=f"{comp.family}:secondary", label=label))
        else:
            status = "insufficient-n"
        comp_rows.append([comp.family, comp.track, comp.a, comp.b, len(xa), len(xb),
                          float(np.mean(xa) - np.mean(xb)), boot.ci_low, boot.ci_high, mw.raw_p, None, d, status])

    # keep-rate comparisons (agent vs random NAS, pooled counts)
    for t in sorted(by_track):
        if "agent" in by_track[t] and "random_nas" in by_track[t]:
            k = [keep_rate(l) for l in by_track[t]["agent"]]
            r = [keep_rate(l) for l in by_track[t]["random_nas"]]
            ka, ea = sum(x.kept for x in k), sum(x.eligible for x in k)
            kr_, er = sum(x.kept for x in r), sum(x.eligible for x in r)
            if ea + er > 0:
                reports.append(replace(fisher_exact([[ka, ea - ka], [kr_, er - kr_]]),
                                       family=f"{t}_keep_rate", label=f"{t}:agent_vs_random_nas"))

    # clustering of the agents' best architectures
    agent_logs = [l for l in logs if l.condition == "agent"]
    feats = []
    for l in agent_logs:
        try:
            feats.append(extract_features(l))
        except ValueError as e:
            bundle.warnings.append(str(e))
    labels = [f.label for f in feats]
    counts = {x: labels.count(x) for x in set(labels)}
    if len(counts) >= 2 and min(counts.values()) >= 2:
        try:
            dist = gower_matrix(feats)
            reports.append(replace(permutation_cluster_test(dist, labels, n_perm, seed),
                                   family="clustering", label="agent_best_architectures"))
            write("tables/gower_matrix.csv",
                  _csv(("run_id", "track", *[l.run_id for l in agent_logs]),
                       [[l.run_id, l.track, *row] for l, row in zip(agent_logs, dist.tolist())]))
        except ValueError as e:
            bundle.warnings.append(f"clustering skipped: {e}")
    else:
        bundle.warnings.append("clustering skipped: need two tracks with at least two agent runs each")

    reports = adjust_families(reports)
    bundle.reports = reports
    adj = {(r.family, r.label): r.adjusted_p for r in reports if r.test == "mann_whitney_u"}
    for row in comp_rows:
        if row[9] is not None:
            row[10] = adj.get((row[0], f"{row[1]}:{row[2]}_vs_{row[3]}"))
    write("tables/auc_comparison.csv",
          _csv(("family", "track", "a", "b", "n_a", "n_b", "auc_diff", "ci_low", "ci_high", "p_raw",
                "p_adj", "cohens_d", "status"), comp_rows))
    write("tables/stats.csv", stats_csv(reports))

    if transfer is not None:
        write("tables/transfer.csv", transfer_csv(transfer))

    techs = [[l.track, l.run_id, *classify_techniques(l).values()] for l in agent_logs]
    write("tables/techniques.csv", _csv(("track", "run_id", *TECHNIQUES), techs))

    for t in sorted(curves):
        write(f"figures/best_so_far_{t}.svg", _svg_curves(t, curves[t]))

    write("report.md", _report_md(logs, run_rows, decs, comp_rows, reports, transfer, bundle.warnings))
    return bundle


def _md_table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return out


def _f(v, spec: str) -> str:
    return "n/a" if v is None else format(v, spec)


def _report_md(logs, run_rows, decs, comp_rows, reports, transfer, warnings) -> str:
    lines = ["# Search report", ""]
    if not logs:
        lines += ["No run logs were supplied.", ""]
    lines += ["## Decomposition", ""]
    if decs:
        lines += _md_table(("track", "total improvement (bpb)", "HP %", "arch %"),
                           [(d.track, f"{d.total_improvement:.4f}", _f(d.hp_pct, ".0f"),
                             _f(d.arch_pct, ".0f")) for d in decs])
    else:
        lines.append("Not available (needs fixed_default, hp_only and agent runs for a track).")
    lines += ["", "## AUC-OC comparisons", ""]
    if comp_rows:
        lines += _md_table(("track", "comparison", "AUC diff", "95% CI", "p_adj", "Cohen's d", "status"),
                           [(r[1], f"{r[2]} vs {r[3]}", _f(r[6], "+.2f"),
                             "n/a" if r[7] is None else f"[{r[7]:+.2f}, {r[8]:+.2f}]",
                             _f(r[10], ".3f"), _f(r[11], "+.2f"), r[12]) for r in comp_rows])
    else:
        lines.append("No comparisons (insufficient-n).")
    lines += ["", "## Runs", ""]
    if run_rows:
        lines += _md_table(("track", "condition", "run", "AUC-OC", "best bpb", "keep rate"),
                           [(r[0], r[1], r[2], f"{r[4]:.2f}", f"{r[5]:.4f}", _f(r[6], ".2f"))
                            for r in run_rows])
    else:
        lines.append("No runs.")
    other = [r for r in reports if r.test != "mann_whitney_u"]
    if other:
        lines += ["", "## Other tests", ""]
        lines += _md_table(("family", "test", "label", "statistic", "p", "p_adj"),
                           [(r.family, r.test, r.label, f"{r.statistic:.4g}", f"{r.raw_p:.4g}",
                             _f(r.adjusted_p, ".4g")) for r in other])
    if transfer:
        lines += ["", "## Transfer (% change vs native; negative = better)", ""]
        names = sorted({c.source_track for c in transfer} | {c.target_track for c in transfer})
        cell = {(c.source_track, c.target_track): c for c in transfer}
        lines += _md_table(("source \\ target", *names),
                           [(s, *[("crashed" if cell[(s, t)].crashed else _f(cell[(s, t)].rel_change_pct, "+.1f"))
                                  if (s, t) in cell else "" for t in names]) for s in names])
    if warnings:
        lines += ["", "## Warnings", ""] + [f"- {w}" for w in warnings]
    return "\n".join(lines) + "\n"
