"""Command-line entry point: ``searchlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .analysis import (classify_innovations, collect_innovations, best_config, freeze_csv,
                       generate_report, innovations_csv, layer_freeze_curve, length_csv, length_sweep,
                       load_families, transfer_csv, transfer_matrix)
from .config import (CONDITIONS, DESK_NAS_SPACE, DESK_TRACKS, NasSpace, baseline_arch, config_to_dict,
                     default_hp, desk_arch, load_config_file, load_track_file, sample_random_nas)
from .data import generate_synthetic_corpus, load_track
from .metrics import keep_rate
from .search import (ProposerError, llm_proposer, load_runlog, load_script, random_nas_proposer,
                     run_search, scripted_proposer)
from .trainer import Budget, train_model

log = logging.getLogger("searchlab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        self.code = code
        super().__init__(message)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _budget(args) -> Budget:
    if args.seconds is not None:
        return Budget(seconds=args.seconds)
    return Budget(steps=args.steps)


def _track(spec: str, args):
    """A desk track name or a track file path."""
    if spec in DESK_TRACKS:
        track = DESK_TRACKS[spec]
    elif Path(spec).is_file():
        track = load_track_file(spec)
    else:
        raise CliError(f"unknown track {spec!r} (use {', '.join(DESK_TRACKS)} or a track file)")
    return load_track(track, seed=args.data_seed, n_synthetic=args.n_synthetic)


def _base(track, scale: str, config: str | None):
    arch = desk_arch(track.track) if scale == "desk" else baseline_arch(track.track)
    hp = default_hp(track.track)
    if config:
        arch, hp = load_config_file(config, arch, hp)
    return arch, hp


def _manifest(args, extra: dict | None = None) -> dict:
    settings = {k: v for k, v in vars(args).items() if k != "func"}
    return {
        "searchlab_version": __version__,
        "command": args.command,
        "settings": settings,
        "kernels": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **(extra or {}),
    }


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_manifest(target: Path, args, extra: dict | None = None) -> Path:
    dest = target / "manifest.json" if target.suffix == "" else target.with_name(target.name + ".manifest.json")
    _write(dest, json.dumps(_manifest(args, extra), indent=2, sort_keys=True, default=str) + "\n")
    return dest


def _expand(patterns: list[str]) -> list[str]:
    paths: list[str] = []
    for pat in patterns:
        hits = sorted(glob.glob(pat))
        if not hits:
            raise CliError(f"no files match {pat!r}", EXIT_IO)
        paths += hits
    return sorted(dict.fromkeys(paths))


def _add_budget(p: argparse.ArgumentParser, steps: int) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--steps", type=int, default=steps, help=f"optimizer steps per training job (default {steps})")
    g.add_argument("--seconds", type=float, default=None, help="wall-clock budget per job instead of steps")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-synthetic", type=int, default=2000, help="lines in a generated corpus")
    p.add_argument("--data-seed", type=int, default=0, help="seed for corpus generation and split")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _proposer(args, condition: str):
    spec = args.proposer or ("random" if condition == "random_nas" else None)
    if condition == "fixed_default":
        return None
    if spec is None:
        raise CliError(f"condition {condition} needs --proposer (scripted:FILE or llm:MODEL)")
    if spec == "random":
        return random_nas_proposer(args.seed, NasSpace() if args.scale == "paper" else DESK_NAS_SPACE)
    if spec.startswith("scripted:"):
        return scripted_proposer(load_script(spec.split(":", 1)[1]))
    if spec.startswith("llm:"):
        model = spec.split(":", 1)[1]
        template = args.prompt or ("hp_only" if condition == "hp_only" else "agent")
        return llm_proposer(None, model, template)
    raise CliError(f"unknown proposer {spec!r}")


def cmd_run(args) -> int:
    track = _track(args.track, args)
    arch, hp = _base(track, args.scale, args.config)
    proposer = _proposer(args, args.condition)
    out = Path(args.out) if args.out else Path(f"runs/{args.condition}_{track.track.name}_s{args.seed}.jsonl")
    budget = _budget(args)
    _write_manifest(out, args, {"budget": budget.to_dict(), "track": config_to_dict(track.track),
                                "base_arch": config_to_dict(arch), "base_hp": config_to_dict(hp)})
    runlog = run_search(args.condition, proposer, track, n=args.n, budget=budget, seed=args.seed,
                        base_arch=arch, base_hp=hp, out=out, run_id=args.run_id,
                        eval_batches=args.eval_batches)
    kr = keep_rate(runlog)
    best = runlog.best_val_bpb()
    print(f"log: {out}")
    print(f"baseline val_bpb: {runlog.baseline_val_bpb}")
    print(f"best val_bpb: {best}")
    print(f"keep rate: {'n/a' if kr.degenerate else f'{kr.rate:.3f}'} ({kr.kept}/{kr.eligible})")
    return EXIT_OK


def cmd_analyze(args) -> int:
    paths = _expand(args.logs)
    logs = [load_runlog(p) for p in paths]
    families = load_families(args.families) if args.families else None
    transfer = None
    if args.transfer:
        from .analysis import TransferCell
        import csv
        with open(args.transfer) as f:
            transfer = [TransferCell(r["source_track"], r["target_track"],
                                     float(r["native_bpb"]) if r["native_bpb"] else None,
                                     float(r["transfer_bpb"]) if r["transfer_bpb"] else None,
                                     float(r["rel_change_pct"]) if r["rel_change_pct"] else None,
                                     r["crashed"] == "True") for r in csv.DictReader(f)]
    out = Path(args.out)
    bundle = generate_report(logs, out, families, transfer, args.resamples, args.perms, args.seed)
    _write_manifest(out, args, {"logs": paths})
    for w in bundle.warnings:
        log.warning(w)
    for d in bundle.decompositions:
        hp = "n/a" if d.hp_pct is None else f"{d.hp_pct:.0f}%"
        arch = "n/a" if d.arch_pct is None else f"{d.arch_pct:.0f}%"
        print(f"{d.track}: total {d.total_improvement:.4f} bpb, HP {hp}, arch {arch}")
    print(f"report: {out / 'report.md'}")
    return EXIT_OK


def _best_configs(args, tracks) -> dict:
    configs = {}
    for item in args.config or []:
        name, _, path = item.partition("=")
        if name not in tracks or not path:
            raise CliError(f"--config expects TRACK=FILE with TRACK in {list(tracks)}, got {item!r}")
        configs[name] = _base(tracks[name], args.scale, path)[0]
    if args.logs:
        best: dict[str, tuple[float, object]] = {}
        for p in _expand(args.logs):
            lg = load_runlog(p)
            if lg.condition != "agent" or lg.track not in tracks:
                continue
            val = lg.best_val_bpb()
            if val is not None and (lg.track not in best or val < best[lg.track][0]):
                best[lg.track] = (val, best_config(lg)[0])
        for name, (_, arch) in best.items():
            configs.setdefault(name, arch)
    for name in tracks:
        configs.setdefault(name, _base(tracks[name], args.scale, None)[0])
    return configs


def _tracks(args) -> dict:
    names = [t for t in args.tracks.split(",") if t]
    if len(names) < 2:
        raise CliError("--tracks needs at least two comma-separated tracks")
    loaded = {}
    for n in names:
        td = _track(n, args)
        loaded[td.track.name] = td
    return loaded


def cmd_transfer(args) -> int:
    tracks = _tracks(args)
    configs = _best_configs(args, tracks)
    cells = transfer_matrix(configs, tracks, _budget(args), args.seed, parallel=args.parallel)
    out = Path(args.out)
    _write(out, transfer_csv(cells))
    _write_manifest(out, args, {"configs": {k: config_to_dict(v) for k, v in configs.items()}})
    for c in cells:
        rel = "crashed" if c.crashed else f"{c.rel_change_pct:+.2f}%"
        print(f"{c.source_track} -> {c.target_track}: {rel}")
    return EXIT_OK


def cmd_freeze(args) -> int:
    source = _track(args.source, args)
    target = _track(args.target, args)
    arch, hp = _base(source, args.scale, args.config)
    trained = train_model(arch, hp, source.corpus, Budget(steps=args.source_steps), args.seed)
    levels = [int(x) for x in args.levels.split(",")] if args.levels else None
    curve = layer_freeze_curve(trained.params, arch, target, levels, _budget(args), args.seed,
                               parallel=args.parallel)
    out = Path(args.out)
    _write(out, freeze_csv(curve))
    _write_manifest(out, args, {"arch": config_to_dict(arch)})
    for lv in curve:
        deg = "n/a" if lv.degradation_pct is None else f"{lv.degradation_pct:+.2f}%"
        print(f"freeze {lv.k}: val_bpb={lv.val_bpb} degradation={deg} intact={lv.frozen_intact}")
    return EXIT_OK


def cmd_lengthmatch(args) -> int:
    target = _track(args.target, args)
    arch, hp = _base(target, args.scale, args.config)
    seq = target.corpus.seq_len
    lengths = [int(x) for x in args.lengths.split(",")] if args.lengths else [seq // 4, seq // 2, seq]
    results = length_sweep(arch, target, lengths, _budget(args), args.seed, hp)
    out = Path(args.out)
    _write(out, length_csv(results))
    _write_manifest(out, args, {"arch": config_to_dict(arch)})
    for r in results:
        rel = "n/a" if r.rel_change_pct is None else f"{r.rel_change_pct:+.2f}%"
        print(f"len {r.truncated_len}: val_bpb={r.truncated_bpb} change={rel}")
    return EXIT_OK


def cmd_innovations(args) -> int:
    tracks = _tracks(args)
    logs = [load_runlog(p) for p in _expand(args.logs)]
    innovations = collect_innovations(logs)
    bases = {n: _base(t, args.scale, None) for n, t in tracks.items()}
    summary = classify_innovations(innovations, tracks, _budget(args), args.seed, bases=bases,
                                   include_origin=args.include_origin, parallel=args.parallel)
    out = Path(args.out)
    _write(out, innovations_csv(summary))
    _write_manifest(out, args)
    print(f"universal: {summary.n_universal}/{summary.n_classified}; "
          f"binomial p (p0={summary.p0}) = {summary.binomial_p}")
    return EXIT_OK


def cmd_sample_nas(args) -> int:
    space = NasSpace() if args.scale == "paper" else DESK_NAS_SPACE
    rng = np.random.SeedSequence(args.seed)
    for seed in rng.generate_state(args.n):
        print(json.dumps(config_to_dict(sample_random_nas(int(seed), space=space)), sort_keys=True))
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    text = generate_synthetic_corpus(args.kind, args.n, args.seed)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        _write(Path(args.out), text)
        _write_manifest(Path(args.out), args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="searchlab", description=__doc__)
    p.add_argument("--version", action="version", version=f"searchlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log every experiment")
    sub = p.add_subparsers(dest="command", required=True)

    def scale(sp):
        sp.add_argument("--scale", choices=("desk", "paper"), default="desk",
                        help="base architecture size (default desk)")

    r = sub.add_parser("run", help="run one search condition")
    r.add_argument("condition", choices=CONDITIONS)
    r.add_argument("--track", default="smiles_like", help="desk track name or track file")
    r.add_argument("--config", help="key = value file overriding the base arch/hp")
    r.add_argument("--proposer", help="random | scripted:FILE | llm:MODEL")
    r.add_argument("--prompt", help="prompt template name (agent, hp_only) or file for llm proposers")
    r.add_argument("--n", type=int, default=100, help="experiments per run (default 100)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--eval-batches", type=int, default=5)
    r.add_argument("--run-id")
    r.add_argument("--out", help="JSONL log path")
    scale(r)
    _add_budget(r, 200)
    _add_data(r)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="build the report bundle from run logs")
    a.add_argument("logs", nargs="+", help="log files or glob patterns")
    a.add_argument("--families", help="JSON file of Holm families")
    a.add_argument("--transfer", help="transfer CSV to include")
    a.add_argument("--out", default="report")
    a.add_argument("--resamples", type=int, default=10_000)
    a.add_argument("--perms", type=int, default=10_000)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_analyze)

    for name, func, helptext in (("transfer", cmd_transfer, "cross-track architecture transfer matrix"),
                                 ("innovations", cmd_innovations, "classify kept mutations as universal or specific")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--tracks", default="smiles_like,protein_like", help="comma-separated tracks")
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--parallel", type=int, default=1, help="worker processes")
        t.add_argument("--out", default=f"{name}.csv")
        scale(t)
        _add_budget(t, 100)
        _add_data(t)
        if name == "transfer":
            t.add_argument("--config", action="append", help="TRACK=FILE best architecture for a track")
            t.add_argument("--logs", nargs="*", help="agent logs to take best architectures from")
        else:
            t.add_argument("--logs", nargs="+", required=True, help="agent run logs")
            t.add_argument("--include-origin", action="store_true",
                           help="also evaluate each innovation on its own track")
        t.set_defaults(func=func)

    f = sub.add_parser("freeze", help="layer-freezing degradation curve")
    f.add_argument("--source", default="nlp_like")
    f.add_argument("--target", default="smiles_like")
    f.add_argument("--config", help="source architecture file")
    f.add_argument("--source-steps", type=int, default=200)
    f.add_argument("--levels", help="comma-separated freeze levels (default 0..depth)")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--parallel", type=int, default=1)
    f.add_argument("--out", default="freeze.csv")
    scale(f)
    _add_budget(f, 100)
    _add_data(f)
    f.set_defaults(func=cmd_freeze)

    lm = sub.add_parser("lengthmatch", help="effect of truncating target sequences")
    lm.add_argument("--target", default="nlp_like")
    lm.add_argument("--config", help="architecture file")
    lm.add_argument("--lengths", help="comma-separated lengths (default seq_len/4, /2, full)")
    lm.add_argument("--seed", type=int, default=0)
    lm.add_argument("--out", default="lengthmatch.csv")
    scale(lm)
    _add_budget(lm, 100)
    _add_data(lm)
    lm.set_defaults(func=cmd_lengthmatch)

    s = sub.add_parser("sample-nas", help="print random NAS architectures as JSON lines")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    scale(s)
    s.set_defaults(func=cmd_sample_nas)

    g = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    g.add_argument("kind", choices=("smiles_like", "protein_like", "nlp_like"))
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="-")
    g.set_defaults(func=cmd_gen_corpus)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"searchlab: {e}", file=sys.stderr)
        return e.code
    except ProposerError as e:
        print(f"searchlab: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as e:
        print(f"searchlab: io error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"searchlab: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
