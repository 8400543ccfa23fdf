"""Architecture / hyperparameter state, mutations over it, and search constraints.

Everything here is an immutable value. Mutations are typed field edits
addressed by ``"arch.<field>"`` or ``"hp.<field>"`` paths.
"""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping

ACTIVATIONS = ("relu", "gelu", "silu", "relu_squared", "swiglu", "geglu")
GATED_ACTIVATIONS = ("swiglu", "geglu")
ATTENTION_PATTERNS = ("full", "windowed")
WINDOW_TAGS = ("short", "long")
POSITIONALS = ("rope", "none")
NORMS = ("rmsnorm",)
VALUE_EMBEDDINGS = ("off", "alternating", "every_layer")
RESIDUAL_SCALINGS = ("fixed", "learned_per_layer")
TRACK_NAMES = ("smiles_like", "protein_like", "nlp_like", "custom")
TOKENIZERS = ("char", "bpe")
CONDITIONS = ("agent", "random_nas", "hp_only", "fixed_default")

Condition = Literal["agent", "random_nas", "hp_only", "fixed_default"]


@dataclass(frozen=True)
class ArchConfig:
    depth: int = 6
    width: int = 320
    heads: int = 5
    kv_heads: int = 5
    ffn_mult: float = 5.0
    activation: str = "relu_squared"
    attention_pattern: str = "windowed"
    window_cycle: tuple[str, ...] = ("short", "short", "short", "long")
    window_size: int = 64
    positional: str = "rope"
    norm: str = "rmsnorm"
    value_embeddings: str = "alternating"
    residual_scaling: str = "fixed"
    weight_tying: bool = False

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def ffn_hidden(self) -> int:
        return max(1, int(round(self.ffn_mult * self.width)))

    @property
    def gated(self) -> bool:
        return self.activation in GATED_ACTIVATIONS

    def layer_window(self, layer: int) -> int | None:
        """Window size for ``layer``, or None for full causal attention."""
        if self.attention_pattern == "full":
            return None
        tag = self.window_cycle[layer % len(self.window_cycle)]
        return self.window_size if tag == "short" else None

    def has_value_embedding(self, layer: int) -> bool:
        # Alternating layers use even indices (0, 2, 4, ...).
        if self.value_embeddings == "every_layer":
            return True
        if self.value_embeddings == "alternating":
            return layer % 2 == 0
        return False


@dataclass(frozen=True)
class HPConfig:
    lr_embedding: float = 0.6
    lr_unembedding: float = 0.004
    lr_matrix: float = 0.04
    lr_scalar: float = 0.5
    weight_decay: float = 0.2
    adam_beta1: float = 0.8
    adam_beta2: float = 0.95
    warmdown_ratio: float = 0.5
    total_batch_tokens: int = 65536
    device_batch_seqs: int = 256
    grad_accum_steps: int = 1


@dataclass(frozen=True)
class TrackConfig:
    name: str = "custom"
    vocab_size: int = 256
    seq_len: int = 64
    tokenizer: str = "char"
    corpus_path: str = ""
    split_fraction: float = 0.9


# Full-size tracks. Batch splits give 65,536 tokens per optimizer step.
PAPER_TRACKS = {
    "smiles_like": (TrackConfig("smiles_like", 37, 256, "char"), 256),
    "protein_like": (TrackConfig("protein_like", 24, 512, "char"), 128),
    "nlp_like": (TrackConfig("nlp_like", 8192, 2048, "bpe"), 32),
}

# Desk-scale defaults used by the CLI and tests.
DESK_TRACKS = {
    "smiles_like": TrackConfig("smiles_like", 37, 64, "char"),
    "protein_like": TrackConfig("protein_like", 25, 64, "char"),
    "nlp_like": TrackConfig("nlp_like", 512, 64, "bpe"),
}


def baseline_arch(track: TrackConfig | None = None) -> ArchConfig:
    """The shared starting architecture, with the short window at seq_len / 4."""
    if track is None:
        return ArchConfig()
    return ArchConfig(window_size=max(1, track.seq_len // 4))


def desk_arch(track: TrackConfig | None = None) -> ArchConfig:
    """A laptop-sized version of the baseline (same topology, smaller dims)."""
    seq_len = track.seq_len if track is not None else 64
    return ArchConfig(depth=2, width=32, heads=2, kv_heads=2, ffn_mult=4.0,
                      window_size=max(1, seq_len // 4))


def default_hp(track: TrackConfig, device_batch_seqs: int | None = None,
               grad_accum_steps: int = 1) -> HPConfig:
    """Default hyperparameters with a batch split consistent with ``track.seq_len``.

    Full-size tracks get their 65,536-token batch; anything else defaults to
    8 sequences per device step.
    """
    if device_batch_seqs is None:
        paper = PAPER_TRACKS.get(track.name)
        if paper is not None and paper[0].seq_len == track.seq_len:
            device_batch_seqs = paper[1]
            grad_accum_steps = 65536 // (paper[1] * track.seq_len)
        else:
            device_batch_seqs = 8
    return HPConfig(total_batch_tokens=device_batch_seqs * track.seq_len * grad_accum_steps,
                    device_batch_seqs=device_batch_seqs, grad_accum_steps=grad_accum_steps)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


def validate_config(arch: ArchConfig, hp: HPConfig, track: TrackConfig) -> list[Violation]:
    """Return every violated invariant; an empty list means the config is usable."""
    out: list[Violation] = []

    def bad(path: str, msg: str) -> None:
        out.append(Violation(path, msg))

    if arch.depth < 0:
        bad("arch.depth", "depth must be >= 0")
    for name in ("width", "heads", "kv_heads", "window_size"):
        if getattr(arch, name) < 1:
            bad(f"arch.{name}", f"{name} must be >= 1")
    if arch.ffn_mult <= 0:
        bad("arch.ffn_mult", "ffn_mult must be > 0")
    if arch.heads >= 1 and arch.width % arch.heads != 0:
        bad("arch.heads", "width mod heads != 0")
    if arch.kv_heads >= 1 and arch.heads % arch.kv_heads != 0:
        bad("arch.kv_heads", "heads mod kv_heads != 0")
    if arch.positional == "rope" and arch.heads >= 1 and arch.width % arch.heads == 0 \
            and arch.head_dim % 2 != 0:
        bad("arch.heads", "head_dim must be even for rope")
    for name, allowed in (("activation", ACTIVATIONS), ("attention_pattern", ATTENTION_PATTERNS),
                          ("positional", POSITIONALS), ("norm", NORMS),
                          ("value_embeddings", VALUE_EMBEDDINGS),
                          ("residual_scaling", RESIDUAL_SCALINGS)):
        if getattr(arch, name) not in allowed:
            bad(f"arch.{name}", f"{getattr(arch, name)!r} not in {allowed}")
    if any(tag not in WINDOW_TAGS for tag in arch.window_cycle):
        bad("arch.window_cycle", f"tags must be in {WINDOW_TAGS}")
    if arch.attention_pattern == "windowed" and not arch.window_cycle:
        bad("arch.window_cycle", "window_cycle empty with windowed attention")

    for name in ("lr_embedding", "lr_unembedding", "lr_matrix", "lr_scalar"):
        if not getattr(hp, name) > 0:
            bad(f"hp.{name}", "learning rate must be > 0")
    if hp.weight_decay < 0:
        bad("hp.weight_decay", "weight_decay must be >= 0")
    for name in ("adam_beta1", "adam_beta2"):
        if not 0 < getattr(hp, name) < 1:
            bad(f"hp.{name}", "beta must be in (0, 1)")
    if not 0 <= hp.warmdown_ratio <= 1:
        bad("hp.warmdown_ratio", "warmdown_ratio must be in [0, 1]")
    for name in ("total_batch_tokens", "device_batch_seqs", "grad_accum_steps"):
        if getattr(hp, name) < 1:
            bad(f"hp.{name}", f"{name} must be >= 1")
    if hp.device_batch_seqs * track.seq_len * hp.grad_accum_steps != hp.total_batch_tokens:
        bad("hp.total_batch_tokens",
            "device_batch_seqs * seq_len * grad_accum_steps != total_batch_tokens")

    if track.seq_len < 2:
        bad("track.seq_len", "seq_len must be >= 2")
    if track.vocab_size < 2:
        bad("track.vocab_size", "vocab_size must be >= 2")
    if track.tokenizer not in TOKENIZERS:
        bad("track.tokenizer", f"{track.tokenizer!r} not in {TOKENIZERS}")
    if not 0 < track.split_fraction < 1:
        bad("track.split_fraction", "split_fraction must be in (0, 1)")
    return out


# ---------------------------------------------------------------------------
# mutations
# ---------------------------------------------------------------------------

ARCH_FIELDS = tuple(f.name for f in fields(ArchConfig))
HP_FIELDS = tuple(f.name for f in fields(HPConfig))
ARCH_PATHS = frozenset(f"arch.{n}" for n in ARCH_FIELDS)
HP_PATHS = frozenset(f"hp.{n}" for n in HP_FIELDS)
ALL_PATHS = ARCH_PATHS | HP_PATHS


@dataclass(frozen=True)
class FieldEdit:
    path: str
    old: Any
    new: Any


@dataclass(frozen=True)
class ConfigMutation:
    edits: tuple[FieldEdit, ...] = ()
    rationale: str = ""
    malformed: bool = False  # set when a proposer could not produce a parseable edit

    def __post_init__(self):
        paths = [e.path for e in self.edits]
        if len(set(paths)) != len(paths):
            raise ValueError(f"duplicate field paths in mutation: {paths}")
        unknown = [p for p in paths if p not in ALL_PATHS]
        if unknown:
            raise ValueError(f"unknown field paths: {unknown}")

    @property
    def is_noop(self) -> bool:
        return not self.edits

    @property
    def paths(self) -> tuple[str, ...]:
        return tuple(e.path for e in self.edits)

    def to_dict(self) -> dict:
        d = {"edits": [[e.path, to_jsonable(e.old), to_jsonable(e.new)] for e in self.edits],
             "rationale": self.rationale}
        if self.malformed:
            d["malformed"] = True
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConfigMutation":
        edits = []
        for item in d.get("edits", []):
            if isinstance(item, Mapping):
                path, old, new = item["path"], item.get("old"), item["new"]
            else:
                path, old, new = item
            edits.append(FieldEdit(path, coerce_field(path, old) if old is not None else None,
                                   coerce_field(path, new)))
        return cls(tuple(edits), str(d.get("rationale", "")), bool(d.get("malformed", False)))


@dataclass(frozen=True)
class SearchConstraint:
    condition: str
    mutable_fields: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.condition == "hp_only" and self.mutable_fields & ARCH_PATHS:
            raise ValueError("hp_only constraint may not expose architecture fields")
        if self.condition == "fixed_default" and self.mutable_fields:
            raise ValueError("fixed_default constraint must have no mutable fields")

    @classmethod
    def for_condition(cls, condition: str) -> "SearchConstraint":
        if condition in ("agent", "random_nas"):
            return cls(condition, ALL_PATHS)
        if condition == "hp_only":
            return cls(condition, HP_PATHS)
        return cls(condition, frozenset())


class MutationRejected(Exception):
    """A proposed mutation could not be applied.

    ``kind`` is ``"constraint_violation"`` or ``"stale_old_value"``.
    """

    def __init__(self, kind: str, path: str, detail: str = ""):
        self.kind = kind
        self.path = path
        super().__init__(f"{kind} at {path}" + (f": {detail}" if detail else ""))


def get_field(arch: ArchConfig, hp: HPConfig, path: str) -> Any:
    scope, name = path.split(".", 1)
    return getattr(arch if scope == "arch" else hp, name)


def apply_mutation(arch: ArchConfig, hp: HPConfig, m: ConfigMutation,
                   c: SearchConstraint) -> tuple[ArchConfig, HPConfig]:
    """Apply ``m`` under constraint ``c``; raises MutationRejected on failure."""
    for e in m.edits:
        if e.path not in c.mutable_fields:
            raise MutationRejected("constraint_violation", e.path,
                                   f"not mutable under {c.condition}")
    for e in m.edits:
        current = get_field(arch, hp, e.path)
        if not _same(current, e.old):
            raise MutationRejected("stale_old_value", e.path,
                                   f"expected {e.old!r}, config has {current!r}")
    arch_kw = {e.path[5:]: e.new for e in m.edits if e.path.startswith("arch.")}
    hp_kw = {e.path[3:]: e.new for e in m.edits if e.path.startswith("hp.")}
    return (replace(arch, **arch_kw) if arch_kw else arch,
            replace(hp, **hp_kw) if hp_kw else hp)


def diff_configs(a: tuple[ArchConfig, HPConfig], b: tuple[ArchConfig, HPConfig],
                 rationale: str = "") -> ConfigMutation:
    """Minimal field-level mutation taking ``a`` to ``b``."""
    edits = []
    for scope, names, x, y in (("arch", ARCH_FIELDS, a[0], b[0]), ("hp", HP_FIELDS, a[1], b[1])):
        for name in names:
            old, new = getattr(x, name), getattr(y, name)
            if not _same(old, new):
                edits.append(FieldEdit(f"{scope}.{name}", old, new))
    return ConfigMutation(tuple(edits), rationale)


def _same(x: Any, y: Any) -> bool:
    # Exact comparison; bool/int distinction matters for weight_tying.
    return type(x) is type(y) and x == y or (
        isinstance(x, (int, float)) and isinstance(y, (int, float))
        and not isinstance(x, bool) and not isinstance(y, bool) and x == y)


# ---------------------------------------------------------------------------
# random NAS
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NasSpace:
    """Discrete grid sampled by random NAS. Defaults are the full-size grid."""

    depths: tuple[int, ...] = tuple(range(3, 9))
    widths: tuple[int, ...] = tuple(range(128, 513, 32))
    heads: tuple[int, ...] = tuple(range(2, 9))
    activations: tuple[str, ...] = ("relu", "gelu", "silu", "relu_squared")
    attention_patterns: tuple[str, ...] = ("full", "windowed")


DESK_NAS_SPACE = NasSpace(depths=(1, 2, 3, 4), widths=(32, 48, 64), heads=(2, 4, 8))


def sample_random_nas(seed: int, base: ArchConfig | None = None,
                      space: NasSpace = NasSpace()) -> ArchConfig:
    """Uniform draw from ``space``; heads are redrawn until they divide width.

    Fields outside the grid keep their value from ``base``; kv_heads = heads.
    """
    base = base if base is not None else ArchConfig()
    rng = random.Random(seed)
    depth = rng.choice(space.depths)
    width = rng.choice(space.widths)
    if not any(width % h == 0 and (width // h) % 2 == 0 for h in space.heads):
        raise ValueError(f"no head count in {space.heads} divides width {width}")
    while True:
        heads = rng.choice(space.heads)
        if width % heads == 0 and (base.positional != "rope" or (width // heads) % 2 == 0):
            break
    activation = rng.choice(space.activations)
    pattern = rng.choice(space.attention_patterns)
    cycle = base.window_cycle or ("short", "short", "short", "long")
    return replace(base, depth=depth, width=width, heads=heads, kv_heads=heads,
                   activation=activation, attention_pattern=pattern, window_cycle=cycle)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_TYPE_NAMES = {"int": int, "float": float, "str": str, "bool": bool}
_TYPES: dict[str, type | None] = {
    f"{scope}.{f.name}": _TYPE_NAMES.get(f.type)  # None marks the tuple-valued window_cycle
    for cls, scope in ((ArchConfig, "arch"), (HPConfig, "hp"), (TrackConfig, "track"))
    for f in fields(cls)
}


def coerce_field(path: str, value: Any) -> Any:
    """Convert ``value`` (possibly a string from a file or JSON) to the field's type."""
    typ = _TYPES[path]
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in ("true", "1", "yes", "on"):
            return True
        if isinstance(value, str) and value.strip().lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{path}: cannot read {value!r} as a boolean")
    if typ is int:
        if isinstance(value, bool):
            raise ValueError(f"{path}: expected integer, got boolean")
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{path}: expected integer, got {value!r}")
        return int(value)
    if typ is float:
        return float(value)
    if typ is str:
        return str(value).strip()
    if path.endswith("window_cycle"):
        if isinstance(value, str):
            return tuple(t.strip() for t in value.split(",") if t.strip())
        return tuple(str(t) for t in value)
    raise TypeError(f"unsupported field type for {path}")


def to_jsonable(value: Any) -> Any:
    return list(value) if isinstance(value, tuple) else value


def config_to_dict(obj: ArchConfig | HPConfig | TrackConfig) -> dict:
    return {k: to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}


def arch_from_dict(d: Mapping) -> ArchConfig:
    return ArchConfig(**{k: coerce_field(f"arch.{k}", v) for k, v in d.items()})


def hp_from_dict(d: Mapping) -> HPConfig:
    return HPConfig(**{k: coerce_field(f"hp.{k}", v) for k, v in d.items()})


def track_from_dict(d: Mapping) -> TrackConfig:
    return TrackConfig(**{k: coerce_field(f"track.{k}", v) for k, v in d.items()})


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines. Blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config_file(path: str | Path, base_arch: ArchConfig | None = None,
                     base_hp: HPConfig | None = None) -> tuple[ArchConfig, HPConfig]:
    """Read arch and hp fields from one key-value file; unknown keys are errors."""
    kv = parse_kv_text(Path(path).read_text())
    unknown = sorted(set(kv) - set(ARCH_FIELDS) - set(HP_FIELDS))
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    arch = base_arch if base_arch is not None else ArchConfig()
    hp = base_hp if base_hp is not None else HPConfig()
    arch = replace(arch, **{k: coerce_field(f"arch.{k}", v) for k, v in kv.items() if k in ARCH_FIELDS})
    hp = replace(hp, **{k: coerce_field(f"hp.{k}", v) for k, v in kv.items() if k in HP_FIELDS})
    return arch, hp


def load_track_file(path: str | Path) -> TrackConfig:
    kv = parse_kv_text(Path(path).read_text())
    names = {f.name for f in fields(TrackConfig)}
    unknown = sorted(set(kv) - names)
    if unknown:
        raise ValueError(f"{path}: unknown track keys {unknown}")
    return track_from_dict(kv)


def dump_kv_text(*objs: ArchConfig | HPConfig | TrackConfig) -> str:
    lines = []
    for obj in objs:
        for k, v in dataclasses.asdict(obj).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(v)
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def iter_paths(scope: str | None = None) -> Iterable[str]:
    if scope in (None, "arch"):
        yield from sorted(ARCH_PATHS)
    if scope in (None, "hp"):
        yield from sorted(HP_PATHS)
