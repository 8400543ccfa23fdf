"""Tokenizers, corpora, splits, batches, and synthetic desk-scale text."""

from __future__ import annotations

import random
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernels
from .config import TrackConfig
from .model import Batch

PAD_TOKEN = "<pad>"
TOKENIZER_MAGIC = "searchlab-tokenizer v1"


class EmptySplit(ValueError):
    pass


class CorpusTooSmall(UserWarning):
    pass


@dataclass(frozen=True)
class Tokenizer:
    """Char or byte-level BPE tokenizer; the pad token is always the last id.

    ``vocab`` holds the raw bytes of each token (the pad entry is empty).
    """

    kind: str
    vocab: tuple[bytes, ...]
    merges: tuple[tuple[int, int], ...] = ()
    partial: bool = False

    @property
    def pad_id(self) -> int:
        return len(self.vocab) - 1

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def byte_len(self) -> np.ndarray:
        return np.array([len(t) for t in self.vocab], dtype=np.int64)

    def _char_index(self) -> dict[str, int]:
        idx = self.__dict__.get("_cidx")
        if idx is None:
            idx = {t.decode("utf-8", "surrogateescape"): i for i, t in enumerate(self.vocab[:-1])}
            object.__setattr__(self, "_cidx", idx)
        return idx

    def encode(self, text: str | bytes) -> np.ndarray:
        if self.kind == "char":
            if isinstance(text, bytes):
                text = text.decode("utf-8", "surrogateescape")
            idx = self._char_index()
            try:
                return np.array([idx[ch] for ch in text], dtype=np.int64)
            except KeyError as e:
                raise ValueError(f"character {e.args[0]!r} not in tokenizer alphabet") from None
        data = text.encode("utf-8") if isinstance(text, str) else text
        ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        return self._apply_merges(ids)

    def encode_lines(self, lines: Sequence[str | bytes]) -> list[np.ndarray]:
        if self.kind == "char":
            return [self.encode(line) for line in lines]
        # One pass per merge over all lines joined by a -1 separator.
        parts = []
        for line in lines:
            data = line.encode("utf-8") if isinstance(line, str) else line
            parts.append(np.frombuffer(data, dtype=np.uint8).astype(np.int64))
            parts.append(np.array([-1], dtype=np.int64))
        if not parts:
            return []
        ids = self._apply_merges(np.concatenate(parts))
        cuts = np.flatnonzero(ids == -1)
        return [seg[:-1] for seg in np.split(ids, cuts + 1)[:-1]]

    def _apply_merges(self, ids: np.ndarray) -> np.ndarray:
        for rank, (a, b) in enumerate(self.merges):
            ids = kernels.merge_pair(ids, a, b, 256 + rank)
        return ids

    def decode(self, ids: Sequence[int] | np.ndarray) -> str:
        raw = b"".join(self.vocab[i] for i in np.asarray(ids, dtype=np.int64).tolist())
        return raw.decode("utf-8", "surrogateescape")

    # -- persistence: header, vocab lines (hex bytes), merge lines --

    def dumps(self) -> str:
        lines = [TOKENIZER_MAGIC, f"kind {self.kind}", f"vocab {len(self.vocab)}"]
        lines += [t.hex() if i != self.pad_id else PAD_TOKEN for i, t in enumerate(self.vocab)]
        lines.append(f"merges {len(self.merges)}")
        lines += [f"{a} {b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Tokenizer":
        lines = text.splitlines()
        if not lines or lines[0] != TOKENIZER_MAGIC:
            raise ValueError("not a searchlab tokenizer file")
        kind = lines[1].split(" ", 1)[1]
        n_vocab = int(lines[2].split(" ", 1)[1])
        vocab = tuple(b"" if ln == PAD_TOKEN else bytes.fromhex(ln) for ln in lines[3:3 + n_vocab])
        n_merges = int(lines[3 + n_vocab].split(" ", 1)[1])
        merges = tuple(tuple(int(x) for x in ln.split()) for ln in lines[4 + n_vocab:4 + n_vocab + n_merges])
        return cls(kind, vocab, merges)  # type: ignore[arg-type]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls.loads(Path(path).read_text())


def build_char_tokenizer(text: str | bytes) -> Tokenizer:
    if isinstance(text, bytes):
        text = text.decode("utf-8", "surrogateescape")
    chars = sorted(set(text) - {"\n"})
    return Tokenizer("char", tuple(c.encode("utf-8", "surrogateescape") for c in chars) + (b"",))


def train_bpe(text: bytes | str, target_vocab: int) -> Tokenizer:
    """Byte-level BPE: merge the most frequent adjacent pair until the vocab is full.

    The vocab is 256 byte tokens, the merges, and a pad token. Ties go to the
    lexicographically smallest (left bytes, right bytes) pair. Pairs never
    span newlines. If no pair occurs twice the vocab stays short and the
    tokenizer is flagged ``partial``.
    """
    if target_vocab < 257:
        raise ValueError("target_vocab must be >= 257 (256 bytes + pad)")
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    pieces = []
    for line in data.split(b"\n"):
        pieces.append(np.frombuffer(line, dtype=np.uint8).astype(np.int64))
        pieces.append(np.array([-1], dtype=np.int64))
    ids = np.concatenate(pieces) if pieces else np.zeros(0, np.int64)
    vocab: list[bytes] = [bytes([i]) for i in range(256)]
    merges: list[tuple[int, int]] = []
    partial = False
    n_merges = target_vocab - 257
    while len(merges) < n_merges:
        left, right = ids[:-1], ids[1:]
        ok = (left >= 0) & (right >= 0)
        if not ok.any():
            partial = True
            break
        keys = left[ok] * len(vocab) + right[ok]
        uniq, counts = np.unique(keys, return_counts=True)
        best = counts.max()
        if best < 2:
            partial = True
            break
        cands = [(int(k) // len(vocab), int(k) % len(vocab)) for k in uniq[counts == best]]
        a, b = min(cands, key=lambda p: (vocab[p[0]], vocab[p[1]]))
        new_id = len(vocab)
        ids = kernels.merge_pair(ids, a, b, new_id)
        merges.append((a, b))
        vocab.append(vocab[a] + vocab[b])
    if partial:
        warnings.warn(f"corpus too small: stopped at {len(vocab) + 1} of {target_vocab} tokens",
                      CorpusTooSmall, stacklevel=2)
    return Tokenizer("bpe", tuple(vocab) + (b"",), tuple(merges), partial)


# ---------------------------------------------------------------------------
# corpus and batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Corpus:
    """Fixed-length padded sequences with a seeded train/val split."""

    tokens: np.ndarray  # (N, seq_len) int64, pad-filled
    token_bytes: np.ndarray  # (N, seq_len) int64, 0 at pads
    train_idx: np.ndarray
    val_idx: np.ndarray
    seq_len: int
    pad_id: int
    vocab_size: int

    @property
    def lengths(self) -> np.ndarray:
        return (self.tokens != self.pad_id).sum(axis=1)

    def split_indices(self, split: str) -> np.ndarray:
        if split == "train":
            return self.train_idx
        if split == "val":
            return self.val_idx
        raise ValueError(f"unknown split {split!r}")

    def batch(self, rows: np.ndarray) -> Batch:
        toks = self.tokens[rows]
        return Batch(toks, toks != self.pad_id, self.token_bytes[rows])

    def truncated(self, length: int) -> "Corpus":
        if length < 2:
            raise ValueError("truncated length must be >= 2")
        if length > self.seq_len:
            raise ValueError(f"truncated length {length} exceeds seq_len {self.seq_len}")
        return Corpus(self.tokens[:, :length].copy(), self.token_bytes[:, :length].copy(),
                      self.train_idx, self.val_idx, length, self.pad_id, self.vocab_size)


def split_indices(n: int, split_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(split_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def build_corpus(sequences: Sequence[np.ndarray], tokenizer: Tokenizer, seq_len: int,
                 split_fraction: float = 0.9, seed: int = 0) -> Corpus:
    """Pad/truncate token sequences to ``seq_len`` and split them."""
    seqs = [s for s in sequences if len(s) > 0]
    n = len(seqs)
    pad = tokenizer.pad_id
    tokens = np.full((n, seq_len), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        s = s[:seq_len]
        tokens[i, :len(s)] = s
    nbytes = tokenizer.byte_len[tokens]
    train_idx, val_idx = split_indices(n, split_fraction, seed)
    return Corpus(tokens, nbytes, train_idx, val_idx, seq_len, pad, tokenizer.vocab_size)


def corpus_from_text(text: str | bytes, tokenizer: Tokenizer, seq_len: int,
                     split_fraction: float = 0.9, seed: int = 0) -> Corpus:
    if isinstance(text, bytes):
        lines: list = [ln for ln in text.split(b"\n") if ln]
    else:
        lines = [ln for ln in text.split("\n") if ln]
    return build_corpus(tokenizer.encode_lines(lines), tokenizer, seq_len, split_fraction, seed)


def iter_batches(corpus: Corpus, device_batch_seqs: int, seed: int,
                 split: str = "train") -> Iterator[Batch]:
    """One shuffled epoch; the final short batch is kept."""
    rows = corpus.split_indices(split)
    if rows.size == 0:
        raise EmptySplit(f"{split} split is empty")
    order = rows[np.random.default_rng(seed).permutation(rows.size)]
    for start in range(0, order.size, device_batch_seqs):
        yield corpus.batch(order[start:start + device_batch_seqs])


def make_batches(corpus: Corpus, device_batch_seqs: int, seed: int,
                 split: str = "train") -> Iterator[Batch]:
    """Endless batch stream; epoch ``e`` is shuffled with seed ``(seed, e)``."""
    if corpus.split_indices(split).size == 0:
        raise EmptySplit(f"{split} split is empty")
    epoch = 0
    while True:
        yield from iter_batches(corpus, device_batch_seqs,
                                int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0]), split)
        epoch += 1


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

SMILES_ALPHABET = "CNOSFPBIcnospHlr123456789()[]=#-+@/\\"
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
PROTEIN_ALPHABET = AMINO_ACIDS + "XUBZ"

_ADJ = ("small", "bright", "quiet", "old", "green", "careful", "rapid", "gentle", "curious", "heavy")
_NOUN = ("cat", "river", "student", "engine", "garden", "teacher", "city", "model", "bird", "letter")
_VERB = ("finds", "builds", "follows", "watches", "carries", "explains", "moves", "reads", "opens", "helps")
_ADV = ("slowly", "today", "again", "quickly", "at night", "with care", "in silence", "every day")
_TEMPLATES = (
    "The {a} {n} {v} the {a2} {n2} {d}.",
    "A {n} {v} a {a} {n2}.",
    "Every {a} {n} {v} the {n2} {d}.",
    "The {n} and the {n2} {v} {d}.",
    "Why does the {a} {n} read the {n2}?",
)


def _smiles_like(rng: random.Random, max_len: int = 60) -> str:
    atoms = ["C", "C", "C", "c", "N", "O", "n", "o", "S", "F", "Cl", "Br", "P", "s", "I", "B"]
    bonds = ["", "", "", "=", "#", "-", "/", "\\"]
    out: list[str] = []
    open_rings: list[str] = []
    free_rings = list("123456789")
    depth = 0

    def atom() -> str:
        if rng.random() < 0.08:
            return "[" + rng.choice(["NH+", "O-", "C@H", "C@@H", "N+", "nH"]) + "]"
        return rng.choice(atoms)

    out.append(atom())
    n_atoms = rng.randint(4, 18)
    for _ in range(n_atoms):
        r = rng.random()
        if r < 0.15 and depth < 3:
            out.append("(")
            depth += 1
        elif r < 0.30 and depth > 0:
            out.append(")")
            depth -= 1
        out.append(rng.choice(bonds) + atom())
        r = rng.random()
        if r < 0.12 and free_rings:
            d = free_rings.pop(0)
            open_rings.append(d)
            out.append(d)
        elif r < 0.25 and open_rings:
            d = open_rings.pop()
            free_rings.insert(0, d)
            out.append(d)
    out.extend(open_rings[::-1])
    out.append(")" * depth)
    return "".join(out)[:max_len]


def _protein_transitions() -> np.ndarray:
    # A fixed sparse-ish chain so every seed samples the same language.
    rng = np.random.default_rng(20240521)
    n = len(PROTEIN_ALPHABET)
    t = rng.dirichlet(np.full(n, 0.3), size=n)
    t[:, 20:] *= 0.05  # rare X/U/B/Z
    return t / t.sum(axis=1, keepdims=True)


def generate_synthetic_corpus(kind: str, n: int, seed: int) -> str:
    """``n`` newline-separated synthetic sequences of the given kind."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    lines: list[str] = []
    if kind == "smiles_like":
        lines = [_smiles_like(rng) for _ in range(n)]
    elif kind == "protein_like":
        trans = _protein_transitions()
        cum = np.cumsum(trans, axis=1)
        for _ in range(n):
            length = rng.randint(30, 62)
            state = rng.randrange(20)
            seq = [state]
            for _ in range(length - 1):
                state = min(int(np.searchsorted(cum[state], rng.random(), side="right")),
                            len(PROTEIN_ALPHABET) - 1)
                seq.append(state)
            lines.append("".join(PROTEIN_ALPHABET[i] for i in seq))
    elif kind == "nlp_like":
        for _ in range(n):
            tpl = rng.choice(_TEMPLATES)
            lines.append(tpl.format(a=rng.choice(_ADJ), a2=rng.choice(_ADJ), n=rng.choice(_NOUN),
                                    n2=rng.choice(_NOUN), v=rng.choice(_VERB), d=rng.choice(_ADV)))
    else:
        raise ValueError(f"unknown synthetic corpus kind {kind!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# tracks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrackData:
    track: TrackConfig
    tokenizer: Tokenizer
    corpus: Corpus


def load_track(track: TrackConfig, seed: int = 0, n_synthetic: int = 2000) -> TrackData:
    """Tokenize the track's corpus file, or a synthetic corpus when no path is given."""
    if track.corpus_path:
        raw = Path(track.corpus_path).read_bytes()
    elif track.name in ("smiles_like", "protein_like", "nlp_like"):
        raw = generate_synthetic_corpus(track.name, n_synthetic, seed).encode()
    else:
        raise ValueError(f"track {track.name!r} has no corpus_path")
    if track.tokenizer == "bpe":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CorpusTooSmall)
            tok = train_bpe(raw, max(track.vocab_size, 257))
    else:
        tok = build_char_tokenizer(raw)
    corpus = corpus_from_text(raw, tok, track.seq_len, track.split_fraction, seed)
    return TrackData(track, tok, corpus)
