"""Configurable decoder-only transformer in numpy with hand-written backprop.

Parameters live in a flat ``dict[str, ndarray]``. Linear weights are stored
``(out_features, in_features)`` and applied as ``x @ W.T``; the unembedding
is ``(width, vocab)``. Everything runs in float64 unless a dtype is given.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import expit, ndtr

from .config import ArchConfig

RMS_EPS = 1e-5
ROPE_BASE = 10000.0
VE_GATE_INIT = -2.0
UNEMBED_INIT_SCALE = 0.1

Params = dict[str, np.ndarray]


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    """A fixed-shape block of token ids.

    ``mask`` marks real (non-pad) positions and ``token_bytes`` the byte length
    of the text each position encodes (0 at pads).
    """

    token_ids: np.ndarray  # (B, T) int
    mask: np.ndarray  # (B, T) bool
    token_bytes: np.ndarray  # (B, T) int

    @classmethod
    def from_ids(cls, token_ids, byte_table=None, pad_id: int | None = None) -> "Batch":
        ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
        mask = np.ones(ids.shape, bool) if pad_id is None else ids != pad_id
        if byte_table is None:
            nbytes = mask.astype(np.int64)
        else:
            nbytes = np.asarray(byte_table, dtype=np.int64)[ids] * mask
        return cls(ids, mask, nbytes)

    @property
    def byte_lengths(self) -> np.ndarray:
        return self.token_bytes.sum(axis=1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape

    def truncate(self, length: int) -> "Batch":
        return Batch(self.token_ids[:, :length], self.mask[:, :length],
                     self.token_bytes[:, :length])


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return gain * x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def _rmsnorm_fwd(x, gain, eps=RMS_EPS):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gain * x * r, r


def _rmsnorm_bwd(dy, x, r, gain):
    u = dy * gain
    dgain = (dy * x * r).reshape(-1, x.shape[-1]).sum(axis=0)
    dx = r * u - (r ** 3) * x * np.mean(u * x, axis=-1, keepdims=True)
    return dx, dgain


def rope_angles(positions, head_dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Angles ``(len(positions), head_dim // 2)``; pair i turns at base^(-2i/head_dim)."""
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=float) / head_dim)
    return np.outer(np.asarray(positions, dtype=float), inv_freq)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # Pairs are (x[i], x[i + head_dim/2]).
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def rope_rotate(vec, position: float, base: float = ROPE_BASE) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    if vec.shape[-1] % 2:
        raise ValueError("rope needs an even head_dim")
    ang = rope_angles([position], vec.shape[-1], base)[0]
    return _rotate(vec, np.cos(ang), np.sin(ang))


def _act_fwd(kind: str, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (f(x), f'(x))."""
    if kind == "relu":
        return np.maximum(x, 0.0), (x > 0).astype(x.dtype)
    if kind == "relu_squared":
        r = np.maximum(x, 0.0)
        return r * r, 2.0 * r
    if kind in ("gelu", "geglu"):
        cdf = ndtr(x)
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return x * cdf, cdf + x * pdf
    if kind in ("silu", "swiglu"):
        s = expit(x)
        return x * s, s * (1.0 + x * (1.0 - s))
    raise ValueError(f"unknown activation {kind!r}")


def apply_activation(kind: str, x):
    """Elementwise activation. For swiglu/geglu this is the gate nonlinearity (silu/gelu)."""
    out = _act_fwd(kind, np.asarray(x, dtype=float))[0]
    return float(out) if np.ndim(out) == 0 else out


def attention_mask(T: int, window: int | None) -> np.ndarray:
    """Boolean (T, T) visibility: s <= t, and t - s < window when windowed."""
    t = np.arange(T)[:, None]
    s = np.arange(T)[None, :]
    vis = s <= t
    if window is not None:
        vis &= s > t - window
    return vis


def _softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                     window: int | None = None) -> np.ndarray:
    """Grouped causal attention.

    q: (B, T, H, hd); k, v: (B, T, KV, hd) with H divisible by KV. Query head h
    reads kv head h // (H // KV). Returns (B, T, H, hd).
    """
    out, _ = _attn_fwd(q, k, v, window)
    return out


def _attn_fwd(q, k, v, window):
    B, T, H, hd = q.shape
    KV = k.shape[2]
    G = H // KV
    qg = q.reshape(B, T, KV, G, hd).transpose(0, 2, 3, 1, 4)  # B KV G T hd
    kt = k.transpose(0, 2, 3, 1)[:, :, None]  # B KV 1 hd T
    vg = v.transpose(0, 2, 1, 3)[:, :, None]  # B KV 1 T hd
    s = (qg @ kt) / math.sqrt(hd)
    s = np.where(attention_mask(T, window), s, -np.inf)
    p = _softmax(s)
    o = p @ vg  # B KV G T hd
    out = o.transpose(0, 3, 1, 2, 4).reshape(B, T, H, hd)
    return out, (qg, kt, vg, p)


def _attn_bwd(dout, cache):
    qg, kt, vg, p = cache
    B, KV, G, T, hd = qg.shape
    do = dout.reshape(B, T, KV, G, hd).transpose(0, 2, 3, 1, 4)
    dp = do @ vg.swapaxes(-1, -2)
    dv = (p.swapaxes(-1, -2) @ do).sum(axis=2)  # B KV T hd
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) / math.sqrt(hd)
    dq = ds @ kt.swapaxes(-1, -2)  # B KV G T hd
    dk = (ds.swapaxes(-1, -2) @ qg).sum(axis=2)  # B KV T hd
    dq = dq.transpose(0, 3, 1, 2, 4).reshape(B, T, KV * G, hd)
    return dq, dk.transpose(0, 2, 1, 3), dv.transpose(0, 2, 1, 3)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(arch: ArchConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    D, hd = arch.width, arch.head_dim
    qdim, kvdim = arch.heads * hd, arch.kv_heads * hd
    F = arch.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (vocab_size, D)}
    for l in range(arch.depth):
        p = f"h{l}."
        shapes[p + "attn_norm"] = (D,)
        shapes[p + "wq"] = (qdim, D)
        shapes[p + "wk"] = (kvdim, D)
        shapes[p + "wv"] = (kvdim, D)
        shapes[p + "wo"] = (D, qdim)
        if arch.has_value_embedding(l):
            shapes[p + "ve"] = (vocab_size, kvdim)
            shapes[p + "ve_gate"] = (kvdim,)
        shapes[p + "mlp_norm"] = (D,)
        shapes[p + "mlp_in"] = (2 * F if arch.gated else F, D)
        shapes[p + "mlp_out"] = (D, F)
        if arch.residual_scaling == "learned_per_layer":
            shapes[p + "resid_attn"] = (1,)
            shapes[p + "resid_mlp"] = (1,)
    shapes["final_norm"] = (D,)
    if not arch.weight_tying:
        shapes["unemb"] = (D, vocab_size)
    return shapes


MATRIX_SUFFIXES = ("wq", "wk", "wv", "wo", "mlp_in", "mlp_out")


def param_kind(name: str) -> str:
    """One of matrix, embedding, unembedding, gain, scalar."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in MATRIX_SUFFIXES:
        return "matrix"
    if leaf in ("tok_emb", "ve"):
        return "embedding"
    if leaf == "unemb":
        return "unembedding"
    if leaf.endswith("norm"):
        return "gain"
    return "scalar"


def init_params(arch: ArchConfig, vocab_size: int, seed: int, dtype=np.float64) -> Params:
    """Seeded init: Gaussian 1/sqrt(fan_in) matrices, unit-variance lookup tables."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(arch, vocab_size).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in MATRIX_SUFFIXES:
            w = rng.standard_normal(shape) / math.sqrt(shape[1])
        elif leaf == "tok_emb":
            # A tied table doubles as the unembedding and takes its fan-in.
            w = rng.standard_normal(shape) * (UNEMBED_INIT_SCALE / math.sqrt(arch.width)
                                              if arch.weight_tying else 1.0)
        elif leaf == "ve":
            w = rng.standard_normal(shape)
        elif leaf == "unemb":
            w = rng.standard_normal(shape) * (UNEMBED_INIT_SCALE / math.sqrt(shape[0]))
        elif leaf == "ve_gate":
            w = np.full(shape, VE_GATE_INIT)
        else:
            w = np.ones(shape)
        params[name] = w.astype(dtype)
    return params


def param_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


def check_params(params: Mapping[str, np.ndarray], arch: ArchConfig, vocab_size: int) -> None:
    expected = param_shapes(arch, vocab_size)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeMismatch(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")


def vocab_of(params: Mapping[str, np.ndarray]) -> int:
    return params["tok_emb"].shape[0]


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _forward(params: Params, arch: ArchConfig, ids: np.ndarray, keep_cache: bool):
    V = vocab_of(params)
    check_params(params, arch, V)
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ShapeMismatch(f"token ids outside [0, {V})")
    B, T = ids.shape
    H, KV, hd = arch.heads, arch.kv_heads, arch.head_dim
    F = arch.ffn_hidden
    caches = []
    if arch.positional == "rope":
        ang = rope_angles(np.arange(T), hd)
        cos, sin = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]  # T 1 hd/2
    x = params["tok_emb"][ids]
    for l in range(arch.depth):
        p = f"h{l}."
        c: dict = {}
        n1, r1 = _rmsnorm_fwd(x, params[p + "attn_norm"])
        q = (n1 @ params[p + "wq"].T).reshape(B, T, H, hd)
        k = (n1 @ params[p + "wk"].T).reshape(B, T, KV, hd)
        v = (n1 @ params[p + "wv"].T).reshape(B, T, KV, hd)
        if arch.has_value_embedding(l):
            gate = expit(params[p + "ve_gate"])
            ve = params[p + "ve"][ids]
            v = v + (gate * ve).reshape(B, T, KV, hd)
            c.update(gate=gate, ve=ve)
        if arch.positional == "rope":
            q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        o, acache = _attn_fwd(q, k, v, arch.layer_window(l))
        o = o.reshape(B, T, H * hd)
        a = o @ params[p + "wo"].T
        ra = params[p + "resid_attn"][0] if arch.residual_scaling == "learned_per_layer" else 1.0
        x_mid = x + ra * a
        n2, r2 = _rmsnorm_fwd(x_mid, params[p + "mlp_norm"])
        h = n2 @ params[p + "mlp_in"].T
        if arch.gated:
            val, g = h[..., :F], h[..., F:]
            fg, dfg = _act_fwd(arch.activation, g)
            act = fg * val
            c.update(val=val, fg=fg, dfg=dfg)
        else:
            act, dact = _act_fwd(arch.activation, h)
            c.update(dact=dact)
        m = act @ params[p + "mlp_out"].T
        rm = params[p + "resid_mlp"][0] if arch.residual_scaling == "learned_per_layer" else 1.0
        if keep_cache:
            c.update(x=x, n1=n1, r1=r1, acache=acache, o=o, a=a, x_mid=x_mid, n2=n2, r2=r2,
                     act=act, m=m, ra=ra, rm=rm)
            caches.append(c)
        x = x_mid + rm * m
    nf, rf = _rmsnorm_fwd(x, params["final_norm"])
    unemb = params["tok_emb"].T if arch.weight_tying else params["unemb"]
    logits = nf @ unemb
    cache = dict(ids=ids, layers=caches, x=x, nf=nf, rf=rf,
                 cos=cos if arch.positional == "rope" else None,
                 sin=sin if arch.positional == "rope" else None) if keep_cache else None
    return logits, cache


def forward_logits(params: Params, arch: ArchConfig, batch: Batch | np.ndarray) -> np.ndarray:
    """Logits of shape (B, T, vocab); position t sees tokens 0..t only."""
    ids = batch.token_ids if isinstance(batch, Batch) else np.atleast_2d(np.asarray(batch))
    return _forward(params, arch, ids, keep_cache=False)[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_nats(logits: np.ndarray, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-target cross-entropy (nats) for positions 1..T-1 and the validity mask."""
    logp = _log_softmax(logits[:, :-1])
    targets = batch.token_ids[:, 1:]
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    valid = batch.mask[:, 1:] & batch.mask[:, :-1]
    return np.where(valid, nll, 0.0), valid


def loss_bpb(logits: np.ndarray, batch: Batch) -> float:
    """Summed target cross-entropy over ln 2 times the bytes of the predicted span."""
    nats, valid = token_nats(logits, batch)
    nbytes = int(batch.token_bytes[:, 1:][valid].sum())
    if nbytes == 0:
        return float("nan")
    return float(nats.sum() / (math.log(2.0) * nbytes))


def mean_cross_entropy(params: Params, arch: ArchConfig, batch: Batch) -> float:
    nats, valid = token_nats(forward_logits(params, arch, batch), batch)
    return float(nats.sum() / max(int(valid.sum()), 1))


def compute_grads(params: Params, arch: ArchConfig, batch: Batch,
                  loss_scale: float = 1.0) -> tuple[float, Params]:
    """Mean target cross-entropy (times ``loss_scale``) and its exact gradients."""
    logits, cache = _forward(params, arch, batch.token_ids, keep_cache=True)
    nats, valid = token_nats(logits, batch)
    n_valid = max(int(valid.sum()), 1)
    loss = float(nats.sum() / n_valid) * loss_scale

    B, T = batch.token_ids.shape
    H, KV, hd = arch.heads, arch.kv_heads, arch.head_dim
    F = arch.ffn_hidden
    D = arch.width
    grads: Params = {k: np.zeros_like(v) for k, v in params.items()}

    probs = np.exp(_log_softmax(logits))
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = probs[:, :-1]
    idx = batch.token_ids[:, 1:, None]
    np.put_along_axis(dlogits[:, :-1], idx, np.take_along_axis(dlogits[:, :-1], idx, -1) - 1.0, -1)
    dlogits[:, :-1] *= (valid * (loss_scale / n_valid))[..., None]

    nf = cache["nf"]
    dlog2 = dlogits.reshape(-1, dlogits.shape[-1])
    dunemb = nf.reshape(-1, D).T @ dlog2
    unemb = params["tok_emb"].T if arch.weight_tying else params["unemb"]
    if arch.weight_tying:
        grads["tok_emb"] += dunemb.T
    else:
        grads["unemb"] = dunemb
    dnf = dlogits @ unemb.T
    dx, grads["final_norm"] = _rmsnorm_bwd(dnf, cache["x"], cache["rf"], params["final_norm"])

    ids = cache["ids"]
    for l in reversed(range(arch.depth)):
        p = f"h{l}."
        c = cache["layers"][l]
        # MLP branch
        if arch.residual_scaling == "learned_per_layer":
            grads[p + "resid_mlp"] = np.array([np.sum(dx * c["m"])])
        dm = c["rm"] * dx
        grads[p + "mlp_out"] = dm.reshape(-1, D).T @ c["act"].reshape(-1, F)
        dact = dm @ params[p + "mlp_out"]
        if arch.gated:
            dh = np.concatenate([dact * c["fg"], dact * c["val"] * c["dfg"]], axis=-1)
        else:
            dh = dact * c["dact"]
        grads[p + "mlp_in"] = dh.reshape(-1, dh.shape[-1]).T @ c["n2"].reshape(-1, D)
        dn2 = dh @ params[p + "mlp_in"]
        dxm, grads[p + "mlp_norm"] = _rmsnorm_bwd(dn2, c["x_mid"], c["r2"], params[p + "mlp_norm"])
        dx = dx + dxm
        # attention branch
        if arch.residual_scaling == "learned_per_layer":
            grads[p + "resid_attn"] = np.array([np.sum(dx * c["a"])])
        da = c["ra"] * dx
        grads[p + "wo"] = da.reshape(-1, D).T @ c["o"].reshape(-1, H * hd)
        do = (da @ params[p + "wo"]).reshape(B, T, H, hd)
        dq, dk, dv = _attn_bwd(do, c["acache"])
        if arch.positional == "rope":
            dq = _rotate(dq, cache["cos"], -cache["sin"])
            dk = _rotate(dk, cache["cos"], -cache["sin"])
        dq, dk, dv = (t.reshape(B, T, -1) for t in (dq, dk, dv))
        if arch.has_value_embedding(l):
            gate = c["gate"]
            dve = dv * gate
            np.add.at(grads[p + "ve"], ids, dve)
            grads[p + "ve_gate"] = np.sum(dv * c["ve"], axis=(0, 1)) * gate * (1.0 - gate)
        n1 = c["n1"].reshape(-1, D)
        grads[p + "wq"] = dq.reshape(-1, dq.shape[-1]).T @ n1
        grads[p + "wk"] = dk.reshape(-1, dk.shape[-1]).T @ n1
        grads[p + "wv"] = dv.reshape(-1, dv.shape[-1]).T @ n1
        dn1 = dq @ params[p + "wq"] + dk @ params[p + "wk"] + dv @ params[p + "wv"]
        dxa, grads[p + "attn_norm"] = _rmsnorm_bwd(dn1, c["x"], c["r1"], params[p + "attn_norm"])
        dx = dx + dxa
    np.add.at(grads["tok_emb"], ids, dx)
    return loss, grads


# ---------------------------------------------------------------------------
# checkpoint: text header then little-endian float64 payload
# ---------------------------------------------------------------------------

CKPT_MAGIC = "searchlab-checkpoint v1"


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [CKPT_MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    offset = 0
    order = sorted(tensors)
    for name in order:
        arr = tensors[name]
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset}")
        offset += arr.size * 8
    lines.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode())
        for name in order:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    pos = 0
    entries = []
    meta: dict = {}
    first = True
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode()
        pos = nl + 1
        if first:
            if line != CKPT_MAGIC:
                raise ValueError(f"{path}: not a searchlab checkpoint")
            first = False
        elif line.startswith("meta "):
            meta = json.loads(line[5:])
        elif line.startswith("tensor "):
            _, name, shape, off = line.split(" ")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            entries.append((name, dims, int(off)))
        elif line == "end":
            break
        else:
            raise ValueError(f"{path}: bad header line {line!r}")
    out = {}
    for name, dims, off in entries:
        count = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos + off).reshape(dims).astype(np.float64)
    return out, meta
