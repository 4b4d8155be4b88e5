"""Neural building blocks: linear stacks, LSTM, multi-head attention,
transformer blocks, and the two-stream cross-modal encoder, plus the
binary parameter-checkpoint container."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, RngStream, ShapeError
from .config import EncoderConfig

CLS_ID = 0  # reserved row of every token-embedding table


class VocabularyError(ValueError):
    """Token id outside the embedding table."""


class CheckpointError(ValueError):
    """Corrupt or incompatible parameter container."""


def _prefixed(prefix: str, params: dict[str, Array]) -> dict[str, Array]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: RngStream, bias: bool = True,
                 init: str = "xavier"):
        if init == "xavier":
            limit = math.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-limit, limit, (d_in, d_out))
        elif init == "zero":
            w = np.zeros((d_in, d_out))
        else:
            raise ValueError(f"unknown init '{init}'")
        self.w = Array(w, requires_grad=True)
        self.b = Array(np.zeros((1, d_out)), requires_grad=True) if bias else None

    def __call__(self, x: Array) -> Array:
        out = ad.matmul(x, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out

    def parameters(self) -> dict[str, Array]:
        params = {"w": self.w}
        if self.b is not None:
            params["b"] = self.b
        return params


class LinearStack:
    """Fully connected layers with ReLU between them and no output activation."""

    def __init__(self, dims: tuple[int, ...], rng: RngStream):
        if len(dims) < 2:
            raise ValueError("LinearStack needs at least input and output dims")
        self.dims = tuple(dims)
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    def __call__(self, x: Array) -> Array:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def parameters(self) -> dict[str, Array]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(_prefixed(f"fc{i}", layer.parameters()))
        return out


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-6):
        self.eps = eps
        self.gamma = Array(np.ones((1, d)), requires_grad=True)
        self.beta = Array(np.zeros((1, d)), requires_grad=True)

    def __call__(self, x: Array) -> Array:
        mu = ad.amean(x, axis=1, keepdims=True)
        xc = ad.sub(x, mu)
        var = ad.amean(ad.mul(xc, xc), axis=1, keepdims=True)
        inv = ad.power(ad.add(var, self.eps), -0.5)
        return ad.add(ad.mul(ad.mul(xc, inv), self.gamma), self.beta)

    def parameters(self) -> dict[str, Array]:
        return {"gamma": self.gamma, "beta": self.beta}


def attentive_pool(seq: Array, query: Array, w: Array) -> tuple[Array, Array]:
    """Weighted average of ``seq`` rows with weights softmax(seq @ (w @ query^T)).

    ``seq`` is (n, d), ``query`` is (1, d_q), ``w`` is (d, d_q). Returns the
    pooled (1, d) row and the (n, 1) weight column for inspection.
    """
    scores = ad.matmul(seq, ad.matmul(w, ad.transpose(query)))
    weights = ad.softmax(scores, axis=0)
    pooled = ad.matmul(ad.transpose(weights), seq)
    return pooled, weights


class MultiHeadAttention:
    def __init__(self, d: int, heads: int, rng: RngStream, context_dim: int | None = None):
        if d % heads != 0:
            raise ShapeError(f"head count {heads} must divide model dim {d}")
        ctx = context_dim if context_dim is not None else d
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(ctx, d, rng)
        self.wv = Linear(ctx, d, rng)
        self.wo = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None  # (heads, n_q, n_ctx)
        self.last_mixed: np.ndarray | None = None    # pre-output-projection mix

    def __call__(self, q_seq: Array, ctx_seq: Array) -> Array:
        if ctx_seq.shape[0] < 1:
            raise ShapeError("attention over an empty context")
        q = self.wq(q_seq)
        k = self.wk(ctx_seq)
        v = self.wv(ctx_seq)
        scale = 1.0 / math.sqrt(self.d_head)
        outs, weights = [], []
        for h in range(self.heads):
            lo = h * self.d_head
            qs = ad.narrow(q, 1, lo, self.d_head)
            ks = ad.narrow(k, 1, lo, self.d_head)
            vs = ad.narrow(v, 1, lo, self.d_head)
            attn = ad.softmax(ad.mul(ad.matmul(qs, ad.transpose(ks)), scale), axis=1)
            outs.append(ad.matmul(attn, vs))
            weights.append(attn)
        mixed = ad.concat(outs, axis=1)
        self.last_weights = np.stack([w.data for w in weights])
        self.last_mixed = mixed.data.copy()
        return self.wo(mixed)

    def parameters(self) -> dict[str, Array]:
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(_prefixed(name, lin.parameters()))
        return out


class TransformerBlock:
    """Post-norm block: attention + residual + LN, position-wise FFN + residual + LN."""

    def __init__(self, d: int, heads: int, ff: int, rng: RngStream,
                 context_dim: int | None = None):
        self.attn = MultiHeadAttention(d, heads, rng, context_dim=context_dim)
        self.ln1 = LayerNorm(d)
        self.fc1 = Linear(d, ff, rng)
        self.fc2 = Linear(ff, d, rng)
        self.ln2 = LayerNorm(d)

    def __call__(self, q_seq: Array, ctx_seq: Array | None = None) -> Array:
        ctx = q_seq if ctx_seq is None else ctx_seq
        h = self.ln1(ad.add(q_seq, self.attn(q_seq, ctx)))
        ff = self.fc2(ad.relu(self.fc1(h)))
        return self.ln2(ad.add(h, ff))

    def parameters(self) -> dict[str, Array]:
        out = {}
        out.update(_prefixed("attn", self.attn.parameters()))
        out.update(_prefixed("ln1", self.ln1.parameters()))
        out.update(_prefixed("fc1", self.fc1.parameters()))
        out.update(_prefixed("fc2", self.fc2.parameters()))
        out.update(_prefixed("ln2", self.ln2.parameters()))
        return out


class LstmCell:
    def __init__(self, d_in: int, d_h: int, rng: RngStream):
        self.d_in = d_in
        self.d_h = d_h
        k = 1.0 / math.sqrt(d_h)
        self.wx = Array(rng.uniform(-k, k, (d_in, 4 * d_h)), requires_grad=True)
        self.wh = Array(rng.uniform(-k, k, (d_h, 4 * d_h)), requires_grad=True)
        self.b = Array(np.zeros((1, 4 * d_h)), requires_grad=True)

    def step(self, x: Array, h: Array, c: Array) -> tuple[Array, Array]:
        if x.shape != (1, self.d_in) or h.shape != (1, self.d_h):
            raise ShapeError(f"lstm_step got x{x.shape}, h{h.shape}; "
                             f"cell expects (1,{self.d_in}) and (1,{self.d_h})")
        z = ad.add(ad.add(ad.matmul(x, self.wx), ad.matmul(h, self.wh)), self.b)
        dh = self.d_h
        i = ad.sigmoid(ad.narrow(z, 1, 0, dh))
        f = ad.sigmoid(ad.narrow(z, 1, dh, dh))
        g = ad.tanh(ad.narrow(z, 1, 2 * dh, dh))
        o = ad.sigmoid(ad.narrow(z, 1, 3 * dh, dh))
        c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
        h2 = ad.mul(o, ad.tanh(c2))
        return h2, c2

    def parameters(self) -> dict[str, Array]:
        return {"wx": self.wx, "wh": self.wh, "b": self.b}


class BiLstmEncoder:
    """Two directional LSTM scans concatenated per position; output dim is 2x the
    per-direction hidden size."""

    def __init__(self, d_in: int, d_out: int, rng: RngStream):
        if d_out % 2 != 0:
            raise ShapeError("BiLSTM output dim must be even")
        self.d_out = d_out
        self.fwd = LstmCell(d_in, d_out // 2, rng)
        self.bwd = LstmCell(d_in, d_out // 2, rng)

    def __call__(self, seq: Array) -> Array:
        n = seq.shape[0]
        dh = self.d_out // 2
        zeros = Array(np.zeros((1, dh)))
        h, c = zeros, zeros
        fwd_states = []
        for t in range(n):
            h, c = self.fwd.step(ad.narrow(seq, 0, t, 1), h, c)
            fwd_states.append(h)
        h, c = zeros, zeros
        bwd_states: list[Array | None] = [None] * n
        for t in range(n - 1, -1, -1):
            h, c = self.bwd.step(ad.narrow(seq, 0, t, 1), h, c)
            bwd_states[t] = h
        rows = [ad.concat([fwd_states[t], bwd_states[t]], axis=1) for t in range(n)]
        return ad.concat(rows, axis=0)

    def parameters(self) -> dict[str, Array]:
        out = {}
        out.update(_prefixed("fwd", self.fwd.parameters()))
        out.update(_prefixed("bwd", self.bwd.parameters()))
        return out


@dataclass
class FusedOutputs:
    lang_seq: Array   # (n_tokens + 1, lang_dim), row 0 is the pooled-token slot
    vis_seq: Array    # (n_vis + 1, vis_dim), row 0 is the image-start slot
    h_cls: Array      # (1, pooled_dim)
    h_img: Array      # (1, pooled_dim)


class CrossModalEncoder:
    """Two input streams (language, vision) with co-attention alignment.

    The language stream prepends a pooled-summary token and adds learned
    positions; the vision stream prepends a learned image-start token and is
    deliberately position-free, so view order is exchangeable.
    """

    def __init__(self, vocab_size: int, vis_feat_dim: int, cfg: EncoderConfig,
                 rng: RngStream):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.vis_feat_dim = vis_feat_dim
        d_l, d_v = cfg.lang_dim, cfg.vis_dim
        self.tok_emb = Array(rng.normal(0, 0.02, (vocab_size, d_l)), requires_grad=True)
        self.pos_emb = Array(rng.normal(0, 0.02, (cfg.max_tokens, d_l)), requires_grad=True)
        self.img_token = Array(rng.normal(0, 0.02, (1, d_v)), requires_grad=True)
        self.vis_proj = Linear(vis_feat_dim, d_v, rng)
        self.lang_blocks = [TransformerBlock(d_l, cfg.heads, cfg.ff_mult * d_l, rng)
                            for _ in range(cfg.n_lang_blocks)]
        self.vis_blocks = [TransformerBlock(d_v, cfg.heads, cfg.ff_mult * d_v, rng)
                           for _ in range(cfg.n_vis_blocks)]
        self.align_blocks = [
            (TransformerBlock(d_l, cfg.heads, cfg.ff_mult * d_l, rng, context_dim=d_v),
             TransformerBlock(d_v, cfg.heads, cfg.ff_mult * d_v, rng, context_dim=d_l))
            for _ in range(cfg.n_align_blocks)
        ]
        self.pooler_cls = Linear(d_l, cfg.pooled_dim, rng)
        self.pooler_img = Linear(d_v, cfg.pooled_dim, rng)

    def _validate_ids(self, token_ids) -> list[int]:
        ids = [int(t) for t in token_ids]
        if not 1 <= len(ids) <= self.cfg.max_tokens - 1:
            raise ShapeError(f"token count {len(ids)} outside [1, {self.cfg.max_tokens - 1}]")
        for t in ids:
            if t < 0 or t >= self.vocab_size:
                raise VocabularyError(f"token id {t} outside vocabulary of {self.vocab_size}")
        return ids

    def encode_language(self, token_ids) -> Array:
        """Language self-stream only; reusable across visual inputs within one
        forward pass since it does not depend on the vision stream."""
        ids = [CLS_ID] + self._validate_ids(token_ids)
        x = ad.add(ad.gather_rows(self.tok_emb, ids),
                   ad.narrow(self.pos_emb, 0, 0, len(ids)))
        for blk in self.lang_blocks:
            x = blk(x)
        return x

    def encode(self, token_ids, vis: Array, lang_state: Array | None = None) -> FusedOutputs:
        if vis.ndim != 2 or vis.shape[0] < 1 or vis.shape[1] != self.vis_feat_dim:
            raise ShapeError(f"visual features must be (n>=1, {self.vis_feat_dim}), got {vis.shape}")
        lang = lang_state if lang_state is not None else self.encode_language(token_ids)
        v = ad.concat([self.img_token, self.vis_proj(vis)], axis=0)
        for blk in self.vis_blocks:
            v = blk(v)
        for lang_blk, vis_blk in self.align_blocks:
            lang_new = lang_blk(lang, v)
            v_new = vis_blk(v, lang)
            lang, v = lang_new, v_new
        h_cls = ad.tanh(self.pooler_cls(ad.narrow(lang, 0, 0, 1)))
        h_img = ad.tanh(self.pooler_img(ad.narrow(v, 0, 0, 1)))
        return FusedOutputs(lang_seq=lang, vis_seq=v, h_cls=h_cls, h_img=h_img)

    def parameters(self) -> dict[str, Array]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb, "img_token": self.img_token}
        out.update(_prefixed("vis_proj", self.vis_proj.parameters()))
        for i, blk in enumerate(self.lang_blocks):
            out.update(_prefixed(f"lang{i}", blk.parameters()))
        for i, blk in enumerate(self.vis_blocks):
            out.update(_prefixed(f"vis{i}", blk.parameters()))
        for i, (lb, vb) in enumerate(self.align_blocks):
            out.update(_prefixed(f"align{i}.lang", lb.parameters()))
            out.update(_prefixed(f"align{i}.vis", vb.parameters()))
        out.update(_prefixed("pooler_cls", self.pooler_cls.parameters()))
        out.update(_prefixed("pooler_img", self.pooler_img.parameters()))
        return out


def count_parameters(params: dict[str, Array]) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# Parameter checkpoint container
# ---------------------------------------------------------------------------
# Layout: 8-byte magic, u64 manifest length, JSON manifest, raw payload.
# The manifest records (name, shape, dtype, offset, nbytes) per entry plus a
# SHA-256 of the payload; entries are written name-sorted so identical
# parameters always produce identical bytes.

_CKPT_MAGIC = b"VLNPRM01"


def save_params(path, params: dict[str, Array], meta: dict | None = None) -> None:
    payload = bytearray()
    entries = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": len(payload),
            "nbytes": arr.nbytes,
        })
        payload.extend(arr.tobytes())
    manifest = {
        "version": 1,
        "entries": entries,
        "meta": meta or {},
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (blob_len,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + blob_len].decode())
    if manifest.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported container version")
    payload = raw[16 + blob_len:]
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload hash mismatch (corrupt checkpoint)")
    out = {}
    for e in manifest["entries"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return out, manifest["meta"]


def assign_params(model_params: dict[str, Array], loaded: dict[str, np.ndarray]) -> None:
    missing = sorted(set(model_params) - set(loaded))
    extra = sorted(set(loaded) - set(model_params))
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch; missing={missing[:4]} extra={extra[:4]}")
    for name, p in model_params.items():
        arr = loaded[name]
        if tuple(arr.shape) != p.shape:
            raise CheckpointError(f"shape mismatch for '{name}': {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
