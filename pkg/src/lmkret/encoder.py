"""Causal sequence encoder with per-sentence landmark extraction.

A small pre-norm transformer (learned absolute positions, causal attention)
implemented directly in numpy, with a hand-written backward pass so gradient
correctness can be checked against finite differences.  Landmark embeddings
are the final-layer hidden states at LMK token positions; query embeddings
come from a single trailing LMK appended to the query.

The core runs on batches padded to a common length.  Padding always sits at
the end of a sequence, so under causal masking no real position ever reads a
pad and pad rows receive zero gradient; batching is purely a throughput
device.

Every sequence is encoded as ``BOS + tokens``, so a window of W tokens uses
W + 1 positions.  Scoring uses raw inner products (no normalization).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import LandmarkedContext
from .tokenizer import BOS_ID, LMK_ID, PAD_ID, Tokenizer

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715
_LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"LMKCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Hyperparameters; ``max_window`` counts context tokens (BOS excluded).

    Positions combine learned absolute embeddings with a learned per-head
    relative-distance attention bias (``rel_buckets`` log-spaced distance
    buckets).  The bias is what lets a landmark token cheaply learn to focus
    on its own sentence; the absolute embeddings carry window-level
    structure and are only trained up to the lengths seen in training.
    """

    vocab_size: int
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_window: int = 512
    rel_buckets: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if min(self.vocab_size, self.n_layers, self.d_model, self.d_ff,
               self.max_window, self.rel_buckets) < 1:
            raise ValueError("all hyperparameters must be positive")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_window": self.max_window,
            "rel_buckets": self.rel_buckets,
        }


def distance_buckets(T: int, n_buckets: int) -> np.ndarray:
    """Bucket index per (query, key) causal distance.

    Distances 0..7 get exact buckets; beyond that, log2-spaced buckets up to
    the cap, so any sequence length maps into a fixed table.
    """
    t = np.arange(T)
    dist = np.maximum(t[:, None] - t[None, :], 0)
    exact = 8
    with np.errstate(divide="ignore"):
        logb = exact + np.floor(np.log2(np.maximum(dist, 1) / exact)).astype(np.int64)
    buckets = np.where(dist < exact, dist, np.clip(logb, exact, n_buckets - 1))
    return buckets.astype(np.int64)


@dataclass
class EmbeddingVector:
    """A single embedding plus where it came from."""

    values: np.ndarray
    source: tuple | str


@dataclass
class LandmarkEmbeddingSet:
    """Per-sentence landmark embeddings with provenance.

    ``traces`` is populated only when the forward pass recorded activations
    for backpropagation; each entry maps rows of ``vectors`` back to hidden
    positions inside one encoded window.
    """

    vectors: np.ndarray  # (count, d)
    sentence_indices: np.ndarray  # (count,) int64
    window_ids: np.ndarray  # (count,) int64
    doc_id: str | None = None
    traces: list["WindowTrace"] | None = None

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.sentence_indices) != len(self.vectors):
            raise ValueError("vectors and sentence_indices must align")

    @property
    def count(self) -> int:
        return len(self.vectors)

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]


@dataclass
class WindowTrace:
    """Backprop bookkeeping for one encoded window."""

    trace: dict
    seq_len: int
    emit_rows: list[tuple[int, int]]  # (row in embedding set, hidden position)


def _layernorm_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_bwd(dy, g, cache):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dy, x, t):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


class EncoderModel:
    """From-scratch causal transformer over a fixed vocabulary.

    Parameters live in ``self.params`` (name -> array, fixed order).  The
    forward pass optionally records activations; ``backward_batch`` turns a
    gradient w.r.t. final hidden states into parameter gradients.
    """

    def __init__(
        self,
        config: EncoderConfig,
        seed: int = 0,
        dtype=np.float32,
        init_scale: float = 0.02,
    ):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = False
        rng = np.random.default_rng(seed)
        d, ff, L = config.d_model, config.d_ff, config.n_layers

        def w(*shape):
            return (rng.standard_normal(shape) * init_scale).astype(self.dtype)

        def zeros(*shape):
            return np.zeros(shape, dtype=self.dtype)

        def ones(*shape):
            return np.ones(shape, dtype=self.dtype)

        p: dict[str, np.ndarray] = {}
        p["tok_emb"] = w(config.vocab_size, d)
        p["pos_emb"] = w(config.max_window + 1, d)
        for i in range(L):
            pre = f"layers.{i}"
            p[f"{pre}.ln1.g"] = ones(d)
            p[f"{pre}.ln1.b"] = zeros(d)
            p[f"{pre}.attn.rel_bias"] = zeros(config.n_heads, config.rel_buckets)
            p[f"{pre}.attn.wq"] = w(d, d)
            p[f"{pre}.attn.bq"] = zeros(d)
            p[f"{pre}.attn.wk"] = w(d, d)
            p[f"{pre}.attn.bk"] = zeros(d)
            p[f"{pre}.attn.wv"] = w(d, d)
            p[f"{pre}.attn.bv"] = zeros(d)
            p[f"{pre}.attn.wo"] = w(d, d)
            p[f"{pre}.attn.bo"] = zeros(d)
            p[f"{pre}.ln2.g"] = ones(d)
            p[f"{pre}.ln2.b"] = zeros(d)
            p[f"{pre}.ffn.w1"] = w(d, ff)
            p[f"{pre}.ffn.b1"] = zeros(ff)
            p[f"{pre}.ffn.w2"] = w(ff, d)
            p[f"{pre}.ffn.b2"] = zeros(d)
        p["ln_f.g"] = ones(d)
        p["ln_f.b"] = zeros(d)
        self.params = p

    # ------------------------------------------------------------------ core

    @property
    def d_model(self) -> int:
        return self.config.d_model

    @property
    def max_window(self) -> int:
        return self.config.max_window

    def check_finite(self) -> None:
        for name, arr in self.params.items():
            if not np.isfinite(arr).all():
                raise FloatingPointError(f"non-finite values in parameter {name!r}")

    def forward_batch(
        self, sequences: Sequence[Sequence[int]], record: bool = False, pad_to: int | None = None
    ):
        """Encode a batch of id sequences (each already starting with BOS).

        Sequences are right-padded with PAD to a common length.  Returns
        ``(hidden, lens, trace)`` with ``hidden`` of shape (B, T, d); rows at
        or beyond a sequence's length are padding output and must be ignored.
        """
        if not sequences:
            raise ValueError("cannot encode an empty batch")
        lens = np.array([len(s) for s in sequences], dtype=np.int64)
        if lens.min() == 0:
            raise ValueError("cannot encode an empty sequence")
        cap = self.config.max_window + 1
        if lens.max() > cap:
            raise ValueError(
                f"sequence of {int(lens.max())} tokens exceeds window capacity "
                f"{cap} (max_window {self.config.max_window} + BOS)"
            )
        T = int(lens.max()) if pad_to is None else int(pad_to)
        if T < lens.max() or T > cap:
            raise ValueError(f"pad_to {pad_to} outside [{int(lens.max())}, {cap}]")
        B = len(sequences)
        ids = np.full((B, T), PAD_ID, dtype=np.int64)
        for i, s in enumerate(sequences):
            ids[i, : len(s)] = s

        p = self.params
        cfg = self.config
        d = cfg.d_model
        H, dh = cfg.n_heads, d // cfg.n_heads
        scale = 1.0 / np.sqrt(dh)

        x = p["tok_emb"][ids] + p["pos_emb"][:T]
        mask = np.tril(np.ones((T, T), dtype=bool))
        buckets = distance_buckets(T, cfg.rel_buckets)
        layer_caches = []
        for i in range(cfg.n_layers):
            pre = f"layers.{i}"
            n1, ln1_cache = _layernorm_fwd(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            flat = n1.reshape(B * T, d)
            q = (flat @ p[f"{pre}.attn.wq"] + p[f"{pre}.attn.bq"]).reshape(B, T, d)
            k = (flat @ p[f"{pre}.attn.wk"] + p[f"{pre}.attn.bk"]).reshape(B, T, d)
            v = (flat @ p[f"{pre}.attn.wv"] + p[f"{pre}.attn.bv"]).reshape(B, T, d)
            qh = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            kh = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            vh = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
            scores = scores + p[f"{pre}.attn.rel_bias"][:, buckets][None]
            scores = np.where(mask, scores, -np.inf)
            m = scores.max(-1, keepdims=True)
            e = np.exp(scores - m)
            attn = e / e.sum(-1, keepdims=True)
            ctxh = attn @ vh
            ctx = ctxh.transpose(0, 2, 1, 3).reshape(B, T, d)
            x = x + (ctx.reshape(B * T, d) @ p[f"{pre}.attn.wo"]).reshape(B, T, d) + p[f"{pre}.attn.bo"]

            n2, ln2_cache = _layernorm_fwd(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            z1 = (n2.reshape(B * T, d) @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"]).reshape(B, T, cfg.d_ff)
            a1, tanh_cache = _gelu_fwd(z1)
            x = x + (a1.reshape(B * T, cfg.d_ff) @ p[f"{pre}.ffn.w2"]).reshape(B, T, d) + p[f"{pre}.ffn.b2"]

            if record:
                layer_caches.append(
                    dict(ln1=ln1_cache, n1=n1, qh=qh, kh=kh, vh=vh, attn=attn,
                         ctx=ctx, ln2=ln2_cache, n2=n2, z1=z1, tanh=tanh_cache, a1=a1)
                )
        hidden, lnf_cache = _layernorm_fwd(x, p["ln_f.g"], p["ln_f.b"])
        trace = None
        if record:
            trace = dict(ids=ids, B=B, T=T, lens=lens, layers=layer_caches, ln_f=lnf_cache)
        return hidden, lens, trace

    def forward_hidden(
        self, ids: Sequence[int], record: bool = False, pad_to: int | None = None
    ):
        """Single-sequence convenience wrapper around ``forward_batch``.

        ``pad_to`` selects identical-arithmetic mode: the sequence is padded
        to a fixed length before computing, making the results for a shared
        prefix bit-identical across different sequence lengths (BLAS kernels
        otherwise vary with array shape in the last bits).
        """
        hidden, lens, trace = self.forward_batch([list(ids)], record=record, pad_to=pad_to)
        return hidden[0, : int(lens[0])], trace

    def backward_batch(self, trace: dict, d_hidden: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients from a gradient w.r.t. final hidden states.

        ``d_hidden`` has shape (B, T, d) matching the recorded batch; rows at
        padding positions must be zero (they are never read forward, so any
        gradient there would be spurious).
        """
        if trace is None:
            raise ValueError("gradients requested without a recorded forward pass")
        p = self.params
        cfg = self.config
        d = cfg.d_model
        H, dh = cfg.n_heads, d // cfg.n_heads
        scale = 1.0 / np.sqrt(dh)
        B, T = trace["B"], trace["T"]
        if d_hidden.shape != (B, T, d):
            raise ValueError(f"d_hidden shape {d_hidden.shape} != {(B, T, d)}")
        grads = {name: np.zeros_like(arr) for name, arr in self.params.items()}

        dx = d_hidden.astype(self.dtype, copy=False)
        dx, dg, db = _layernorm_bwd(dx, p["ln_f.g"], trace["ln_f"])
        grads["ln_f.g"] += dg
        grads["ln_f.b"] += db

        for i in reversed(range(cfg.n_layers)):
            pre = f"layers.{i}"
            c = trace["layers"][i]
            # ffn branch
            da1 = (dx.reshape(B * T, d) @ p[f"{pre}.ffn.w2"].T).reshape(B, T, cfg.d_ff)
            grads[f"{pre}.ffn.w2"] += c["a1"].reshape(B * T, cfg.d_ff).T @ dx.reshape(B * T, d)
            grads[f"{pre}.ffn.b2"] += dx.sum((0, 1))
            dz1 = _gelu_bwd(da1, c["z1"], c["tanh"])
            dn2 = (dz1.reshape(B * T, cfg.d_ff) @ p[f"{pre}.ffn.w1"].T).reshape(B, T, d)
            grads[f"{pre}.ffn.w1"] += c["n2"].reshape(B * T, d).T @ dz1.reshape(B * T, cfg.d_ff)
            grads[f"{pre}.ffn.b1"] += dz1.sum((0, 1))
            dres, dg2, db2 = _layernorm_bwd(dn2, p[f"{pre}.ln2.g"], c["ln2"])
            grads[f"{pre}.ln2.g"] += dg2
            grads[f"{pre}.ln2.b"] += db2
            dx = dx + dres
            # attention branch
            dctx = (dx.reshape(B * T, d) @ p[f"{pre}.attn.wo"].T).reshape(B, T, d)
            grads[f"{pre}.attn.wo"] += c["ctx"].reshape(B * T, d).T @ dx.reshape(B * T, d)
            grads[f"{pre}.attn.bo"] += dx.sum((0, 1))
            dctxh = dctx.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            dattn = dctxh @ c["vh"].transpose(0, 1, 3, 2)
            dvh = c["attn"].transpose(0, 1, 3, 2) @ dctxh
            ds = c["attn"] * (dattn - (dattn * c["attn"]).sum(-1, keepdims=True))
            ds_sum = ds.sum(0)
            buckets = distance_buckets(T, cfg.rel_buckets).ravel()
            for h in range(H):
                grads[f"{pre}.attn.rel_bias"][h] += np.bincount(
                    buckets, weights=ds_sum[h].ravel().astype(np.float64),
                    minlength=cfg.rel_buckets,
                ).astype(self.dtype)
            dqh = (ds @ c["kh"]) * scale
            dkh = (ds.transpose(0, 1, 3, 2) @ c["qh"]) * scale
            dq = dqh.transpose(0, 2, 1, 3).reshape(B * T, d)
            dk = dkh.transpose(0, 2, 1, 3).reshape(B * T, d)
            dv = dvh.transpose(0, 2, 1, 3).reshape(B * T, d)
            n1flat = c["n1"].reshape(B * T, d)
            dn1 = dq @ p[f"{pre}.attn.wq"].T + dk @ p[f"{pre}.attn.wk"].T + dv @ p[f"{pre}.attn.wv"].T
            grads[f"{pre}.attn.wq"] += n1flat.T @ dq
            grads[f"{pre}.attn.bq"] += dq.sum(0)
            grads[f"{pre}.attn.wk"] += n1flat.T @ dk
            grads[f"{pre}.attn.bk"] += dk.sum(0)
            grads[f"{pre}.attn.wv"] += n1flat.T @ dv
            grads[f"{pre}.attn.bv"] += dv.sum(0)
            dres, dg1, db1 = _layernorm_bwd(dn1.reshape(B, T, d), p[f"{pre}.ln1.g"], c["ln1"])
            grads[f"{pre}.ln1.g"] += dg1
            grads[f"{pre}.ln1.b"] += db1
            dx = dx + dres
        # embeddings
        np.add.at(grads["tok_emb"], trace["ids"], dx)
        grads["pos_emb"][:T] += dx.sum(0)
        return grads

    def backward_hidden(self, trace: dict | None, d_hidden: np.ndarray) -> dict[str, np.ndarray]:
        """Single-sequence wrapper: pads ``d_hidden`` (T_valid, d) with zeros."""
        if trace is None:
            raise ValueError("gradients requested without a recorded forward pass")
        T = trace["T"]
        valid = int(trace["lens"][0])
        full = np.zeros((1, T, self.d_model), dtype=self.dtype)
        full[0, :valid] = d_hidden[:valid]
        return self.backward_batch(trace, full)

    def parameter_gradients(
        self, pieces: Iterable[tuple[dict | None, np.ndarray]]
    ) -> dict[str, np.ndarray]:
        """Sum parameter gradients over (trace, d_hidden) pairs.

        Summation order follows the iteration order, so a fixed piece order
        gives bit-identical accumulations.  Each d_hidden may be (B, T, d)
        for a batched trace or (T, d) for a single-sequence trace.
        """
        total = {name: np.zeros_like(arr) for name, arr in self.params.items()}
        any_piece = False
        for trace, d_hidden in pieces:
            any_piece = True
            if d_hidden.ndim == 2:
                g = self.backward_hidden(trace, d_hidden)
            else:
                g = self.backward_batch(trace, d_hidden)
            for name in total:
                total[name] += g[name]
        if not any_piece:
            raise ValueError("gradients requested without a recorded forward pass")
        return total

    # ----------------------------------------------------------- embeddings

    def encode_window(
        self,
        ctx: LandmarkedContext,
        token_start: int = 0,
        token_end: int | None = None,
        record: bool = False,
        doc_id: str | None = None,
        window_id: int = 0,
        pad_to: int | None = None,
    ) -> LandmarkEmbeddingSet:
        """Encode one token slice of a landmarked context.

        The slice must fit the window and contain at least one landmark.
        Causal masking means each landmark embedding depends only on slice
        tokens at or before its position.  ``pad_to`` selects the
        identical-arithmetic mode of ``forward_hidden``.
        """
        if token_end is None:
            token_end = ctx.num_tokens
        if not (0 <= token_start < token_end <= ctx.num_tokens):
            raise ValueError(f"invalid token slice [{token_start}, {token_end})")
        length = token_end - token_start
        if length > self.config.max_window:
            raise ValueError(
                f"slice of {length} tokens exceeds max_window {self.config.max_window}"
            )
        marks = [
            (i, pos) for i, pos in enumerate(ctx.landmark_positions)
            if token_start <= pos < token_end
        ]
        if not marks:
            raise ValueError("slice contains no landmark positions")
        ids = [BOS_ID] + list(ctx.token_stream[token_start:token_end])
        hidden, trace = self.forward_hidden(ids, record=record, pad_to=pad_to)
        rows = [pos - token_start + 1 for _, pos in marks]
        vectors = hidden[rows].copy()
        sent_idx = np.array([i for i, _ in marks], dtype=np.int64)
        traces = None
        if record:
            traces = [WindowTrace(trace=trace, seq_len=len(ids),
                                  emit_rows=[(r, row) for r, row in enumerate(rows)])]
        return LandmarkEmbeddingSet(
            vectors=vectors,
            sentence_indices=sent_idx,
            window_ids=np.full(len(rows), window_id, dtype=np.int64),
            doc_id=doc_id,
            traces=traces,
        )

    def passage_sequence(self, text: str, tokenizer: Tokenizer) -> list[int]:
        """BOS + tokens + trailing LMK: the single-landmark encoding form."""
        ids = tokenizer.tokenize(text)
        if not ids:
            raise ValueError(f"text tokenizes to zero tokens: {text!r}")
        if len(ids) + 1 > self.config.max_window:
            raise ValueError(
                f"passage of {len(ids)} tokens (+LMK) exceeds max_window "
                f"{self.config.max_window}"
            )
        return [BOS_ID] + ids + [LMK_ID]

    def encode_passage(self, text: str, tokenizer: Tokenizer, record: bool = False):
        """Single-landmark embedding of a whole passage (pairwise training form).

        Returns ``(EmbeddingVector, trace, hidden_position)``; the trace is
        None unless recording.
        """
        seq = self.passage_sequence(text, tokenizer)
        hidden, trace = self.forward_hidden(seq, record=record)
        vec = EmbeddingVector(values=hidden[-1].copy(), source=("passage", text[:40]))
        return vec, trace, len(seq) - 1

    def encode_query(self, query: str, tokenizer: Tokenizer, record: bool = False):
        """Embed a query via a single trailing LMK.

        Returns ``(EmbeddingVector, trace, hidden_position)``.
        """
        if not query.strip():
            raise ValueError("query is empty")
        vec, trace, pos = self.encode_passage(query, tokenizer, record=record)
        vec.source = ("query",)
        return vec, trace, pos

    def encode_passages_batch(self, texts: Sequence[str], tokenizer: Tokenizer, record: bool = False):
        """Single-landmark embeddings for many texts in one padded batch.

        Returns ``(vectors (n, d), positions, trace)`` where positions[i] is
        the hidden index of text i's landmark.
        """
        seqs = [self.passage_sequence(t, tokenizer) for t in texts]
        hidden, lens, trace = self.forward_batch(seqs, record=record)
        positions = lens - 1
        vectors = hidden[np.arange(len(seqs)), positions].copy()
        return vectors, positions, trace


# ------------------------------------------------------------------ file IO


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(
    model: EncoderModel,
    tokenizer: Tokenizer,
    path: str | Path,
    seed: int = 0,
    config_hash: str = "",
) -> None:
    """Write model + vocabulary: magic, JSON header, float32 LE arrays."""
    manifest = []
    offset = 0
    blobs = []
    for name, arr in model.params.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "hyperparameters": model.config.to_dict(),
        "vocabulary": tokenizer.words,
        "manifest": manifest,
        "seed": seed,
        "config_hash": config_hash,
        "dtype": "<f4",
    }
    hb = _header_bytes(header)
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path, dtype=np.float32):
    """Read a checkpoint; returns ``(model, tokenizer, header)``.

    Stored values are float32, so converting to a wider in-memory dtype and
    saving again reproduces the file byte for byte.
    """
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    hlen = struct.unpack("<I", data[8:12])[0]
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['format_version']}")
    config = EncoderConfig(**header["hyperparameters"])
    tokenizer = Tokenizer(header["vocabulary"])
    if tokenizer.vocab_size != config.vocab_size:
        raise ValueError(
            f"{path}: vocabulary size {tokenizer.vocab_size} does not match "
            f"hyperparameters ({config.vocab_size})"
        )
    model = EncoderModel(config, seed=0, dtype=dtype)
    base = 12 + hlen
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in model.params:
            raise ValueError(f"{path}: unknown parameter {name!r} in manifest")
        n = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        raw = data[start : start + 4 * n]
        if len(raw) != 4 * n:
            raise ValueError(f"{path}: truncated parameter data for {name!r}")
        model.params[name] = (
            np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
        )
    return model, tokenizer, header
