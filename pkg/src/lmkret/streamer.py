"""Sliding-window streaming of landmark embeddings over long contexts.

Contexts longer than the encoder window are covered by overlapping windows.
Each window ends right after a landmark, every landmark is emitted by exactly
one window, and every emitted landmark outside the first window sees at least
``context_margin_tokens`` of preceding tokens inside its window.  Window
starts may fall mid-sentence: only context is truncated there, never an
emitted sentence.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import LandmarkedContext
from .encoder import EncoderModel, LandmarkEmbeddingSet, WindowTrace
from .tokenizer import BOS_ID, LMK_ID

EMBEDDING_SET_MAGIC = b"LMKEMB1\0"
EMBEDDING_SET_VERSION = 1


@dataclass(frozen=True)
class Window:
    token_start: int
    token_end: int
    emit_from: int  # first landmark index emitted by this window
    emit_to: int    # last landmark index emitted (inclusive)


@dataclass(frozen=True)
class WindowPlan:
    windows: tuple[Window, ...]
    context_margin_tokens: int
    w_max: int


def default_margin(w_max: int) -> int:
    return w_max // 2


def plan_windows(
    ctx: LandmarkedContext, w_max: int, context_margin_tokens: int | None = None
) -> WindowPlan:
    """Greedy window plan: each window reaches as far as the margin allows.

    Window starts sit ``context_margin_tokens`` before the previous window's
    end (clamped so the first emitted sentence still fits), so consecutive
    windows overlap by the margin except when a near-window-length sentence
    forces a later start.
    """
    if context_margin_tokens is None:
        context_margin_tokens = default_margin(w_max)
    margin = context_margin_tokens
    if not 0 <= margin < w_max:
        raise ValueError(f"margin {margin} must satisfy 0 <= margin < w_max ({w_max})")
    positions = ctx.landmark_positions
    prev = -1
    for i, pos in enumerate(positions):
        if pos - prev > w_max:
            raise ValueError(
                f"sentence {i} spans {pos - prev} tokens (incl. LMK), over w_max {w_max}"
            )
        prev = pos
    windows: list[Window] = []
    n = len(positions)
    f = 0
    prev_end = 0
    while f < n:
        if not windows:
            s = 0
        else:
            s = max(0, prev_end - margin)
            if positions[f] + 1 - s > w_max:
                s = positions[f] + 1 - w_max
        limit = s + w_max
        r = f
        while r + 1 < n and positions[r + 1] + 1 <= limit:
            r += 1
        e = positions[r] + 1
        windows.append(Window(token_start=s, token_end=e, emit_from=f, emit_to=r))
        prev_end = e
        f = r + 1
    return WindowPlan(windows=tuple(windows), context_margin_tokens=margin, w_max=w_max)


def plan_full_attention(ctx: LandmarkedContext, w_max: int) -> WindowPlan:
    """Single window over the whole context (no streaming)."""
    if ctx.num_tokens > w_max:
        raise ValueError(
            f"context of {ctx.num_tokens} tokens exceeds w_max {w_max}; "
            "full-attention mode needs a model window at least as long"
        )
    n = len(ctx.landmark_positions)
    win = Window(token_start=0, token_end=ctx.num_tokens, emit_from=0, emit_to=n - 1)
    return WindowPlan(windows=(win,), context_margin_tokens=0, w_max=w_max)


def validate_plan(plan: WindowPlan, ctx: LandmarkedContext) -> None:
    """Exhaustive check of the plan invariants; raises on the first violation.

    Walks every landmark and confirms unique emission, window fit, end
    alignment, whole-sentence containment, and the context margin.  Written
    directly from the invariants, independent of the greedy planner.
    """
    positions = ctx.landmark_positions
    emitted: dict[int, int] = {}
    prev_start = -1
    for wi, w in enumerate(plan.windows):
        if not (0 <= w.token_start < w.token_end <= ctx.num_tokens):
            raise AssertionError(f"window {wi}: bad token range {w}")
        if w.token_end - w.token_start > plan.w_max:
            raise AssertionError(f"window {wi}: length exceeds w_max")
        if ctx.token_stream[w.token_end - 1] != LMK_ID:
            raise AssertionError(f"window {wi}: end not aligned to a landmark")
        if w.token_start <= prev_start:
            raise AssertionError(f"window {wi}: starts not strictly increasing")
        prev_start = w.token_start
        if not (0 <= w.emit_from <= w.emit_to < len(positions)):
            raise AssertionError(f"window {wi}: bad emit range")
        for i in range(w.emit_from, w.emit_to + 1):
            if i in emitted:
                raise AssertionError(f"landmark {i} emitted by windows {emitted[i]} and {wi}")
            emitted[i] = wi
            pos = positions[i]
            sent_start = positions[i - 1] + 1 if i > 0 else 0
            if not (w.token_start <= sent_start and pos < w.token_end):
                raise AssertionError(f"landmark {i}: sentence not inside window {wi}")
            if wi > 0 and pos - w.token_start < plan.context_margin_tokens:
                raise AssertionError(
                    f"landmark {i}: margin {pos - w.token_start} below "
                    f"{plan.context_margin_tokens} in window {wi}"
                )
    if len(emitted) != len(positions):
        missing = sorted(set(range(len(positions))) - set(emitted))
        raise AssertionError(f"landmarks never emitted: {missing}")


def stream_embed(
    ctx: LandmarkedContext,
    model: EncoderModel,
    plan: WindowPlan,
    record: bool = False,
    doc_id: str | None = None,
) -> LandmarkEmbeddingSet:
    """Embed every sentence of ``ctx`` window by window.

    Each landmark's embedding is computed inside the window that emits it;
    windows are processed in plan order, so results are deterministic for a
    fixed model and plan.
    """
    if plan.w_max > model.max_window:
        raise ValueError(
            f"plan windows up to {plan.w_max} tokens, model max_window {model.max_window}"
        )
    n = len(ctx.landmark_positions)
    vectors = np.zeros((n, model.d_model), dtype=model.dtype)
    window_ids = np.full(n, -1, dtype=np.int64)
    traces: list[WindowTrace] | None = [] if record else None
    for wi, w in enumerate(plan.windows):
        ids = [BOS_ID] + list(ctx.token_stream[w.token_start:w.token_end])
        hidden, trace = model.forward_hidden(ids, record=record)
        emit_rows = []
        for i in range(w.emit_from, w.emit_to + 1):
            hpos = ctx.landmark_positions[i] - w.token_start + 1
            vectors[i] = hidden[hpos]
            window_ids[i] = wi
            emit_rows.append((i, hpos))
        if record:
            traces.append(WindowTrace(trace=trace, seq_len=len(ids), emit_rows=emit_rows))
    if (window_ids < 0).any():
        raise AssertionError("plan did not emit every landmark")
    return LandmarkEmbeddingSet(
        vectors=vectors,
        sentence_indices=np.arange(n, dtype=np.int64),
        window_ids=window_ids,
        doc_id=doc_id,
        traces=traces,
    )


def embed_document(
    ctx: LandmarkedContext,
    model: EncoderModel,
    w_max: int | None = None,
    context_margin_tokens: int | None = None,
    record: bool = False,
    doc_id: str | None = None,
) -> LandmarkEmbeddingSet:
    """Plan-and-embed convenience wrapper used by indexing and training."""
    if w_max is None:
        w_max = model.max_window
    plan = plan_windows(ctx, w_max, context_margin_tokens)
    return stream_embed(ctx, model, plan, record=record, doc_id=doc_id)


# ------------------------------------------------------------------ file IO


def save_embedding_set(
    es: LandmarkEmbeddingSet, path: str | Path, seed: int = 0, config_hash: str = ""
) -> None:
    """Write an embedding set: magic, JSON header, f32 LE matrix, index column."""
    header = {
        "format_version": EMBEDDING_SET_VERSION,
        "doc_id": es.doc_id,
        "d": int(es.dimension),
        "count": int(es.count),
        "seed": seed,
        "config_hash": config_hash,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(EMBEDDING_SET_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(es.vectors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(es.sentence_indices, dtype="<i4").tobytes())


def load_embedding_set(path: str | Path) -> LandmarkEmbeddingSet:
    data = Path(path).read_bytes()
    if data[: len(EMBEDDING_SET_MAGIC)] != EMBEDDING_SET_MAGIC:
        raise ValueError(f"{path}: not an embedding-set file (bad magic)")
    hlen = struct.unpack("<I", data[8:12])[0]
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    if header["format_version"] != EMBEDDING_SET_VERSION:
        raise ValueError(f"{path}: unsupported embedding-set version")
    d, count = header["d"], header["count"]
    base = 12 + hlen
    vec_bytes = 4 * d * count
    raw = data[base : base + vec_bytes]
    idx_raw = data[base + vec_bytes : base + vec_bytes + 4 * count]
    if len(raw) != vec_bytes or len(idx_raw) != 4 * count:
        raise ValueError(f"{path}: truncated embedding data")
    vectors = np.frombuffer(raw, dtype="<f4").reshape(count, d).copy()
    sent_idx = np.frombuffer(idx_raw, dtype="<i4").astype(np.int64)
    return LandmarkEmbeddingSet(
        vectors=vectors,
        sentence_indices=sent_idx,
        window_ids=np.full(count, -1, dtype=np.int64),
        doc_id=header["doc_id"],
    )
