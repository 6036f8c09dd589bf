"""Three-stage curriculum training of the landmark encoder.

Stage I (distant supervision) trains on query/passage pairs, each passage
encoded with a single trailing landmark, against hard negatives plus
in-batch negatives.  Stage II (weak supervision) shuffles passages into
pseudo long documents and discriminates the known-relevant passage's
landmarks against every other landmark in the document.  Stage III
(fine-tuning) uses real long documents with synthesized queries targeting
1-5 consecutive sentences.

Stages II and III share one step implementation: stream the document's
landmark embeddings, treat the target span's landmarks as positives under
the position-aware weighting, and backpropagate through every window.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .corpus import Corpus, landmark_document, segment_sentences
from .data import PairExample, PseudoDocExample, Stage3Data, SyntheticExample
from .encoder import EncoderModel, save_checkpoint
from .objective import ContrastiveInstance, PositionalWeighting, loss_gradients, position_aware_loss
from .streamer import default_margin, embed_document
from .synthdata import STOPWORDS, rule_based_query
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

STAGES = ("I", "II", "III")

# Pseudo-document composition defaults at desk scale; the published recipe
# (40 hard + 120 random, 16k-token documents) remains available as a
# configuration.
STAGE2_NUM_HARD = 8
STAGE2_NUM_RANDOM = 24
STAGE2_BUDGET_TOKENS = 2048
PAPER_STAGE2_NUM_HARD = 40
PAPER_STAGE2_NUM_RANDOM = 120
PAPER_STAGE2_BUDGET_TOKENS = 16384


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class GenerationClient(Protocol):
    """Pluggable text-generation backend for query synthesis."""

    def complete(self, prompt: str) -> str: ...


def load_query_prompt() -> str:
    return resources.files("lmkret").joinpath("prompts/query_generation.txt").read_text("utf-8")


@dataclass
class StageConfig:
    """Per-stage knobs; reported reference values are lr 1e-4, weight decay
    1e-6, stage-I batch 32, and 64-step gradient accumulation for the long
    stages."""

    steps: int
    batch_size: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-6
    grad_accum: int = 1
    alpha: float = 1.0
    mode: str = "weighted_log"
    temperature: float = 1.0
    hard_negatives_per_positive: int = 15
    in_batch_negatives: bool = True
    warmup_fraction: float = 0.05

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("steps, batch_size, grad_accum must be positive")


@dataclass
class TrainConfig:
    stages: tuple[str, ...]
    stage_configs: dict[str, StageConfig]
    seed: int = 0
    checkpoint_every: int = 0  # optimizer steps; 0 = final checkpoint only
    train_window: int | None = None  # cap on streaming window during training
    context_margin: int | None = None
    max_sentence_tokens: int = 256
    deterministic: bool = True

    def __post_init__(self):
        self.stages = tuple(self.stages)
        for s in self.stages:
            if s not in STAGES:
                raise ValueError(f"unknown stage {s!r}; expected subset of {STAGES}")
            if s not in self.stage_configs:
                raise ValueError(f"no StageConfig for stage {s}")


@dataclass
class TrainResult:
    model: EncoderModel
    metrics: list[dict]
    metrics_path: Path | None
    checkpoint_paths: list[Path]


# --------------------------------------------------------------- optimizer


class AdamW:
    """Adaptive moments with decoupled weight decay and linear warmup.

    Moments are kept in float64; updates are validated finite before being
    applied, so a diverging step never corrupts the parameters.
    """

    def __init__(self, model: EncoderModel, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 warmup_steps: int = 0):
        self.model = model
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in model.params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in model.params.items()}

    def current_lr(self) -> float:
        if self.warmup_steps > 0 and self.t < self.warmup_steps:
            return self.lr * (self.t + 1) / self.warmup_steps
        return self.lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        lr_t = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        updates = {}
        for name, p in self.model.params.items():
            g = grads[name].astype(np.float64)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            upd = lr_t * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)
            if not np.isfinite(upd).all():
                raise TrainingDiverged(f"non-finite update for parameter {name!r}")
            updates[name] = upd
        for name, p in self.model.params.items():
            self.model.params[name] = (p.astype(np.float64) - updates[name]).astype(p.dtype)


# --------------------------------------------------------- batch construction


@dataclass
class Stage1Batch:
    instances: list[ContrastiveInstance]
    trace: dict | None  # batched passage trace
    positions: np.ndarray  # landmark position per unique passage
    candidate_rows: list[list[int]]  # per instance: unique-passage row per candidate
    query_trace: dict | None
    query_positions: np.ndarray
    sampled_with_replacement: bool


def build_stage1_batch(
    pairs: Sequence[PairExample],
    model: EncoderModel,
    tokenizer: Tokenizer,
    hard_negatives_per_positive: int,
    in_batch: bool,
    rng: np.random.Generator,
    temperature: float = 1.0,
    record: bool = False,
) -> Stage1Batch:
    """One contrastive instance per query over single-landmark embeddings.

    Candidates for query i are its positive, its sampled hard negatives, and
    (when ``in_batch`` is set) every other pair's positive and negatives.  A
    negative textually identical to the positive is dropped and resampled;
    pairs short on distinct negatives sample with replacement and the batch
    is flagged.
    """
    if not pairs:
        raise ValueError("empty batch")
    if hard_negatives_per_positive == 0 and (not in_batch or len(pairs) == 1):
        raise ValueError("no negatives: need hard negatives or an in-batch of >= 2 queries")
    flagged = False
    chosen_negs: list[list[str]] = []
    for pair in pairs:
        pool = [n for n in pair.hard_negatives if n != pair.positive]
        k = hard_negatives_per_positive
        if len(pool) >= k:
            idx = rng.choice(len(pool), size=k, replace=False)
        elif pool:
            flagged = True
            idx = rng.choice(len(pool), size=k, replace=True)
        else:
            if k > 0:
                raise ValueError("pair has no usable hard negatives")
            idx = np.zeros(0, dtype=np.int64)
        chosen_negs.append([pool[int(i)] for i in idx])

    unique: dict[str, int] = {}

    def uid(text: str) -> int:
        if text not in unique:
            unique[text] = len(unique)
        return unique[text]

    per_pair_rows = []
    for pair, negs in zip(pairs, chosen_negs):
        per_pair_rows.append(( uid(pair.positive), [uid(n) for n in negs] ))

    texts = list(unique.keys())
    vectors, positions, trace = model.encode_passages_batch(texts, tokenizer, record=record)
    qvecs, qpos, qtrace = model.encode_passages_batch(
        [p.query for p in pairs], tokenizer, record=record
    )

    instances = []
    candidate_rows = []
    for i, (pos_row, neg_rows) in enumerate(per_pair_rows):
        rows = [pos_row] + list(neg_rows)
        if in_batch:
            pos_text = pairs[i].positive
            for j, (opos, onegs) in enumerate(per_pair_rows):
                if j == i:
                    continue
                for r, text_owner in [(opos, pairs[j].positive)] + [
                    (nr, chosen_negs[j][t]) for t, nr in enumerate(onegs)
                ]:
                    if text_owner == pos_text:
                        continue
                    rows.append(r)
        instances.append(
            ContrastiveInstance(
                query_embedding=qvecs[i],
                candidate_embeddings=vectors[rows],
                positive_indices=(0,),
                temperature=temperature,
            )
        )
        candidate_rows.append(rows)
    return Stage1Batch(
        instances=instances,
        trace=trace,
        positions=positions,
        candidate_rows=candidate_rows,
        query_trace=qtrace,
        query_positions=qpos,
        sampled_with_replacement=flagged,
    )


def _passage_cost(text: str, tokenizer: Tokenizer, max_sentence_tokens: int) -> int:
    """Landmarked token count: text tokens plus one landmark per sentence."""
    sents = segment_sentences(text, tokenizer, max_sentence_tokens)
    return sum(s.token_count for s in sents) + len(sents)


def _ensure_terminal(text: str) -> str:
    t = text.strip()
    return t if t and t[-1] in ".!?;" else t + "."


def build_stage2_pseudodoc(
    pair: PairExample,
    random_pool: Sequence[str],
    num_hard: int,
    num_random: int,
    budget_tokens: int,
    tokenizer: Tokenizer,
    rng: np.random.Generator,
    max_sentence_tokens: int = 256,
) -> PseudoDocExample:
    """Compose a pseudo long document around the pair's positive passage.

    Hard negatives and random pool passages are shuffled together, the
    positive is inserted at a uniformly random slot, and the document is
    truncated from the tail (never dropping the positive) to the token
    budget.  Passages lacking terminal punctuation get a period so sentence
    arithmetic stays exact after joining.
    """
    if len(pair.hard_negatives) < num_hard:
        raise ValueError(
            f"pair has {len(pair.hard_negatives)} hard negatives, need {num_hard}"
        )
    if len(random_pool) < num_random:
        raise ValueError(f"random pool of {len(random_pool)} below {num_random}")
    positive = _ensure_terminal(pair.positive)
    pos_cost = _passage_cost(positive, tokenizer, max_sentence_tokens)
    if pos_cost > budget_tokens:
        raise ValueError(
            f"positive passage costs {pos_cost} tokens, over budget {budget_tokens}"
        )
    hard = [_ensure_terminal(t) for t in pair.hard_negatives[:num_hard]]
    rand_idx = rng.choice(len(random_pool), size=num_random, replace=False)
    rand = [_ensure_terminal(random_pool[int(i)]) for i in rand_idx]
    others = hard + rand
    order = rng.permutation(len(others))
    passages = [others[int(i)] for i in order]
    slot = int(rng.integers(0, len(passages) + 1))
    passages.insert(slot, positive)
    positive_index = slot

    costs = [_passage_cost(t, tokenizer, max_sentence_tokens) for t in passages]
    total = sum(costs)
    while total > budget_tokens:
        drop = len(passages) - 1
        if drop == positive_index:
            drop -= 1
        if drop < 0:
            break
        total -= costs[drop]
        del passages[drop], costs[drop]
        if drop < positive_index:
            positive_index -= 1

    sent_counts = [
        len(segment_sentences(t, tokenizer, max_sentence_tokens)) for t in passages
    ]
    start = sum(sent_counts[:positive_index])
    end = start + sent_counts[positive_index] - 1
    return PseudoDocExample(
        query=pair.query,
        passages=tuple(passages),
        positive_index=positive_index,
        positive_sentence_span=(start, end),
        budget_tokens=budget_tokens,
    )


@dataclass
class SpanRule:
    min_sentences: int = 1
    max_sentences: int = 5

    def __post_init__(self):
        if not 1 <= self.min_sentences <= self.max_sentences <= 5:
            raise ValueError(
                f"span rule must stay within 1-5 sentences, got "
                f"[{self.min_sentences}, {self.max_sentences}]"
            )


@dataclass
class SynthesisResult:
    examples: list[SyntheticExample]
    failures: int


def synthesize_stage3(
    corpus: Corpus,
    count: int,
    tokenizer: Tokenizer,
    span_rule: SpanRule | None = None,
    generator: GenerationClient | None = None,
    rng: np.random.Generator | None = None,
    background_words: int = 200,
    max_sentence_tokens: int = 256,
) -> SynthesisResult:
    """Queries targeting consecutive sentences of stored documents.

    Without a generation client, queries come from the offline rule-based
    transformation of the span text.  With a client, the background/span are
    sent through the shipped prompt; failures and responses flagged as
    uninformative are skipped and counted.
    """
    span_rule = span_rule or SpanRule()
    rng = rng if rng is not None else np.random.default_rng(0)
    prompt_template = load_query_prompt() if generator is not None else None
    seg_cache: dict[str, list] = {}
    examples: list[SyntheticExample] = []
    failures = 0
    attempts = 0
    while len(examples) < count and attempts < 20 * count:
        attempts += 1
        doc = corpus.documents[int(rng.integers(0, len(corpus.documents)))]
        if doc.doc_id not in seg_cache:
            seg_cache[doc.doc_id] = segment_sentences(doc.text, tokenizer, max_sentence_tokens)
        sents = seg_cache[doc.doc_id]
        if not sents:
            continue
        b0 = int(rng.integers(0, len(sents)))
        words = 0
        b1 = b0
        for j in range(b0, len(sents)):
            words += sents[j].token_count
            b1 = j
            if words >= background_words:
                break
        window_len = b1 - b0 + 1
        span_len = int(rng.integers(span_rule.min_sentences,
                                    min(span_rule.max_sentences, window_len) + 1))
        z0 = b0 + int(rng.integers(0, window_len - span_len + 1))
        z1 = z0 + span_len - 1
        span_text = " ".join(s.text for s in sents[z0 : z1 + 1])
        # character offsets over the normalized document text
        starts = []
        off = 0
        for s in sents:
            starts.append(off)
            off += len(s.text) + 1
        background = (starts[b0], starts[b1] + len(sents[b1].text))
        if generator is not None:
            bg_text = " ".join(s.text for s in sents[b0 : b1 + 1])
            prompt = prompt_template.format(background=bg_text, ground_truth=span_text)
            try:
                reply = generator.complete(prompt).strip()
            except Exception:
                failures += 1
                continue
            if not reply or reply.upper().startswith("UNINFORMATIVE"):
                failures += 1
                continue
            query = reply
        else:
            try:
                query = rule_based_query(span_text, rng)
            except ValueError:
                failures += 1
                continue
        examples.append(
            SyntheticExample(doc_id=doc.doc_id, query=query, span=(z0, z1),
                             background=background)
        )
    return SynthesisResult(examples=examples, failures=failures)


# ------------------------------------------------------------ training loops


def _stage1_loss_and_grads(model, tokenizer, pairs, scfg, rng):
    batch = build_stage1_batch(
        pairs, model, tokenizer, scfg.hard_negatives_per_positive,
        scfg.in_batch_negatives, rng, temperature=scfg.temperature, record=True,
    )
    weighting = PositionalWeighting(scfg.alpha, scfg.mode)
    B = len(batch.instances)
    n_unique = len(batch.positions)
    d = model.d_model
    d_unique = np.zeros((n_unique, d))
    d_queries = np.zeros((B, d))
    loss = 0.0
    for i, inst in enumerate(batch.instances):
        loss_i = position_aware_loss(inst, weighting)
        d_q, d_c = loss_gradients(inst, weighting)
        loss += loss_i
        d_queries[i] = d_q
        for row, g in zip(batch.candidate_rows[i], d_c):
            d_unique[row] += g
    loss /= B
    d_unique /= B
    d_queries /= B

    tr = batch.trace
    dh = np.zeros((tr["B"], tr["T"], d))
    dh[np.arange(n_unique), batch.positions] = d_unique
    qtr = batch.query_trace
    dhq = np.zeros((qtr["B"], qtr["T"], d))
    dhq[np.arange(B), batch.query_positions] = d_queries
    grads = model.parameter_gradients([(tr, dh), (qtr, dhq)])
    return loss, grads


def _doc_items_for_step(stage, examples, corpora_ctx_cache, tokenizer, max_sentence_tokens):
    """Normalize stage II/III examples to (ctx, query, span) triples."""
    items = []
    for ex in examples:
        if stage == "II":
            text = " ".join(ex.passages)
            ctx = landmark_document(text, tokenizer, max_sentence_tokens)
            span = ex.positive_sentence_span
            query = ex.query
        else:
            ctx = corpora_ctx_cache[ex.doc_id]
            span = ex.span
            query = ex.query
        if span[1] >= ctx.num_sentences:
            raise ValueError(f"span {span} outside document of {ctx.num_sentences} sentences")
        items.append((ctx, query, span))
    return items


def _stage23_loss_and_grads(model, tokenizer, items, scfg, train_window, margin):
    """Joint loss over a batch of documents: in-batch landmarks are appended
    to each document's candidate list as extra negatives."""
    weighting = PositionalWeighting(scfg.alpha, scfg.mode)
    d = model.d_model
    encoded = []
    for ctx, query, span in items:
        es = embed_document(ctx, model, train_window, margin, record=True)
        qv, qtrace, qpos = model.encode_query(query, tokenizer, record=True)
        encoded.append(dict(es=es, qv=qv.values, qtrace=qtrace, qpos=qpos, span=span))
    loss = 0.0
    d_vecs = [np.zeros((e["es"].count, d)) for e in encoded]
    d_queries = []
    B = len(encoded)
    for i, e in enumerate(encoded):
        own = e["es"].vectors
        blocks = [own] + [encoded[j]["es"].vectors for j in range(B) if j != i]
        cands = np.vstack(blocks) if len(blocks) > 1 else own
        span = e["span"]
        inst = ContrastiveInstance(
            query_embedding=e["qv"],
            candidate_embeddings=cands,
            positive_indices=tuple(range(span[0], span[1] + 1)),
            temperature=scfg.temperature,
        )
        loss += position_aware_loss(inst, weighting)
        d_q, d_c = loss_gradients(inst, weighting)
        d_queries.append(d_q)
        d_vecs[i] += d_c[: len(own)]
        off = len(own)
        for j in range(B):
            if j == i:
                continue
            n_j = encoded[j]["es"].count
            d_vecs[j] += d_c[off : off + n_j]
            off += n_j
    loss /= B
    pieces = []
    for i, e in enumerate(encoded):
        dv = d_vecs[i] / B
        for wt in e["es"].traces:
            dh = np.zeros((wt.trace["B"], wt.trace["T"], d))
            for row, hpos in wt.emit_rows:
                dh[0, hpos] = dv[row]
            pieces.append((wt.trace, dh))
        dhq = np.zeros((e["qtrace"]["B"], e["qtrace"]["T"], d))
        dhq[0, e["qpos"]] = d_queries[i] / B
        pieces.append((e["qtrace"], dhq))
    grads = model.parameter_gradients(pieces)
    return loss, grads


class _ExampleStream:
    """Epoch-shuffled deterministic iterator over a dataset."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.cursor = 0

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.cursor >= self.n:
                self.order = self.rng.permutation(self.n)
                self.cursor = 0
            out.append(int(self.order[self.cursor]))
            self.cursor += 1
        return out


def train(
    config: TrainConfig,
    datasets: dict,
    model: EncoderModel,
    tokenizer: Tokenizer,
    out_dir: str | Path | None = None,
    eval_hook: Callable[[EncoderModel, int, str], dict] | None = None,
    eval_every: int = 0,
    config_hash: str = "",
) -> TrainResult:
    """Run the configured stages in order; returns the trained model.

    ``datasets`` maps stage name to its data: "I" -> list[PairExample],
    "II" -> list[PseudoDocExample], "III" -> Stage3Data.  A NaN loss aborts
    with the last good checkpoint retained.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []
    checkpoint_paths: list[Path] = []
    train_window = config.train_window or model.max_window
    if train_window > model.max_window:
        raise ValueError("train_window exceeds model max_window")
    margin = config.context_margin
    if margin is None:
        margin = default_margin(train_window)

    def now() -> float:
        return 0.0 if config.deterministic else time.time()

    def save(step: int, tag: str) -> Path | None:
        if out_dir is None:
            return None
        path = out_dir / f"checkpoint-{tag}.ckpt"
        save_checkpoint(model, tokenizer, path, seed=config.seed, config_hash=config_hash)
        checkpoint_paths.append(path)
        return path

    global_step = 0
    for stage_pos, stage in enumerate(config.stages):
        if stage not in datasets:
            raise ValueError(f"no dataset provided for stage {stage}")
        scfg = config.stage_configs[stage]
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, stage_pos, len(STAGES)])
        )
        metrics.append({"event": "stage_start", "stage": stage, "step": global_step,
                        "timestamp": now()})
        opt = AdamW(model, lr=scfg.lr, weight_decay=scfg.weight_decay,
                    warmup_steps=int(scfg.warmup_fraction * scfg.steps))
        if stage == "I":
            data: Sequence = datasets["I"]
            stream = _ExampleStream(len(data), rng)
        elif stage == "II":
            data = datasets["II"]
            stream = _ExampleStream(len(data), rng)
        else:
            s3: Stage3Data = datasets["III"]
            data = s3.examples
            stream = _ExampleStream(len(data), rng)
            ctx_cache = {
                doc.doc_id: landmark_document(doc.text, tokenizer, config.max_sentence_tokens)
                for doc in s3.corpus.documents
                if any(e.doc_id == doc.doc_id for e in s3.examples)
            }

        for _ in range(scfg.steps):
            accum: dict[str, np.ndarray] | None = None
            accum_loss = 0.0
            for _ in range(scfg.grad_accum):
                idx = stream.take(scfg.batch_size)
                if stage == "I":
                    loss, grads = _stage1_loss_and_grads(
                        model, tokenizer, [data[i] for i in idx], scfg, rng
                    )
                else:
                    items = _doc_items_for_step(
                        stage, [data[i] for i in idx],
                        ctx_cache if stage == "III" else None,
                        tokenizer, config.max_sentence_tokens,
                    )
                    loss, grads = _stage23_loss_and_grads(
                        model, tokenizer, items, scfg, train_window, margin
                    )
                if not np.isfinite(loss):
                    path = save(global_step, f"diverged-step{global_step}")
                    raise TrainingDiverged(
                        f"non-finite loss at stage {stage} step {global_step}",
                        checkpoint_path=str(path) if path else None,
                    )
                accum_loss += loss
                if accum is None:
                    accum = grads
                else:
                    for k in accum:
                        accum[k] += grads[k]
            if scfg.grad_accum > 1:
                for k in accum:
                    accum[k] /= scfg.grad_accum
            lr_now = opt.current_lr()
            opt.step(accum)
            model.check_finite()
            global_step += 1
            metrics.append({
                "step": global_step, "stage": stage,
                "loss": accum_loss / scfg.grad_accum, "lr": lr_now,
                "timestamp": now(),
            })
            if config.checkpoint_every and global_step % config.checkpoint_every == 0:
                save(global_step, f"step{global_step}")
            if eval_hook is not None and eval_every and global_step % eval_every == 0:
                snap = eval_hook(model, global_step, stage)
                if snap:
                    metrics.append({"event": "eval", "step": global_step,
                                    "stage": stage, "timestamp": now(), **snap})
        metrics.append({"event": "stage_end", "stage": stage, "step": global_step,
                        "timestamp": now()})

    save(global_step, "final")
    metrics_path = None
    if out_dir is not None:
        metrics_path = out_dir / "metrics.jsonl"
        with metrics_path.open("w", encoding="utf-8") as fh:
            for rec in metrics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return TrainResult(model=model, metrics=metrics, metrics_path=metrics_path,
                       checkpoint_paths=checkpoint_paths)
