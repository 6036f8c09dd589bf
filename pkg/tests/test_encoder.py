import numpy as np
import pytest

from lmkret.corpus import landmark_document
from lmkret.encoder import (
    EncoderConfig,
    EncoderModel,
    load_checkpoint,
    save_checkpoint,
)
from lmkret.objective import ContrastiveInstance, PositionalWeighting, loss_gradients, position_aware_loss
from lmkret.tokenizer import BOS_ID, LMK_ID

from conftest import make_context


# ---------------------------------------------------------------------------
# Reference forward pass: a deliberately naive re-implementation of the same
# arithmetic (per-position loops, no shared helpers) used as an oracle.
# ---------------------------------------------------------------------------

def _ref_layernorm(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        row = x[t]
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        out[t] = g * (row - mu) / np.sqrt(var + eps) + b
    return out


def _ref_gelu(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _ref_bucket(dist):
    if dist < 8:
        return dist
    return min(15, 8 + int(np.floor(np.log2(dist / 8))))


def reference_forward(model, ids):
    p = model.params
    cfg = model.config
    T = len(ids)
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    x = np.array([p["tok_emb"][i] for i in ids]) + p["pos_emb"][:T]
    for li in range(cfg.n_layers):
        pre = f"layers.{li}"
        n1 = _ref_layernorm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = n1 @ p[f"{pre}.attn.wq"] + p[f"{pre}.attn.bq"]
        k = n1 @ p[f"{pre}.attn.wk"] + p[f"{pre}.attn.bk"]
        v = n1 @ p[f"{pre}.attn.wv"] + p[f"{pre}.attn.bv"]
        ctx = np.zeros_like(x)
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            for t in range(T):
                logits = np.array([
                    q[t, sl] @ k[u, sl] / np.sqrt(dh)
                    + p[f"{pre}.attn.rel_bias"][h][_ref_bucket(t - u)]
                    for u in range(t + 1)
                ])
                w = np.exp(logits - logits.max())
                w = w / w.sum()
                ctx[t, sl] = sum(w[u] * v[u, sl] for u in range(t + 1))
        x = x + ctx @ p[f"{pre}.attn.wo"] + p[f"{pre}.attn.bo"]
        n2 = _ref_layernorm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        x = x + _ref_gelu(n2 @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"]) @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]
    return _ref_layernorm(x, p["ln_f.g"], p["ln_f.b"])


class TestForward:
    def test_matches_reference_forward(self, tok, small_model):
        # nonzero relative biases so the oracle exercises every term
        model = EncoderModel(small_model.config, seed=1, dtype=np.float64)
        rng = np.random.default_rng(0)
        for i in range(model.config.n_layers):
            model.params[f"layers.{i}.attn.rel_bias"] = rng.standard_normal(
                model.params[f"layers.{i}.attn.rel_bias"].shape
            ) * 0.3
        ctx = make_context(tok, 5, (2, 6), seed=11)
        es = model.encode_window(ctx)
        ref = reference_forward(model, [BOS_ID] + list(ctx.token_stream))
        expected = ref[[p + 1 for p in ctx.landmark_positions]]
        rel = np.abs(es.vectors - expected) / np.maximum(np.abs(expected), 1e-12)
        assert rel.max() <= 1e-5

    def test_single_landmark_window(self, tok, small_model):
        ctx = make_context(tok, 1, 4)
        es = small_model.encode_window(ctx)
        assert es.count == 1 and es.dimension == small_model.d_model

    def test_prefix_property_bit_identical(self, tok, small_model):
        # identical-arithmetic mode: fixed padded shape makes truncation exact
        ctx = make_context(tok, 4, 3, seed=5)
        pad = small_model.max_window + 1
        full = small_model.encode_window(ctx, pad_to=pad)
        j = 1
        cut = ctx.landmark_positions[j] + 1
        part = small_model.encode_window(ctx, token_end=cut, pad_to=pad)
        assert np.array_equal(full.vectors[: j + 1], part.vectors)

    def test_prefix_property_close_without_padding(self, tok, small_model):
        ctx = make_context(tok, 4, 3, seed=5)
        full = small_model.encode_window(ctx)
        j = 1
        cut = ctx.landmark_positions[j] + 1
        part = small_model.encode_window(ctx, token_end=cut)
        assert np.allclose(full.vectors[: j + 1], part.vectors, rtol=1e-12, atol=1e-12)

    def test_causality_perturbing_suffix(self, tok, small_model):
        ctx = make_context(tok, 5, 3, seed=6)
        full = small_model.encode_window(ctx)
        ids = [BOS_ID] + list(ctx.token_stream)
        p = ctx.landmark_positions[2] + 1
        perturbed = list(ids)
        perturbed[-2] = (perturbed[-2] + 1) % small_model.config.vocab_size
        h1, _ = small_model.forward_hidden(ids)
        h2, _ = small_model.forward_hidden(perturbed)
        assert np.array_equal(h1[: p + 1], h2[: p + 1])

    def test_deterministic_given_seed(self, tok):
        cfg = EncoderConfig(vocab_size=tok.vocab_size, n_layers=2, d_model=16,
                            n_heads=2, d_ff=32, max_window=48)
        a = EncoderModel(cfg, seed=3, dtype=np.float64)
        b = EncoderModel(cfg, seed=3, dtype=np.float64)
        ctx = make_context(tok, 3, 4, seed=9)
        assert np.array_equal(a.encode_window(ctx).vectors, b.encode_window(ctx).vectors)

    def test_overlong_slice_reports_lengths(self, tok, small_model):
        ctx = make_context(tok, 30, 4, seed=2)
        with pytest.raises(ValueError, match="max_window"):
            small_model.encode_window(ctx)

    def test_d_model_head_divisibility(self, tok):
        with pytest.raises(ValueError):
            EncoderConfig(vocab_size=tok.vocab_size, d_model=10, n_heads=4)

    def test_batched_forward_matches_individual(self, tok, small_model):
        rng = np.random.default_rng(17)
        seqs = [
            [2] + list(rng.integers(4, tok.vocab_size, size=rng.integers(3, 20)))
            for _ in range(7)
        ]
        hidden, lens, _ = small_model.forward_batch(seqs)
        for i, s in enumerate(seqs):
            solo, _ = small_model.forward_hidden(s)
            assert np.allclose(hidden[i, : lens[i]], solo, rtol=1e-12, atol=1e-13)

    def test_batched_passage_encoding_matches_individual(self, tok, small_model):
        texts = ["w1 w2 w3", "w4", "w5 w6 w7 w8 w9"]
        vecs, _, _ = small_model.encode_passages_batch(texts, tok)
        for i, t in enumerate(texts):
            solo, _, _ = small_model.encode_passage(t, tok)
            assert np.allclose(vecs[i], solo.values, rtol=1e-12, atol=1e-13)


class TestQuery:
    def test_query_shape_and_determinism(self, tok, small_model):
        v1, _, _ = small_model.encode_query("w1 w2 w3", tok)
        v2, _, _ = small_model.encode_query("w1 w2 w3", tok)
        assert v1.values.shape == (small_model.d_model,)
        assert np.array_equal(v1.values, v2.values)

    def test_empty_query_rejected(self, tok, small_model):
        with pytest.raises(ValueError):
            small_model.encode_query("   ", tok)

    def test_query_equals_lone_sentence_landmark(self, tok, small_model):
        text = "w1 w2 w3"
        ctx = landmark_document(text, tok)
        es = small_model.encode_window(ctx)
        qv, _, _ = small_model.encode_query(text, tok)
        assert np.array_equal(es.vectors[0], qv.values)


def _pipeline_loss(model, tok, ctx, query, positives, alpha=0.5):
    es = model.encode_window(ctx, record=True)
    qv, qtrace, qpos = model.encode_query(query, tok, record=True)
    inst = ContrastiveInstance(
        query_embedding=qv.values,
        candidate_embeddings=es.vectors,
        positive_indices=positives,
    )
    w = PositionalWeighting(alpha=alpha, mode="weighted_log")
    loss = position_aware_loss(inst, w)
    return loss, es, (qtrace, qpos), inst, w


def _pipeline_param_grads(model, tok, ctx, query, positives, alpha=0.5):
    loss, es, (qtrace, qpos), inst, w = _pipeline_loss(model, tok, ctx, query, positives, alpha)
    d_q, d_c = loss_gradients(inst, w)
    pieces = []
    for wt in es.traces:
        dh = np.zeros((wt.seq_len, model.d_model))
        for row, hpos in wt.emit_rows:
            dh[hpos] = d_c[row]
        pieces.append((wt.trace, dh))
    dhq = np.zeros((qtrace["T"], model.d_model))
    dhq[qpos] = d_q
    pieces.append((qtrace, dhq))
    return loss, model.parameter_gradients(pieces)


class TestGradients:
    def test_finite_difference_all_parameter_arrays(self, tok, tiny_model):
        model = tiny_model
        ctx = make_context(tok, 3, 3, seed=21)
        query = "w3 w7"
        positives = (1,)
        _, grads = _pipeline_param_grads(model, tok, ctx, query, positives)
        rng = np.random.default_rng(0)
        h = 1e-4
        for name, arr in model.params.items():
            flat = arr.reshape(-1)
            k = min(20, flat.size)
            coords = rng.choice(flat.size, size=k, replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                lp, *_ = _pipeline_loss(model, tok, ctx, query, positives)
                flat[c] = orig - h
                lm, *_ = _pipeline_loss(model, tok, ctx, query, positives)
                flat[c] = orig
                fd = (lp - lm) / (2 * h)
                an = grads[name].reshape(-1)[c]
                # rtol with a small atol floor: the floor absorbs the h^2
                # truncation error of the difference quotient on coordinates
                # whose gradients are orders of magnitude below array scale
                assert abs(fd - an) <= 1e-6 + 1e-4 * max(abs(fd), abs(an)), (
                    f"{name}[{c}]: fd={fd} an={an}"
                )

    def test_unused_parameters_zero_gradient(self, tok, tiny_model):
        ctx = make_context(tok, 2, 3, seed=4)
        _, grads = _pipeline_param_grads(tiny_model, tok, ctx, "w1 w2", (0,))
        used = set([BOS_ID, LMK_ID] + list(ctx.token_stream) + tok.tokenize("w1 w2"))
        unused = [i for i in range(tiny_model.config.vocab_size) if i not in used][:5]
        for i in unused:
            assert np.all(grads["tok_emb"][i] == 0.0)
        T = ctx.num_tokens + 1
        assert np.all(grads["pos_emb"][T + 1 :] == 0.0)

    def test_doubling_loss_doubles_gradients(self, tok, tiny_model):
        ctx = make_context(tok, 2, 3, seed=8)
        es = tiny_model.encode_window(ctx, record=True)
        wt = es.traces[0]
        dh = np.zeros((wt.seq_len, tiny_model.d_model))
        dh[wt.emit_rows[0][1]] = 1.0
        g1 = tiny_model.backward_hidden(wt.trace, dh)
        es2 = tiny_model.encode_window(ctx, record=True)
        g2 = tiny_model.backward_hidden(es2.traces[0].trace, 2.0 * dh)
        for name in g1:
            assert np.allclose(2.0 * g1[name], g2[name], rtol=0, atol=1e-12)

    def test_gradients_without_recording_error(self, tok, tiny_model):
        with pytest.raises(ValueError, match="record"):
            tiny_model.backward_hidden(None, np.zeros((3, 8)))
        with pytest.raises(ValueError, match="record"):
            tiny_model.parameter_gradients([])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tok, tmp_path):
        cfg = EncoderConfig(vocab_size=tok.vocab_size, n_layers=1, d_model=8,
                            n_heads=2, d_ff=16, max_window=32)
        model = EncoderModel(cfg, seed=5, dtype=np.float32)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(model, tok, p1, seed=7, config_hash="abc")
        m2, tok2, header = load_checkpoint(p1)
        save_checkpoint(m2, tok2, p2, seed=7, config_hash="abc")
        assert p1.read_bytes() == p2.read_bytes()
        assert header["seed"] == 7 and header["config_hash"] == "abc"
        for name in model.params:
            assert np.array_equal(model.params[name], m2.params[name])

    def test_round_trip_preserves_behavior(self, tok, tmp_path, small_model):
        p = tmp_path / "m.ckpt"
        save_checkpoint(small_model, tok, p)
        m2, tok2, _ = load_checkpoint(p, dtype=np.float64)
        ctx = make_context(tok, 3, 4, seed=13)
        a = small_model.encode_window(ctx).vectors.astype(np.float32)
        b = m2.encode_window(ctx).vectors.astype(np.float32)
        # float64 params were rounded to f32 in the file; re-encoding in f64
        # from the rounded values stays within f32 resolution of the original
        assert np.allclose(a, b, rtol=1e-4, atol=1e-5)

    def test_truncated_file_error(self, tok, tmp_path):
        cfg = EncoderConfig(vocab_size=tok.vocab_size, n_layers=1, d_model=8,
                            n_heads=2, d_ff=16, max_window=32)
        model = EncoderModel(cfg, seed=5)
        p = tmp_path / "t.ckpt"
        save_checkpoint(model, tok, p)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) - 100])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)
