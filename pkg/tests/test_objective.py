import math

import mpmath
import numpy as np
import pytest

from lmkret.objective import (
    ContrastiveInstance,
    PositionalWeighting,
    basic_loss,
    loss_gradients,
    position_aware_loss,
    positional_weight,
)

mpmath.mp.dps = 50


def mp_losses(inst, alpha):
    """Direct 50-digit evaluation of both losses and both modes."""
    q = [mpmath.mpf(float(x)) for x in inst.query_embedding]
    zs = []
    for row in inst.candidate_embeddings:
        s = mpmath.fsum(mpmath.mpf(float(a)) * b for a, b in zip(row, q))
        zs.append(s / mpmath.mpf(inst.temperature))
    denom = mpmath.fsum(mpmath.e**z for z in zs)
    logp = [z - mpmath.log(denom) for z in zs]
    pos = inst.positive_indices
    m = len(pos) - 1
    basic = -mpmath.fsum(logp[p] for p in pos)
    weighted = -mpmath.fsum(
        mpmath.e ** (-mpmath.mpf(alpha) * i) * logp[pos[m - i]] for i in range(m + 1)
    )
    literal = basic + mpmath.fsum(mpmath.mpf(alpha) * i for i in range(m + 1))
    return float(basic), float(weighted), float(literal)


def random_instance(rng, n=None, d=None, span=None):
    min_n = (span or 0) + 2
    n = n or int(rng.integers(min_n, 65))
    d = d or int(rng.integers(2, 33))
    q = rng.standard_normal(d)
    c = rng.standard_normal((n, d))
    m = span if span is not None else int(rng.integers(0, min(5, n - 1)))
    z = int(rng.integers(m, n))
    return ContrastiveInstance(
        query_embedding=q,
        candidate_embeddings=c,
        positive_indices=tuple(range(z - m, z + 1)),
        temperature=float(rng.uniform(0.5, 2.0)),
    )


class TestPositionalWeight:
    def test_zero_offset_is_one(self):
        for alpha in (0.0, 0.3, 1.0, 7.5):
            assert positional_weight(0, alpha) == 1.0

    def test_closed_forms(self):
        assert abs(positional_weight(1, 1.0) - 0.36787944117144233) < 1e-15
        assert abs(positional_weight(4, 0.5) - math.exp(-2.0)) < 1e-15

    def test_negative_offset_rejected(self):
        with pytest.raises(ValueError):
            positional_weight(-1, 1.0)


class TestClosedFormExamples:
    def _equal_score_instance(self, n, positives):
        # all candidates identical -> uniform softmax
        c = np.tile(np.array([1.0, 2.0]), (n, 1))
        return ContrastiveInstance(np.array([0.3, -0.2]), c, positives)

    def test_uniform_one_positive(self):
        inst = self._equal_score_instance(4, (2,))
        assert abs(basic_loss(inst) - math.log(4)) < 1e-9

    def test_uniform_two_positives(self):
        inst = self._equal_score_instance(4, (1, 2))
        assert abs(basic_loss(inst) - 2 * math.log(4)) < 1e-9

    def test_two_candidate_margin(self):
        q = np.array([1.0, 0.0])
        c = np.array([[2.0, 0.0], [0.0, 5.0]])  # scores 2, 0
        inst = ContrastiveInstance(q, c, (0,))
        assert abs(basic_loss(inst) - math.log(1 + math.exp(-2.0))) < 1e-9

    def test_position_aware_uniform_two_positives(self):
        inst = self._equal_score_instance(4, (1, 2))
        w = PositionalWeighting(alpha=1.0, mode="weighted_log")
        expected = (1 + math.exp(-1)) * math.log(4)
        assert abs(position_aware_loss(inst, w) - expected) < 1e-9

    def test_literal_uniform_two_positives(self):
        inst = self._equal_score_instance(4, (1, 2))
        w = PositionalWeighting(alpha=1.0, mode="literal")
        assert abs(position_aware_loss(inst, w) - (2 * math.log(4) + 1.0)) < 1e-9

    def test_alpha_zero_equals_basic(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            inst = random_instance(rng)
            w = PositionalWeighting(alpha=0.0, mode="weighted_log")
            assert position_aware_loss(inst, w) == pytest.approx(basic_loss(inst), abs=1e-12)


class TestAgainstOracle:
    def test_random_instances_match_mpmath(self):
        rng = np.random.default_rng(42)
        for _ in range(60):
            inst = random_instance(rng)
            alpha = float(rng.uniform(0.0, 2.0))
            b, wgt, lit = mp_losses(inst, alpha)
            assert abs(basic_loss(inst) - b) <= 1e-9
            assert abs(position_aware_loss(inst, PositionalWeighting(alpha, "weighted_log")) - wgt) <= 1e-9
            assert abs(position_aware_loss(inst, PositionalWeighting(alpha, "literal")) - lit) <= 1e-9

    def test_large_scores_stable(self):
        q = np.array([300.0, 0.0])
        c = np.array([[2.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
        inst = ContrastiveInstance(q, c, (0,))
        val = basic_loss(inst)
        assert np.isfinite(val) and val >= 0


class TestProperties:
    def test_non_negativity(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            inst = random_instance(rng)
            alpha = float(rng.uniform(0.0, 3.0))
            assert basic_loss(inst) >= 0
            assert position_aware_loss(inst, PositionalWeighting(alpha, "weighted_log")) >= 0

    def test_weighted_loss_non_increasing_in_alpha(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            inst = random_instance(rng, span=3)
            alphas = [0.0, 0.5, 1.0, 2.0]
            vals = [
                position_aware_loss(inst, PositionalWeighting(a, "weighted_log"))
                for a in alphas
            ]
            assert all(x >= y - 1e-12 for x, y in zip(vals, vals[1:]))

    def test_translation_invariance(self):
        rng = np.random.default_rng(13)
        inst = random_instance(rng, n=8, d=4, span=2)
        # shift every score by adding c*q/(|q|^2) to candidates
        q = inst.query_embedding
        shift = 3.7 * q / (q @ q)
        shifted = ContrastiveInstance(
            q, inst.candidate_embeddings + shift, inst.positive_indices, inst.temperature
        )
        assert basic_loss(shifted) == pytest.approx(basic_loss(inst), abs=1e-9)
        w = PositionalWeighting(0.8, "weighted_log")
        assert position_aware_loss(shifted, w) == pytest.approx(
            position_aware_loss(inst, w), abs=1e-9
        )

    def test_descent_step_raises_boundary_probability(self):
        # guaranteed sign regime: softmax near uniform (sum of positive
        # weights < n); with a dominant boundary the sign can flip, since
        # softmax mass is zero-sum across candidates
        rng = np.random.default_rng(14)
        for _ in range(20):
            base = random_instance(rng, n=10, d=6, span=2)
            inst = ContrastiveInstance(
                base.query_embedding * 0.05,
                base.candidate_embeddings * 0.05,
                base.positive_indices,
                base.temperature,
            )
            w = PositionalWeighting(1.0, "weighted_log")
            d_q, d_c = loss_gradients(inst, w)
            eps = 1e-6

            def boundary_prob(i):
                z = (i.candidate_embeddings.astype(float) @ i.query_embedding) / i.temperature
                p = np.exp(z - z.max())
                p = p / p.sum()
                return p[i.boundary_index]

            stepped = ContrastiveInstance(
                inst.query_embedding - eps * d_q,
                inst.candidate_embeddings - eps * d_c,
                inst.positive_indices,
                inst.temperature,
            )
            assert boundary_prob(stepped) > boundary_prob(inst)


class TestGradients:
    def test_literal_gradients_equal_basic(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            inst = random_instance(rng)
            gq_b, gc_b = loss_gradients(inst, None)
            gq_l, gc_l = loss_gradients(inst, PositionalWeighting(1.3, "literal"))
            assert np.max(np.abs(gq_b - gq_l)) <= 1e-12
            assert np.max(np.abs(gc_b - gc_l)) <= 1e-12

    @pytest.mark.parametrize("mode", ["basic", "weighted_log"])
    def test_finite_differences(self, mode):
        rng = np.random.default_rng(22)
        for _ in range(10):
            inst = random_instance(rng, n=6, d=8, span=2)
            w = None if mode == "basic" else PositionalWeighting(0.7, "weighted_log")

            def f(q, c):
                i2 = ContrastiveInstance(q, c, inst.positive_indices, inst.temperature)
                return basic_loss(i2) if w is None else position_aware_loss(i2, w)

            gq, gc = loss_gradients(inst, w)
            h = 1e-6
            for k in range(inst.query_embedding.size):
                qp = inst.query_embedding.copy(); qp[k] += h
                qm = inst.query_embedding.copy(); qm[k] -= h
                fd = (f(qp, inst.candidate_embeddings) - f(qm, inst.candidate_embeddings)) / (2 * h)
                assert abs(fd - gq[k]) <= 1e-6 + 1e-6 * abs(gq[k])
            flat = inst.candidate_embeddings
            for k in rng.choice(flat.size, size=20, replace=False):
                cp = flat.copy().reshape(-1); cp[k] += h
                cm = flat.copy().reshape(-1); cm[k] -= h
                fd = (f(inst.query_embedding, cp.reshape(flat.shape))
                      - f(inst.query_embedding, cm.reshape(flat.shape))) / (2 * h)
                an = gc.reshape(-1)[k]
                assert abs(fd - an) <= 1e-6 + 1e-6 * abs(an)

    def test_symmetric_instance_zero_query_gradient(self):
        # all candidates identical, single positive: uniform softmax, and the
        # positive's pull cancels the mean of the pushes
        c = np.tile(np.array([0.4, -1.0, 0.2]), (5, 1))
        inst = ContrastiveInstance(np.array([1.0, 2.0, -0.5]), c, (2,))
        gq, _ = loss_gradients(inst, None)
        assert np.max(np.abs(gq)) < 1e-12

    def test_nan_input_rejected(self):
        q = np.array([1.0, np.nan])
        c = np.ones((3, 2))
        inst = ContrastiveInstance(q, c, (0,))
        with pytest.raises(ValueError, match="finite"):
            basic_loss(inst)

    def test_invariants_rejected(self):
        with pytest.raises(ValueError):
            ContrastiveInstance(np.ones(2), np.ones((1, 2)), (0,))
        with pytest.raises(ValueError):
            ContrastiveInstance(np.ones(2), np.ones((4, 2)), ())
        with pytest.raises(ValueError):
            ContrastiveInstance(np.ones(2), np.ones((4, 2)), (2, 1))
        with pytest.raises(ValueError):
            ContrastiveInstance(np.ones(2), np.ones((4, 2)), (3, 4))
        with pytest.raises(ValueError):
            PositionalWeighting(alpha=1.0, mode="mystery")
