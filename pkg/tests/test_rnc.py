import math

import numpy as np
import pytest

from phantomage import rnc
from phantomage import tensor as T


def rng(seed=0):
    return np.random.default_rng(seed)


def similarity_reference(v, config):
    m = len(v)
    sim = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            if config.similarity == "negative-l2":
                sim[i, j] = -np.linalg.norm(v[i] - v[j])
            else:
                ni = v[i] / max(np.linalg.norm(v[i]), 1e-12)
                nj = v[j] / max(np.linalg.norm(v[j]), 1e-12)
                sim[i, j] = ni @ nj
    return sim / config.temperature


def rnc_reference(v, labels, config):
    """Direct-summation brute-force loss; no log-sum-exp stabilization."""
    m = len(v)
    sim = similarity_reference(v, config)
    total = 0.0
    for i in range(m):
        for j in range(m):
            if j == i:
                continue
            s_ij = rnc.ranked_set(labels, i, j)
            denom = sum(math.exp(sim[i, k]) for k in s_ij)
            total += -math.log(math.exp(sim[i, j]) / denom)
    return total / (m * (m - 1))


def random_batch(r, m, d):
    return rnc.EmbeddingBatch(r.normal(size=(m, d)),
                              r.uniform(20, 100, size=m))


class TestRankedSet:
    def test_contains_partner_and_ties(self):
        labels = [10.0, 20.0, 30.0, 20.0]
        s = rnc.ranked_set(labels, 0, 1)
        assert 1 in s and 3 in s and 2 in s  # tie at distance 10 included
        s2 = rnc.ranked_set(labels, 0, 2)
        assert s2 == [2]

    def test_excludes_anchor(self):
        labels = [1.0, 2.0, 3.0]
        for j in (1, 2):
            assert 0 not in rnc.ranked_set(labels, 0, j)

    def test_anchor_equals_partner_rejected(self):
        with pytest.raises(ValueError):
            rnc.ranked_set([1.0, 2.0], 1, 1)

    def test_mask_matches_ranked_set(self):
        labels = rng(0).uniform(0, 50, size=6)
        mask = rnc.contrast_mask(labels)
        for i in range(6):
            for j in range(6):
                if i == j:
                    continue
                expect = set(rnc.ranked_set(labels, i, j))
                assert set(np.flatnonzero(mask[i, j])) == expect


class TestOracleEquivalence:
    @pytest.mark.parametrize("similarity", rnc.SIMILARITY_KINDS)
    @pytest.mark.parametrize("temperature", [0.5, 2.0, 8.0])
    def test_matches_brute_force(self, similarity, temperature):
        r = rng(hash((similarity, temperature)) % 2 ** 32)
        for _ in range(10):
            m, d = int(r.integers(2, 9)), int(r.integers(1, 9))
            batch = random_batch(r, m, d)
            cfg = rnc.RncConfig(temperature=temperature, similarity=similarity)
            ours = rnc.rnc_batch_loss(batch, cfg)
            ref = rnc_reference(batch.embeddings, batch.labels, cfg)
            assert abs(ours - ref) <= 1e-10 * max(1.0, abs(ref))

    def test_per_sample_losses_average_to_batch(self):
        batch = random_batch(rng(1), 6, 4)
        cfg = rnc.RncConfig()
        per = [rnc.rnc_per_sample_loss(batch, i, cfg) for i in range(6)]
        assert abs(np.mean(per) - rnc.rnc_batch_loss(batch, cfg)) < 1e-12


class TestForcedValues:
    def test_two_sample_batch_is_zero(self):
        for seed in range(5):
            batch = random_batch(rng(seed), 2, 3)
            assert rnc.rnc_batch_loss(batch, rnc.RncConfig()) == 0.0

    def test_four_identical_samples_give_log3(self):
        emb = np.tile(rng(2).normal(size=3), (4, 1))
        batch = rnc.EmbeddingBatch(emb, np.full(4, 50.0))
        loss = rnc.rnc_batch_loss(batch, rnc.RncConfig())
        assert abs(loss - math.log(3.0)) <= 1e-12

    def test_permutation_invariance(self):
        r = rng(3)
        batch = random_batch(r, 7, 5)
        cfg = rnc.RncConfig()
        base = rnc.rnc_batch_loss(batch, cfg)
        perm = r.permutation(7)
        permuted = rnc.EmbeddingBatch(batch.embeddings[perm], batch.labels[perm])
        assert abs(rnc.rnc_batch_loss(permuted, cfg) - base) <= 1e-12

    def test_translation_invariance_negative_l2(self):
        r = rng(4)
        batch = random_batch(r, 6, 4)
        cfg = rnc.RncConfig(similarity="negative-l2")
        base = rnc.rnc_batch_loss(batch, cfg)
        shifted = rnc.EmbeddingBatch(batch.embeddings + r.normal(size=4),
                                     batch.labels)
        assert abs(rnc.rnc_batch_loss(shifted, cfg) - base) <= 1e-12

    @pytest.mark.parametrize("similarity", rnc.SIMILARITY_KINDS)
    def test_orthogonal_rotation_invariance(self, similarity):
        r = rng(5)
        batch = random_batch(r, 6, 4)
        q, _ = np.linalg.qr(r.normal(size=(4, 4)))
        cfg = rnc.RncConfig(similarity=similarity)
        base = rnc.rnc_batch_loss(batch, cfg)
        rotated = rnc.EmbeddingBatch(batch.embeddings @ q, batch.labels)
        assert abs(rnc.rnc_batch_loss(rotated, cfg) - base) <= 1e-12

    def test_coincident_embeddings_finite_gradient(self):
        emb = np.zeros((4, 3))
        batch = rnc.EmbeddingBatch(emb, np.array([1.0, 2.0, 3.0, 4.0]))
        loss, grad = rnc.rnc_batch_gradient(batch, rnc.RncConfig())
        assert np.isfinite(loss) and np.isfinite(grad).all()


class TestGradient:
    @pytest.mark.parametrize("similarity", rnc.SIMILARITY_KINDS)
    def test_matches_finite_differences(self, similarity):
        r = rng(6)
        batch = random_batch(r, 5, 4)
        cfg = rnc.RncConfig(similarity=similarity)
        rep = T.grad_check(lambda v: rnc.rnc_loss_graph(v, batch.labels, cfg),
                           batch.embeddings)
        assert rep.passed, rep

    def test_gradient_matches_loss_graph(self):
        batch = random_batch(rng(7), 6, 3)
        cfg = rnc.RncConfig()
        loss, grad = rnc.rnc_batch_gradient(batch, cfg)
        assert abs(loss - rnc.rnc_batch_loss(batch, cfg)) < 1e-14
        assert grad.shape == batch.embeddings.shape


class TestValidation:
    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            rnc.RncConfig(temperature=0.0).validate()

    def test_bad_similarity(self):
        with pytest.raises(ValueError):
            rnc.RncConfig(similarity="dot").validate()

    def test_bad_batch_mode(self):
        with pytest.raises(ValueError):
            rnc.RncConfig(batch_mode="triplets").validate()

    def test_single_sample_batch_rejected(self):
        with pytest.raises(ValueError):
            rnc.EmbeddingBatch(np.zeros((1, 3)), np.zeros(1))

    def test_nonfinite_batch_rejected(self):
        with pytest.raises(ValueError):
            rnc.EmbeddingBatch(np.array([[np.nan, 0.0], [0.0, 1.0]]),
                               np.array([1.0, 2.0]))


class TestL1:
    def test_value_and_subgradient(self):
        loss, grad = rnc.l1_loss([1.0, 4.0], [2.0, 2.0])
        assert loss == 1.5
        np.testing.assert_allclose(grad, [-0.5, 0.5])

    def test_tie_subgradient_zero(self):
        _, grad = rnc.l1_loss([3.0], [3.0])
        assert grad[0] == 0.0

    def test_graph_matches_closed_form(self):
        r = rng(8)
        p, t = r.normal(size=6), r.normal(size=6)
        tape = T.Tape()
        out = rnc.l1_loss_graph(tape.tensor(p), t)
        assert abs(out.item() - rnc.l1_loss(p, t)[0]) < 1e-15
