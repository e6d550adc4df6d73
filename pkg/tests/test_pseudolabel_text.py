import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptcones import (
    AlignmentMap,
    ConceptPrototypes,
    GroupDictionary,
    Vocabulary,
    estimate_s_tilde,
    procrustes_align,
    solve_nnls,
    word_captions,
    zero_shot_multilabel,
)
from conceptcones.errors import DegenerateCrossCovariance, DimensionMismatch


class TestPseudoLabels:
    def test_exactly_s_tilde_ones(self, rng):
        P = ConceptPrototypes.from_raw(rng.standard_normal((8, 5)))
        L = zero_shot_multilabel(rng.standard_normal((8, 30)), P, 2)
        np.testing.assert_array_equal(L.values.sum(axis=1), 2)

    def test_matches_naive_ranking(self, rng):
        """[DERIVED] per-item cosine sort with ties to the lower concept index."""
        W = rng.standard_normal((6, 4))
        P = ConceptPrototypes.from_raw(W)
        X = rng.standard_normal((6, 15)) * 5
        L = zero_shot_multilabel(X, P, 3)
        Wn = W / np.linalg.norm(W, axis=0)
        for i in range(15):
            cos = [Wn[:, j] @ X[:, i] / np.linalg.norm(X[:, i]) for j in range(4)]
            top = sorted(range(4), key=lambda j: (-cos[j], j))[:3]
            assert set(np.flatnonzero(L.values[i])) == set(top)

    def test_tie_to_lower_index(self):
        P = ConceptPrototypes(np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        L = zero_shot_multilabel(np.array([[1.0], [0.0]]), P, 1)
        assert L.values.tolist() == [[1, 0, 0]]

    def test_s_tilde_range(self, rng):
        P = ConceptPrototypes.from_raw(rng.standard_normal((3, 2)))
        with pytest.raises(ValueError):
            zero_shot_multilabel(np.ones((3, 1)), P, 3)

    def test_names_kept(self, rng):
        P = ConceptPrototypes.from_raw(rng.standard_normal((3, 2)), ("dog", "sky"))
        assert zero_shot_multilabel(np.ones((3, 2)), P, 1).concept_names == ("dog", "sky")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 1), min_size=4, max_size=4).filter(any),
                    min_size=1, max_size=20))
    def test_estimate_s_tilde(self, rows):
        mean = sum(sum(r) for r in rows) / len(rows)
        assert estimate_s_tilde(np.array(rows)) == int(np.floor(mean + 0.5))

    def test_estimate_half_rounds_up(self):
        assert estimate_s_tilde(np.array([[1, 0], [1, 1]])) == 2


class TestCaptions:
    def _vocab(self, rng, d=6, V=12):
        E = rng.standard_normal((d, V))
        return Vocabulary([f"w{i}" for i in range(V)], E / np.linalg.norm(E, axis=0))

    def test_ranking_matches_nnls_errors(self, rng):
        """[DERIVED] per-word NNLS residuals sorted by (error, word)."""
        vocab = self._vocab(rng)
        B = rng.standard_normal((6, 2))
        B /= np.linalg.norm(B, axis=0)
        got = word_captions(B, vocab, top_n=4)
        errs = [(solve_nnls(B, vocab.embeddings[:, i]).residual_norm, w)
                for i, w in enumerate(vocab.words)]
        expect = sorted(errs)[:4]
        assert [w for w, _ in got] == [w for _, w in expect]
        np.testing.assert_allclose([e for _, e in got], [e for e, _ in expect])

    def test_word_in_cone_ranks_first(self, rng):
        vocab = self._vocab(rng)
        B = np.column_stack([vocab.embeddings[:, 3], rng.standard_normal(6)])
        B /= np.linalg.norm(B, axis=0)
        word, err = word_captions(B, vocab, 1)[0]
        assert word == "w3" and err < 1e-12

    def test_tie_broken_by_word(self):
        E = np.array([[1.0, 1.0], [0.0, 0.0]])
        vocab = Vocabulary(["zeta", "alpha"], E)
        got = word_captions(np.array([[0.0], [1.0]]), vocab, 2)
        assert [w for w, _ in got] == ["alpha", "zeta"]

    def test_prepare_centers_with_own_mean(self, rng):
        raw = rng.standard_normal((5, 8)) + 3
        vocab = Vocabulary.prepare([str(i) for i in range(8)], raw)
        unit = raw / np.linalg.norm(raw, axis=0)
        c = unit - unit.mean(axis=1, keepdims=True)
        np.testing.assert_allclose(vocab.embeddings, c / np.linalg.norm(c, axis=0))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            word_captions(np.ones((3, 1)) / np.sqrt(3), self._vocab(rng), 1)


class TestProcrustes:
    def test_recovers_rotation(self, rng):
        Q = np.linalg.qr(rng.standard_normal((7, 7)))[0]
        X = rng.standard_normal((7, 40))
        R = procrustes_align(X, Q @ X)
        np.testing.assert_allclose(R.matrix, Q, atol=1e-10)
        np.testing.assert_allclose(R(X[:, 0]), Q @ X[:, 0], atol=1e-10)

    def test_beats_random_orthogonal_maps(self, rng):
        """[DERIVED] no random orthogonal matrix achieves a smaller residual."""
        X = rng.standard_normal((5, 30))
        Y = rng.standard_normal((5, 30))
        best = np.linalg.norm(procrustes_align(X, Y).matrix @ X - Y)
        for _ in range(300):
            Q = np.linalg.qr(rng.standard_normal((5, 5)))[0]
            assert np.linalg.norm(Q @ X - Y) >= best - 1e-10

    def test_orthogonality_enforced(self):
        with pytest.raises(ValueError):
            AlignmentMap(2 * np.eye(3))

    def test_degenerate(self):
        with pytest.raises(DegenerateCrossCovariance):
            procrustes_align(np.zeros((3, 4)), np.ones((3, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            procrustes_align(np.ones((3, 4)), np.ones((3, 5)))


def test_prototypes_must_be_unit():
    with pytest.raises(ValueError):
        ConceptPrototypes(2 * np.eye(3))


def test_dictionary_group_caption_roundtrip(rng):
    B = rng.standard_normal((6, 3))
    D = GroupDictionary(B / np.linalg.norm(B, axis=0), [1, 2])
    vocab = Vocabulary(["a", "b", "c"], D.atoms)
    assert word_captions(D.group(1), vocab, 2)[0][0] in ("b", "c")
