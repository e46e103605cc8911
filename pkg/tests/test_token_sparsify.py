#!/usr/bin/env python3

"""Unit tests for the token sparsification module."""

from unittest.mock import patch

import numpy as np
import pytest
from scipy.special import erf

from config import ConfigError
from tensor_autograd import GRADCHECK_DTYPE, Tensor, backward, tensor_sum
from token_sparsify import (
    AlignmentError,
    PredictorWeights,
    SparsifyConfig,
    apply_record,
    derive_positions,
    dynamicvit_sparsify,
    evit_sparsify,
    keep_count,
    propagate_sources,
    sparsified_count,
    sparsify_tokens,
    tome_merge,
)
from vit_backbone import AttnTrace


def _tokens(rows):
    return Tensor(np.asarray(rows, dtype=GRADCHECK_DTYPE))


def _hand_case():
    """CLS plus four 2-D patch tokens."""
    return _tokens([[9.0, 9.0], [1.0, 0.0], [0.0, 1.0], [3.0, 0.0], [0.0, 6.0]])


def _ranked(scores):
    """Indices by descending score, ties to the lower index, by plain sorting."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


class TestKeepCount:
    """Tests for keep_count."""

    def test_examples(self):
        """ceil(r (N - 1)) for the default schedule."""
        assert keep_count(197, 0.7) == 138
        assert keep_count(140, 0.7) == 98
        assert keep_count(100, 0.7) == 70

    def test_keep_all(self):
        """r = 1 keeps every patch token."""
        assert keep_count(17, 1.0) == 16

    def test_exact_products_do_not_round_up(self):
        """0.7 x 10 keeps 7 tokens, not 8."""
        assert keep_count(11, 0.7) == 7

    @pytest.mark.parametrize("r", [0.0, -0.1, 1.5])
    def test_rate_out_of_range(self, r):
        """Keep rates outside (0, 1] raise ConfigError."""
        with pytest.raises(ConfigError):
            keep_count(10, r)

    def test_needs_a_patch_token(self):
        """A CLS-only sequence is rejected."""
        with pytest.raises(ConfigError):
            keep_count(1, 0.5)


class TestSparsifyConfig:
    """Tests for sparsification configuration."""

    def test_derive_positions(self):
        """Positions follow start layer and interval up to the depth."""
        assert derive_positions(4, 3, 12) == (4, 7, 10)
        assert derive_positions(3, 2, 12) == (3, 5, 7, 9, 11)
        assert derive_positions(2, 2, 6) == (2, 4, 6)

    def test_positions_must_increase(self):
        """Unsorted positions are rejected."""
        with pytest.raises(ConfigError):
            SparsifyConfig(positions=(7, 4)).validate(12)

    def test_positions_within_depth(self):
        """Positions beyond the last layer are rejected."""
        with pytest.raises(ConfigError, match="exceed"):
            SparsifyConfig(positions=(4, 13)).validate(12)

    def test_unknown_operator(self):
        """Unknown operator names are rejected."""
        with pytest.raises(ConfigError):
            SparsifyConfig(operator="random").validate()

    def test_counts_per_strategy(self):
        """Merge keeps K + 2 tokens, drop K + 1 and argmax K + 2."""
        assert sparsified_count(197, SparsifyConfig(strategy="merge")) == 140
        assert sparsified_count(197, SparsifyConfig(strategy="drop")) == 139
        assert sparsified_count(197, SparsifyConfig(strategy="argmax")) == 140
        assert sparsified_count(197, SparsifyConfig(keep_rate=1.0)) == 197

    def test_tome_count(self):
        """ToMe removes at most one token per A-set member."""
        assert sparsified_count(5, SparsifyConfig(operator="tome", keep_rate=0.5)) == 3
        assert sparsified_count(6, SparsifyConfig(operator="tome", keep_rate=0.2)) == 3


class TestEvit:
    """Tests for EViT selection and fusion."""

    def test_hand_case(self):
        """a = [0.4, 0.3, 0.2, 0.1], r = 0.5 keeps x1, x2 and fuses (2/3) x3 + (1/3) x4."""
        tokens = _hand_case()
        out, record = evit_sparsify(tokens, AttnTrace.from_scores([0.4, 0.3, 0.2, 0.1]), 0.5)

        assert record.kept_indices == (0, 1)
        assert record.merge_indices == (2, 3)
        np.testing.assert_allclose(record.merge_weights, [2 / 3, 1 / 3], atol=1e-12)
        assert record.output_count == 4
        np.testing.assert_allclose(
            out.data, [[9.0, 9.0], [1.0, 0.0], [0.0, 1.0], [2.0, 2.0]], atol=1e-12
        )

    def test_kept_order_is_descending_score(self):
        """Kept tokens appear by descending attention."""
        tokens = _hand_case()
        _, record = evit_sparsify(tokens, AttnTrace.from_scores([0.1, 0.4, 0.2, 0.3]), 0.5)
        assert record.kept_indices == (1, 3)
        assert record.merge_indices == (2, 0)

    def test_keep_all_has_no_fused_token(self):
        """r = 1.0 returns the input tokens up to order with no fused token."""
        tokens = _hand_case()
        out, record = evit_sparsify(tokens, AttnTrace.from_scores([0.1, 0.4, 0.2, 0.3]), 1.0)
        assert not record.has_fused
        assert record.output_count == 5
        assert sorted(map(tuple, out.data[1:])) == sorted(map(tuple, tokens.data[1:]))

    def test_uniform_scores_break_ties_by_index(self):
        """Equal scores keep the lowest indices and fuse the rest with equal weights."""
        tokens = _hand_case()
        out, record = evit_sparsify(tokens, AttnTrace.from_scores([0.25] * 4), 0.5)
        assert record.kept_indices == (0, 1)
        np.testing.assert_allclose(out.data[3], [1.5, 3.0], atol=1e-12)

    def test_all_zero_trace_falls_back_to_uniform(self):
        """An all-zero trace fuses with uniform weights and logs a warning."""
        with patch("token_sparsify.logger") as mock_logger:
            out, record = evit_sparsify(_hand_case(), AttnTrace.from_scores([0.0] * 4), 0.5)
        mock_logger.warning.assert_called_once()
        np.testing.assert_allclose(record.merge_weights, [0.5, 0.5])
        np.testing.assert_allclose(out.data[3], [1.5, 3.0], atol=1e-12)

    def test_drop_and_argmax(self):
        """drop keeps CLS + K; argmax also keeps the best inattentive token."""
        trace = AttnTrace.from_scores([0.4, 0.3, 0.2, 0.1])
        dropped, _ = evit_sparsify(_hand_case(), trace, 0.5, strategy="drop")
        argmax, record = evit_sparsify(_hand_case(), trace, 0.5, strategy="argmax")
        assert dropped.shape == (3, 2)
        assert argmax.shape == (4, 2)
        assert record.kept_indices == (0, 1, 2)

    def test_trace_length_mismatch(self):
        """A trace that does not cover N - 1 tokens raises AlignmentError."""
        with pytest.raises(AlignmentError):
            evit_sparsify(_hand_case(), AttnTrace.from_scores([0.5, 0.5]), 0.5)

    def test_fusion_weights_receive_gradient(self):
        """Fusion weights stay connected to the attention scores."""
        scores = Tensor(np.array([0.4, 0.3, 0.2, 0.1]), requires_grad=True, dtype=GRADCHECK_DTYPE)
        out, _ = evit_sparsify(_hand_case(), AttnTrace(avg_cls_attn=scores.data, scores=scores), 0.5)
        backward(tensor_sum(out))
        assert scores.grad is not None
        assert np.any(scores.grad[2:])

    def test_matches_sort_oracle(self):
        """Kept sets and fused tokens match a plain-sort oracle on 200 random inputs."""
        rng = np.random.default_rng(1234)
        for _ in range(200):
            n = int(rng.integers(3, 13))
            c = int(rng.integers(1, 9))
            r = float(rng.choice([0.3, 0.5, 0.7, 0.9]))
            x = rng.normal(size=(n, c))
            scores = rng.uniform(0.01, 1.0, size=n - 1)

            out, record = evit_sparsify(Tensor(x), AttnTrace.from_scores(scores), r)

            k = int(np.ceil(round(r * (n - 1), 9)))
            ranked = _ranked(list(scores))
            assert list(record.kept_indices) == ranked[:k]
            expected = [x[0]] + [x[1 + i] for i in ranked[:k]]
            rest = ranked[k:]
            if rest:
                w = np.array([scores[i] for i in rest])
                expected.append((w[:, None] * x[[1 + i for i in rest]]).sum(axis=0) / w.sum())
            np.testing.assert_allclose(out.data, np.array(expected), atol=1e-6)


class TestDynamicViT:
    """Tests for predictor-scored selection."""

    def _predictor(self):
        # score(x) = gelu(x[0]), increasing for positive x[0]
        return PredictorWeights(
            fc1_weight=Tensor([[1.0], [0.0]], requires_grad=True, dtype=GRADCHECK_DTYPE),
            fc1_bias=Tensor([0.0], requires_grad=True, dtype=GRADCHECK_DTYPE),
            fc2_weight=Tensor([[1.0]], requires_grad=True, dtype=GRADCHECK_DTYPE),
            fc2_bias=Tensor([0.0], requires_grad=True, dtype=GRADCHECK_DTYPE),
        )

    def _increasing_tokens(self):
        return _tokens([[0.0, 0.0], [1.0, 5.0], [2.0, 6.0], [3.0, 7.0], [4.0, 8.0]])

    def test_forced_order(self):
        """Scores increasing with index keep the last two tokens at rho = 0.5."""
        out, record = dynamicvit_sparsify(self._increasing_tokens(), self._predictor(), 0.5)
        assert set(record.kept_indices) == {2, 3}
        assert record.kept_indices == (3, 2)
        assert out.shape == (4, 2)
        np.testing.assert_allclose(record.merge_weights.sum(), 1.0, atol=1e-6)

    def test_keep_all_is_identity_on_token_set(self):
        """rho = 1.0 keeps every token and fuses nothing."""
        out, record = dynamicvit_sparsify(self._increasing_tokens(), self._predictor(), 1.0)
        assert not record.has_fused
        assert sorted(record.kept_indices) == [0, 1, 2, 3]
        assert out.shape == (5, 2)

    def test_drop_mode_prunes(self):
        """drop removes the discarded tokens outright."""
        out, record = dynamicvit_sparsify(self._increasing_tokens(), self._predictor(), 0.5, strategy="drop")
        assert out.shape == (3, 2)
        assert record.output_count == 3

    def test_predictor_receives_gradient(self):
        """Gradients reach the predictor through the kept scores."""
        predictor = self._predictor()
        out, _ = dynamicvit_sparsify(self._increasing_tokens(), predictor, 0.5, strategy="drop")
        backward(tensor_sum(out))
        assert predictor.fc2_bias.grad is not None
        assert predictor.fc2_bias.grad[0] != 0.0

    def test_channel_mismatch(self):
        """A predictor built for another width raises ConfigError."""
        with pytest.raises(ConfigError):
            dynamicvit_sparsify(_tokens(np.ones((5, 3))), self._predictor(), 0.5)

    def test_matches_sort_oracle(self):
        """Kept sets match an exhaustive sort of independently computed scores."""
        rng = np.random.default_rng(99)
        for _ in range(200):
            n = int(rng.integers(3, 13))
            c = int(rng.integers(1, 9))
            hidden = int(rng.integers(1, 5))
            x = rng.normal(size=(n, c))
            w1, b1 = rng.normal(size=(c, hidden)), rng.normal(size=hidden)
            w2, b2 = rng.normal(size=(hidden, 1)), rng.normal(size=1)
            predictor = PredictorWeights(Tensor(w1), Tensor(b1), Tensor(w2), Tensor(b2))

            _, record = dynamicvit_sparsify(Tensor(x), predictor, 0.5)

            h = x[1:] @ w1 + b1
            scores = ((0.5 * h * (1.0 + erf(h / np.sqrt(2.0)))) @ w2 + b2).reshape(-1)
            k = int(np.ceil(round(0.5 * (n - 1), 9)))
            assert list(record.kept_indices) == _ranked(list(scores))[:k]


class TestToMe:
    """Tests for bipartite soft matching."""

    def test_identical_tokens_merge_to_either(self):
        """Merging two identical tokens yields that token."""
        out, record = tome_merge(_tokens([[0.0, 0.0], [1.0, 2.0], [1.0, 2.0]]), 1)
        assert out.shape == (2, 2)
        np.testing.assert_allclose(out.data[1], [1.0, 2.0])
        assert record.pairs == ((0, 1),)

    def test_duplicate_pair_wins(self):
        """Among orthogonal tokens the duplicated pair merges."""
        e1, e2, e3 = [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]
        out, record = tome_merge(_tokens([[0.0, 0.0, 0.0], e1, e2, e3, e1]), 3)
        assert record.pairs == ((0, 3),)
        # CLS, unmerged A (position 2), then B (positions 1 and 3)
        np.testing.assert_allclose(out.data[1:], [e3, e2, e1])

    def test_merge_count_is_capped(self):
        """Requesting more merges than A tokens caps at |A| and warns."""
        tokens = _tokens(np.random.default_rng(0).normal(size=(6, 3)))
        with patch("token_sparsify.logger") as mock_logger:
            out, record = tome_merge(tokens, 1)
        mock_logger.warning.assert_called_once()
        assert len(record.pairs) == 3
        assert out.shape == (3, 3)

    def test_target_must_shrink(self):
        """A target that does not reduce the count is rejected."""
        with pytest.raises(ConfigError):
            tome_merge(_hand_case(), 4)

    def test_dispatch_at_keep_all_is_identity(self):
        """ToMe with r = 1.0 leaves the tokens untouched."""
        tokens = _hand_case()
        out, record = sparsify_tokens(tokens, None, SparsifyConfig(operator="tome", keep_rate=1.0), 1)
        np.testing.assert_array_equal(out.data, tokens.data)
        assert record.output_count == 5

    def test_matches_exhaustive_oracle(self):
        """Merged tokens match an oracle enumerating every A to B proposal."""
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(4, 13))
            c = int(rng.integers(1, 9))
            x = rng.normal(size=(n, c))
            body = x[1:]
            a_pos = list(range(0, n - 1, 2))
            b_pos = list(range(1, n - 1, 2))
            m = int(rng.integers(1, len(a_pos) + 1))

            out, record = tome_merge(Tensor(x), (n - 1) - m)

            def cos(i, j):
                return body[i] @ body[j] / (np.linalg.norm(body[i]) * np.linalg.norm(body[j]))

            proposals = []
            for a in a_pos:
                sims = [cos(a, b) for b in b_pos]
                best = max(range(len(b_pos)), key=lambda j: (sims[j], -j))
                proposals.append((sims[best], a, b_pos[best]))
            chosen = sorted(proposals, key=lambda p: (-p[0], p[1]))[:m]
            merged_a = {a for _, a, _ in chosen}
            groups = {b: [b] for b in b_pos}
            for _, a, b in chosen:
                groups[b].append(a)
            expected = [x[0]] + [body[a] for a in a_pos if a not in merged_a]
            expected += [body[groups[b]].mean(axis=0) for b in b_pos]

            assert sorted(record.pairs) == sorted((a, b) for _, a, b in chosen)
            np.testing.assert_allclose(out.data, np.array(expected), atol=1e-6)


class TestApplyRecord:
    """Tests for replaying records on other features."""

    def test_replay_reproduces_output(self):
        """Applying a record to its own input reproduces the sparsified tokens bit-exactly."""
        tokens = _tokens(np.random.default_rng(3).normal(size=(9, 4)))
        trace = AttnTrace.from_scores(np.random.default_rng(4).uniform(size=8))
        out, record = evit_sparsify(tokens, trace, 0.5)
        np.testing.assert_array_equal(apply_record(tokens, record).data, out.data)

    def test_replay_on_other_features(self):
        """The 4-token hand record applied to a 5 x 2 feature tensor uses the same arithmetic."""
        _, record = evit_sparsify(_hand_case(), AttnTrace.from_scores([0.4, 0.3, 0.2, 0.1]), 0.5)
        features = _tokens([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0], [6.0, 3.0], [0.0, 9.0]])
        out = apply_record(features, record)
        np.testing.assert_allclose(
            out.data, [[0.0, 1.0], [2.0, 3.0], [4.0, 5.0], [4.0, 5.0]], atol=1e-12
        )

    def test_replay_tome_record(self):
        """ToMe records replay through their combine matrix."""
        tokens = _tokens(np.random.default_rng(5).normal(size=(7, 3)))
        out, record = tome_merge(tokens, 4)
        np.testing.assert_allclose(apply_record(tokens, record).data, out.data, atol=1e-12)

    def test_count_mismatch_names_both_counts(self):
        """Replaying on the wrong number of rows raises AlignmentError naming both counts."""
        _, record = evit_sparsify(_hand_case(), AttnTrace.from_scores([0.4, 0.3, 0.2, 0.1]), 0.5)
        with pytest.raises(AlignmentError, match="5 tokens.*4"):
            apply_record(_tokens(np.zeros((4, 2))), record)

    def test_propagate_sources(self):
        """Sources follow kept tokens and collect the fused patches."""
        _, record = evit_sparsify(_hand_case(), AttnTrace.from_scores([0.1, 0.4, 0.2, 0.3]), 0.5)
        sources = propagate_sources([(0,), (1,), (2,), (3,)], record)
        assert sources == [(1,), (3,), (0, 2)]
