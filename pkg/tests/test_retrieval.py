"""Tests for needle-in-a-haystack retrieval scoring and retrieval-head sets."""

import itertools

import numpy as np
import pytest

from probeforge.constructions import (
    COPY_HEAD,
    TOY_ANSWER,
    TOY_HAYSTACK,
    TOY_NEEDLE,
    TOY_QUESTION,
    copy_checkpoint,
)
from probeforge.errors import CompatibilityError, ConfigError, InputError
from probeforge.model import GenerationOutput, TraceRecord
from probeforge.retrieval import (
    DEFAULT_CONTEXT_LENGTHS,
    DEFAULT_DEPTHS,
    NeedleConfig,
    NeedlePrompt,
    RetrievalScoreMap,
    build_needle_prompt,
    classify_retrieval_heads,
    common_retrieval_heads,
    count_better_heads,
    insertion_index,
    overall_retrieval_score,
    retrieval_head_intersection,
    run_needle_suite,
    score_difference_map,
    score_generation,
)
from probeforge.tokenizer import encode

OTHER_HAYSTACK = (
    "winter came early to the valley that year, and the shepherds moved the flocks down "
    "from the high meadows while the snow was still soft. "
)


def toy_config(**overrides):
    values = dict(needle=TOY_NEEDLE, answer=TOY_ANSWER, question=TOY_QUESTION, haystack_source=TOY_HAYSTACK)
    values.update(overrides)
    return NeedleConfig(**values)


def one_hot_step(seq_len, position):
    matrix = np.zeros((seq_len, seq_len), dtype=np.float32)
    matrix[-1, position] = 1.0
    return TraceRecord(attn=[[matrix]])


def score_map(values):
    return RetrievalScoreMap(np.asarray(values, dtype=np.float64))


@pytest.fixture(scope="module")
def copy_model():
    return copy_checkpoint()


class TestNeedleConfig:
    """Test suite configuration."""

    def test_defaults(self):
        """Test the default grid."""
        cfg = toy_config()
        assert cfg.context_lengths == list(DEFAULT_CONTEXT_LENGTHS)
        assert cfg.depths() == list(DEFAULT_DEPTHS)
        assert len(cfg.configurations()) == 25

    def test_invalid_depth(self):
        """Test depths outside [0, 1]."""
        with pytest.raises(ConfigError):
            toy_config(depth_fractions=[0.5, 1.5])

    def test_answer_must_be_in_needle(self):
        """Test the answer text has to occur in the needle."""
        with pytest.raises(ConfigError):
            toy_config(answer="1234")

    def test_random_depths_seeded(self):
        """Test random depth mode is reproducible per seed."""
        a = toy_config(depth_fractions="random", seed=3).depths()
        assert a == toy_config(depth_fractions="random", seed=3).depths()
        assert a != toy_config(depth_fractions="random", seed=4).depths()
        assert len(a) == 5 and all(0.0 <= d <= 1.0 for d in a)

    def test_unknown_field(self):
        """Test from_dict refuses unknown keys."""
        with pytest.raises(ConfigError):
            NeedleConfig.from_dict({"needle": "x", "question": "q", "haystack_source": "", "depth": 1})

    def test_malformed_values(self):
        """Test from_dict turns bad JSON values into config errors."""
        with pytest.raises(ConfigError):
            NeedleConfig.from_dict({"needle": "x", "question": "q", "haystack_source": "", "depth_fractions": ["x"]})
        with pytest.raises(ConfigError):
            NeedleConfig.from_dict({"needle": "x", "question": "q", "haystack_source": "", "context_lengths": [None]})
        with pytest.raises(ConfigError):
            NeedleConfig.from_dict(["needle", "question"])


class TestNeedlePrompt:
    """Test prompt rendering."""

    def test_insertion_index(self):
        """Test round-half-up placement."""
        assert insertion_index(0.0, 64) == 0
        assert insertion_index(1.0, 64) == 64
        assert insertion_index(0.5, 3) == 2

    def test_answer_positions(self):
        """Test the recorded answer positions hold the answer tokens."""
        cfg = toy_config()
        for n, depth in itertools.product([0, 7, 64], [0.0, 0.5, 1.0]):
            prompt = build_needle_prompt(cfg, n, depth, 0)
            assert [prompt.tokens[p] for p in prompt.answer_positions] == encode(TOY_ANSWER)
            assert len(prompt.tokens) == 1 + n + len(TOY_NEEDLE) + len(TOY_QUESTION)
            start, end = prompt.needle_span
            assert prompt.tokens[start:end] == encode(TOY_NEEDLE)

    def test_filler_seeded(self):
        """Test filler depends on seed and repetition only."""
        cfg = toy_config()
        assert build_needle_prompt(cfg, 64, 0.5, 0).tokens == build_needle_prompt(cfg, 64, 0.5, 0).tokens
        assert build_needle_prompt(cfg, 64, 0.5, 0).tokens != build_needle_prompt(cfg, 64, 0.5, 1).tokens


class TestScoreGeneration:
    """Test per-step membership decisions on hand-made traces."""

    def test_both_conditions_required(self):
        """Test attended position must be on the answer and hold the emitted token."""
        prompt = NeedlePrompt(tokens=[257, 5, 6], needle_span=(1, 3), answer_positions=[1, 2], answer_tokens=[5, 6])
        output = GenerationOutput([257, 5, 6], [5, 9], [one_hot_step(3, 1), one_hot_step(4, 2)])
        scores, decisions = score_generation(output, prompt)
        assert scores[0, 0] == 0.5
        assert [(d["on_answer"], d["same_token"]) for d in decisions] == [(True, True), (True, False)]

    def test_position_and_token_modes(self):
        """Test repeated answer tokens count once per position, or by multiset in token mode."""
        prompt = NeedlePrompt(tokens=[257, 5, 5], needle_span=(1, 3), answer_positions=[1, 2], answer_tokens=[5, 5])
        output = GenerationOutput([257, 5, 5], [5, 5], [one_hot_step(3, 1), one_hot_step(4, 1)])
        assert score_generation(output, prompt, "position")[0][0, 0] == 0.5
        assert score_generation(output, prompt, "token")[0][0, 0] == 1.0

    def test_needs_trace(self):
        """Test untraced generations are refused."""
        prompt = NeedlePrompt([257, 5], (1, 2), [1], [5])
        with pytest.raises(InputError):
            score_generation(GenerationOutput([257, 5], [5], []), prompt)


class TestCopyHeadSuite:
    """Test the hand-built copy-head model over the full grid."""

    def test_full_grid(self, copy_model):
        """Test the designated head scores 1 and every other head 0 on every configuration."""
        score = run_needle_suite(copy_model, toy_config())
        assert len(score.configurations) == 25
        assert score.score(*COPY_HEAD) >= 0.99
        others = [score.score(l, h) for l in range(2) for h in range(2) if (l, h) != COPY_HEAD]
        assert max(others) <= 0.05
        for configuration in score.configurations:
            assert configuration.generated_text == TOY_ANSWER
            designated = [d for d in configuration.decisions if (d["layer"], d["head"]) == COPY_HEAD]
            assert len(designated) == len(TOY_ANSWER)
            assert all(d["on_answer"] and d["same_token"] for d in designated)
            assert not any(
                d["on_answer"] and d["same_token"]
                for d in configuration.decisions
                if (d["layer"], d["head"]) != COPY_HEAD
            )

    def test_mean_of_configurations(self, copy_model):
        """Test the map equals the mean of per-configuration maps."""
        score = run_needle_suite(copy_model, toy_config(context_lengths=[0, 32], depth_fractions=[0.0, 1.0]))
        expected = np.mean([c.scores for c in score.configurations], axis=0)
        np.testing.assert_allclose(score.scores, expected, atol=1e-6)

    def test_filler_invariance(self, copy_model):
        """Test the score does not depend on the filler text."""
        small = dict(context_lengths=[32, 96], depth_fractions=[0.25, 0.75])
        a = run_needle_suite(copy_model, toy_config(**small))
        b = run_needle_suite(copy_model, toy_config(haystack_source=OTHER_HAYSTACK, **small))
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_workers_merge_deterministically(self, copy_model):
        """Test threaded and serial runs agree."""
        small = dict(context_lengths=[0, 16, 48], depth_fractions=[0.5])
        serial = run_needle_suite(copy_model, toy_config(**small))
        threaded = run_needle_suite(copy_model, toy_config(workers=3, **small))
        np.testing.assert_array_equal(serial.scores, threaded.scores)
        assert [c.key for c in serial.configurations] == [c.key for c in threaded.configurations]

    def test_over_budget(self, copy_model):
        """Test a needle that does not fit the context window."""
        with pytest.raises(ConfigError):
            run_needle_suite(copy_model, toy_config(context_lengths=[640], depth_fractions=[0.5]))

    def test_json_round_trip(self, copy_model):
        """Test the score document reloads."""
        score = run_needle_suite(copy_model, toy_config(context_lengths=[0], depth_fractions=[0.0]))
        data = score.to_dict()
        assert data["aggregates"]["retrieval_heads"] == [list(COPY_HEAD)]
        reloaded = RetrievalScoreMap.from_dict(data)
        np.testing.assert_array_equal(reloaded.scores, score.scores)
        assert reloaded.config_echo["needle"] == TOY_NEEDLE


class TestRetrievalHeads:
    """Test head classification and set operations."""

    def test_all_zero(self):
        """Test an all-zero map has no retrieval heads."""
        assert classify_retrieval_heads(score_map(np.zeros((3, 4)))) == set()

    def test_single_head(self):
        """Test one nonzero entry."""
        values = np.zeros((3, 4))
        values[2, 1] = 0.5
        assert classify_retrieval_heads(score_map(values)) == {(2, 1)}

    def test_strict_threshold(self):
        """Test 0.1 itself is not above the threshold."""
        assert classify_retrieval_heads(score_map([[0.05, 0.1, 0.11]]), 0.1) == {(0, 2)}

    def test_monotone_in_threshold(self):
        """Test a larger threshold gives a subset."""
        values = np.random.default_rng(0).uniform(size=(4, 4))
        sets = [classify_retrieval_heads(score_map(values), t) for t in np.linspace(0, 1, 11)]
        assert all(later <= earlier for earlier, later in zip(sets, sets[1:]))

    def test_threshold_range(self):
        """Test thresholds outside [0, 1]."""
        with pytest.raises(ConfigError):
            classify_retrieval_heads(score_map([[0.5]]), 1.5)

    def test_intersection(self):
        """Test intersections against brute-force set algebra."""
        rng = np.random.default_rng(1)
        maps = [score_map(rng.uniform(size=(3, 3)) * 0.3) for _ in range(3)]
        expected = {
            (l, h) for l in range(3) for h in range(3)
            if all(m.scores[l, h] > 0.1 for m in maps)
        }
        assert retrieval_head_intersection(maps) == expected
        assert retrieval_head_intersection(maps[:1]) == classify_retrieval_heads(maps[0])

    def test_disjoint_intersection(self):
        """Test disjoint head sets."""
        assert retrieval_head_intersection([score_map([[0.5, 0.0]]), score_map([[0.0, 0.5]])]) == set()

    def test_intersection_shape_mismatch(self):
        """Test maps of different shapes."""
        with pytest.raises(CompatibilityError):
            retrieval_head_intersection([score_map(np.zeros((2, 2))), score_map(np.zeros((2, 3)))])

    def test_overall_is_sum(self):
        """Test the overall score sums every head."""
        assert overall_retrieval_score(score_map(np.zeros((2, 2)))) == 0.0
        assert overall_retrieval_score(score_map([[0.5, 0.0], [0.0, 0.5]])) == 1.0
        values = np.random.default_rng(2).uniform(size=(5, 6))
        assert overall_retrieval_score(score_map(values)) == pytest.approx(sum(values.ravel()))

    def test_difference(self):
        """Test a - b is zero for equal maps and antisymmetric."""
        rng = np.random.default_rng(3)
        a, b = score_map(rng.uniform(size=(3, 4))), score_map(rng.uniform(size=(3, 4)))
        assert np.all(score_difference_map(a, a) == 0.0)
        np.testing.assert_array_equal(score_difference_map(a, b), -score_difference_map(b, a))
        np.testing.assert_array_equal(score_difference_map(a, b), a.scores - b.scores)
        with pytest.raises(CompatibilityError):
            score_difference_map(a, score_map(np.zeros((4, 3))))

    def test_common_and_better_heads(self):
        """Test shared-head tables and head counts over the union."""
        a = score_map([[0.5, 0.2], [0.0, 0.3]])
        b = score_map([[0.4, 0.0], [0.2, 0.6]])
        table = common_retrieval_heads([a, b], ["a", "b"])
        assert list(table) == [(0, 0), (1, 1)]
        assert table[(1, 1)] == {"a": 0.3, "b": 0.6}
        assert count_better_heads(a, b) == (2, 2)

    def test_scores_in_range(self):
        """Test the map refuses values outside [0, 1]."""
        with pytest.raises(InputError):
            score_map([[1.2]])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
