import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockattn.errors import ContractError, PositionRangeError
from blockattn.model import ModelConfig, ToyTransformer
from blockattn.segmentation import (
    AverageScorer,
    FixedScorer,
    HeadTrainConfig,
    Segmenter,
    SegmenterConfig,
    chunked_topk,
    cut_rate,
    decide_cuts,
    heuristic_segment,
    insert_candidates,
    make_example,
    match_offsets,
    next_token_scores,
    read_corpus,
    recursive_levels,
    recursive_segment,
    statistical_segment,
    strip_candidates,
    train_cut_head,
    write_corpus,
)
from blockattn.segmentation.core import _windows
from blockattn.synthetic import boundary_f1, planted_segmentation_corpus
from blockattn.tokenizer import CUT_ID, decode, encode

TEXT = encode("alpha one.\nbeta two!\ngamma\ndelta three? yes\nend")


def test_candidate_layout():
    c = insert_candidates(encode("ab\ncd\ne"))
    assert c.tokens == (CUT_ID, 97, 98, 10, CUT_ID, 99, 100, 10, CUT_ID, 101, CUT_ID)
    assert c.positions == (0, 4, 8, 10)
    assert c.text_offsets == (0, 3, 6, 7)
    assert c.internal_offsets == (3, 6)
    assert c.num_internal == 2 and c.n == 3


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="ab \n.!?", min_size=1, max_size=60), st.sampled_from(["newline", "space", "sentence_punctuation"]))
def test_insert_then_strip_round_trips(text, rule):
    ids = encode(text)
    c = insert_candidates(ids, rule)
    assert strip_candidates(c.tokens) == ids
    assert c.text_tokens() == ids
    assert list(c.internal_offsets) == match_offsets(ids, rule)
    for pos in c.positions:
        assert c.tokens[pos] == CUT_ID


def test_candidate_contracts():
    with pytest.raises(ContractError):
        insert_candidates([])
    with pytest.raises(ContractError):
        insert_candidates([1, CUT_ID, 2])
    with pytest.raises(ContractError):
        insert_candidates([1, 2], rule="tab")


def test_decide_cuts_and_threshold():
    c = insert_candidates(TEXT)
    assert c.internal_offsets == (11, 21, 27, 44)
    probs = np.array([0.9, 0.2, 0.6, 0.5])
    assert decide_cuts(c, probs, 0.5).boundaries == [11, 27, 44]
    assert decide_cuts(c, probs, 0.95).parallel_degree == 1
    with pytest.raises(ContractError):
        decide_cuts(c, probs, 1.0)
    with pytest.raises(ContractError):
        decide_cuts(c, probs[:2], 0.5)


def test_average_scorer_gives_requested_degree():
    for k in (1, 2, 3, 4):
        part = recursive_segment(TEXT, SegmenterConfig(), AverageScorer(k))
        assert part.parallel_degree == k
    with pytest.raises(ContractError):
        recursive_segment(TEXT, SegmenterConfig(), AverageScorer(6))


def test_recursion_only_refines():
    by_offset = {11: 0.9, 21: 0.7, 27: 0.6}
    cfg = SegmenterConfig(recursion_depth=3, thresholds=[0.8, 0.8, 0.8])
    levels = recursive_levels(TEXT, cfg, FixedScorer(by_offset))
    assert [lv.boundaries for lv in levels] == [[11], [11], [11]]
    cfg = SegmenterConfig(recursion_depth=2, thresholds=[0.65, 0.65])
    levels = recursive_levels(TEXT, cfg, FixedScorer(by_offset))
    assert set(levels[0].boundaries) <= set(levels[1].boundaries)


def test_segmenter_config_contracts():
    with pytest.raises(ContractError):
        SegmenterConfig(recursion_depth=2, thresholds=[0.5])
    with pytest.raises(ContractError):
        SegmenterConfig(recursion_depth=2, thresholds=[0.6, 0.4])
    with pytest.raises(ContractError):
        SegmenterConfig(thresholds=[0.0])
    with pytest.raises(ContractError):
        SegmenterConfig(recursion_depth=0, thresholds=[])


def test_windows_cover_each_candidate_once():
    ids = encode("x\n" * 40)
    c = insert_candidates(ids)
    wins = _windows(c, max_candidates=7, max_len=None)
    inside = [o for o in c.internal_offsets for lo, hi in wins if lo < o < hi]
    assert sorted(inside) == list(c.internal_offsets)
    for lo, hi in wins:
        assert sum(lo < o < hi for o in c.internal_offsets) <= 7


def test_windowed_scoring_equals_unwindowed_for_fixed_scorer():
    ids = encode("ab\n" * 30)
    truth = {o: (o % 7) / 7 for o in match_offsets(ids, "newline")}
    a = recursive_segment(ids, SegmenterConfig(max_candidates_per_block=4), FixedScorer(truth))
    b = recursive_segment(ids, SegmenterConfig(max_candidates_per_block=350), FixedScorer(truth))
    assert a == b


def test_heuristics():
    words = encode(" ".join(["w"] * 101))
    part = heuristic_segment(words, "average", 5)
    assert part.parallel_degree == 5
    pool = match_offsets(words, "space")
    assert len(pool) == 100
    assert [pool.index(b) for b in part.boundaries] == [20, 40, 60, 80]
    assert heuristic_segment(encode("no punctuation here"), "punctuation", 4).parallel_degree == 1
    r1 = heuristic_segment(words, "random", 6, seed=3)
    assert r1 == heuristic_segment(words, "random", 6, seed=3)
    assert r1.parallel_degree == 6
    assert heuristic_segment(TEXT, "random_candidate", 3, seed=1).parallel_degree == 3
    assert heuristic_segment(TEXT, "average_candidate", 5).boundaries == [11, 21, 27, 44]
    assert heuristic_segment(TEXT, "average_candidate", 3).boundaries == [21, 27]
    with pytest.raises(ContractError):
        heuristic_segment(TEXT, "random_candidate", 9)
    with pytest.raises(ContractError):
        heuristic_segment(TEXT, "psychic", 2)


def test_chunked_topk_picks_leftmost_max_per_chunk():
    scores = [1, 5, 5, 0, 2, 9, 9, 3, 0]
    assert chunked_topk(scores, 3) == [1, 5, 6]
    assert chunked_topk(scores, 0) == []
    with pytest.raises(ContractError):
        chunked_topk(scores, 10)


def test_statistical_segmentation_degree_and_chunking():
    lm = ToyTransformer(ModelConfig(max_seq_len=32, seed=4))
    ids = encode("the cat sat on the mat. the dog sat too")
    full = next_token_scores(lm, ids, "loss", chunk_size=64)
    windowed = next_token_scores(lm, ids, "entropy", chunk_size=10)
    assert full.shape == windowed.shape == (len(ids) - 1,)
    assert np.all(windowed >= 0)
    for method in ("loss", "entropy"):
        assert statistical_segment(lm, ids, method, 4, chunk_size=16).parallel_degree == 4
    with pytest.raises(ContractError):
        statistical_segment(lm, ids, "vibes", 2)


def test_cut_rate_and_examples():
    ex = make_example(TEXT, match_offsets(TEXT, "newline"), [11, 27])
    assert ex.gold == (True, False, True, False)
    assert cut_rate(ex) == pytest.approx(2 / 4)
    with pytest.raises(ContractError):
        make_example(TEXT, match_offsets(TEXT, "newline"), [5])


def test_corpus_round_trip(tmp_path):
    corpus = planted_segmentation_corpus(5, seed=0)
    path = tmp_path / "c.jsonl"
    write_corpus(corpus, path)
    assert read_corpus(path) == corpus
    path.write_text('{"text": "x"}\n')
    with pytest.raises(ContractError):
        read_corpus(path)


def test_segmenter_rejects_overlong_input():
    seg = Segmenter(ModelConfig(max_seq_len=16, seed=0))
    c = insert_candidates(encode("a\n" * 20))
    with pytest.raises(PositionRangeError):
        seg.candidate_logits(c)


def test_segmenter_scores_windowed_long_text():
    seg = Segmenter(ModelConfig(max_seq_len=32, seed=0))
    ids = encode("ab\n" * 40)
    part = recursive_segment(ids, SegmenterConfig(), seg)
    assert part.n == len(ids)


def test_cut_head_learns_planted_boundaries(tmp_path):
    train = planted_segmentation_corpus(60, seed=1)
    test = planted_segmentation_corpus(20, seed=2)
    seg = Segmenter(ModelConfig(num_layers=1, num_heads=2, head_dim=8, max_seq_len=512, seed=3))
    result = train_cut_head(seg, train, HeadTrainConfig(epochs=4))
    assert result.epoch_losses[-1] < result.epoch_losses[0]
    seg.save(tmp_path / "s.bkvm")
    again = Segmenter.load(tmp_path / "s.bkvm")
    pred = [[o for o, p in zip(ex.candidates.internal_offsets, again.probabilities(ex.candidates)) if p >= 0.5] for ex in test]
    assert boundary_f1(pred, [ex.gold_offsets for ex in test]) > 0.8


def test_boundary_f1():
    assert boundary_f1([[1, 2]], [[1, 2]]) == 1.0
    assert boundary_f1([[1]], [[2]]) == 0.0
    assert boundary_f1([[1, 2]], [[2, 3]]) == pytest.approx(0.5)


def test_tokenizer_round_trip():
    assert decode(encode("héllo\n")) == "héllo\n"
    assert decode([104, CUT_ID, 105]) == "h<cut>i"
