"""Splitting text into blocks: candidate insertion, scoring and cut decisions."""
from blockattn.segmentation.baselines import (
    chunked_topk,
    heuristic_segment,
    next_token_scores,
    statistical_segment,
    token_entropy,
)
from blockattn.segmentation.candidates import (
    CandidateCutSet,
    from_offsets,
    insert_candidates,
    match_offsets,
    strip_candidates,
)
from blockattn.segmentation.core import (
    AverageScorer,
    FixedScorer,
    SegmenterConfig,
    decide_cuts,
    recursive_levels,
    recursive_segment,
    score_candidates,
)
from blockattn.segmentation.cuthead import (
    CutHead,
    HeadTrainConfig,
    SegmentationExample,
    Segmenter,
    cut_rate,
    make_example,
    read_corpus,
    train_cut_head,
    write_corpus,
)

__all__ = [
    "AverageScorer",
    "CandidateCutSet",
    "CutHead",
    "FixedScorer",
    "HeadTrainConfig",
    "SegmentationExample",
    "Segmenter",
    "SegmenterConfig",
    "chunked_topk",
    "cut_rate",
    "decide_cuts",
    "from_offsets",
    "heuristic_segment",
    "insert_candidates",
    "make_example",
    "match_offsets",
    "next_token_scores",
    "read_corpus",
    "recursive_levels",
    "recursive_segment",
    "score_candidates",
    "statistical_segment",
    "strip_candidates",
    "token_entropy",
    "train_cut_head",
    "write_corpus",
]
