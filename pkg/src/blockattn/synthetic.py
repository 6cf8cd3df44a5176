"""Seeded synthetic corpora whose ground truth is known by construction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from blockattn.masks import BlockPartition
from blockattn.segmentation.candidates import match_offsets
from blockattn.segmentation.cuthead import SegmentationExample, make_example

_LOWER = "abcdefghijklmnopqrstuvwxyz"


def _word(rng: np.random.Generator, lo: int = 2, hi: int = 6) -> str:
    return "".join(rng.choice(list(_LOWER), size=int(rng.integers(lo, hi + 1))))


def planted_document(rng: np.random.Generator, paragraphs: tuple[int, int] = (3, 5)) -> tuple[str, list[int]]:
    """Paragraphs that each open with a heading line ``Word:``.

    Returns the text and the byte offsets where a new paragraph starts.
    """
    lines: list[str] = []
    starts: list[int] = []
    offset = 0
    for p in range(int(rng.integers(paragraphs[0], paragraphs[1] + 1))):
        heading = _word(rng, 3, 7).capitalize() + ":\n"
        body = [" ".join(_word(rng) for _ in range(int(rng.integers(2, 5)))) + ".\n" for _ in range(int(rng.integers(1, 4)))]
        if p:
            starts.append(offset)
        for line in [heading, *body]:
            lines.append(line)
            offset += len(line)
    return "".join(lines), starts


def planted_segmentation_corpus(count: int, seed: int, category: str = "planted") -> list[SegmentationExample]:
    """Newline candidates; the true cuts sit right before each heading line."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        text, starts = planted_document(rng)
        ids = list(text.encode("utf-8"))
        out.append(make_example(ids, match_offsets(ids, "newline"), starts, category))
    return out


def boundary_f1(predicted: Sequence[Sequence[int]], gold: Sequence[Sequence[int]]) -> float:
    """Micro-averaged F1 over boundary offsets of many documents."""
    tp = fp = fn = 0
    for pred, ref in zip(predicted, gold):
        p, r = set(pred), set(ref)
        tp += len(p & r)
        fp += len(p - r)
        fn += len(r - p)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# distillation corpora


@dataclass(frozen=True)
class TokenTask:
    """Vocabulary layout for the token-level synthetic tasks."""

    content: int = 48  # ids 0..content-1 are ordinary symbols
    num_labels: int = 8  # paragraph number tokens

    @property
    def label_base(self) -> int:
        return self.content

    @property
    def sep(self) -> int:
        return self.content + self.num_labels

    @property
    def ask(self) -> int:
        return self.sep + 1

    @property
    def sink(self) -> int:
        return self.sep + 2

    @property
    def vocab_size(self) -> int:
        return self.sep + 3


@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    partition: BlockPartition
    answer: int | None = None  # expected token after the final position, if any


def echo_sample(rng: np.random.Generator, task: TokenTask, num_blocks: int = 4, block_len: int = 8) -> Sample:
    """A random motif repeated in every context block and once more as the query.

    Inside the query every symbol is predictable only by reading the previous
    block, so the final block depends on context encoded elsewhere. Under
    block attention the earlier copies never see each other, which shifts
    their cached states away from what a full-attention model produces.
    """
    motif = [int(t) for t in rng.integers(0, task.content, size=block_len)]
    tokens = motif * (num_blocks + 1)
    return Sample(tuple(tokens), BlockPartition.from_lengths([block_len] * (num_blocks + 1)))


def shift_sample(rng: np.random.Generator, task: TokenTask, num_blocks: int = 4, block_len: int = 8) -> Sample:
    """A keyed motif: block ``k`` holds the motif shifted by ``k * key`` modulo the symbol count.

    The first block is ``[key, motif...]`` and the rest are shifted copies, the
    last one being the query. With full attention every copy after the first
    needs the key from the first block. Under block attention the middle
    copies cannot see it, so their cached states lack the key and a model
    that relied on them must learn to fetch it from the first block instead.
    """
    key = int(rng.integers(1, task.num_labels + 1))
    motif = rng.integers(0, task.content, size=block_len)
    tokens = [task.label_base + key - 1, *(int(t) for t in motif)]
    for k in range(1, num_blocks + 1):
        tokens += [int(t) for t in (motif + k * key) % task.content]
    return Sample(tuple(tokens), BlockPartition.from_lengths([block_len + 1] + [block_len] * num_blocks))


def block_head_sample(
    rng: np.random.Generator,
    task: TokenTask,
    num_blocks: int = 4,
    block_len: tuple[int, int] = (6, 9),
    head: bool | None = None,
) -> Sample:
    """Retrieve-the-paragraph-number task.

    Each context block is ``[s_1, label_k, s_2, ..., s_m]``: the paragraph's
    number is written right after its first symbol. The query block is
    ``[sep, probe]`` and the answer, due right after the probe, is the label
    of the paragraph the probe came from. With ``head=True`` the probe is the
    paragraph's first symbol (the block head), so the answer is the token that
    followed it; otherwise it is a later symbol of the paragraph.
    """
    if block_len[0] < 3:
        raise ValueError("paragraphs need at least three tokens")
    labels = rng.permutation(task.num_labels)[:num_blocks]
    blocks = []
    for k in range(num_blocks):
        length = int(rng.integers(block_len[0], block_len[1] + 1))
        body = [int(t) for t in rng.integers(0, task.content, size=length - 1)]
        blocks.append([body[0], task.label_base + int(labels[k])] + body[1:])
    target = blocks[int(rng.integers(0, num_blocks))]
    if head is None:
        head = bool(rng.integers(0, 2))
    probe = target[0] if head else target[int(rng.integers(2, len(target)))]
    query = [task.sep, probe]
    tokens = [t for b in blocks for t in b] + query
    lengths = [len(b) for b in blocks] + [len(query)]
    return Sample(tuple(tokens), BlockPartition.from_lengths(lengths), answer=target[1])


def block_head_training_sample(
    rng: np.random.Generator,
    task: TokenTask,
    num_blocks: int = 4,
    block_len: tuple[int, int] = (6, 9),
    num_queries: int = 4,
    head: bool | None = True,
) -> Sample:
    """Training form of :func:`block_head_sample` with several questions per query block.

    The query block is ``[sep, p_1, a_1, sep, p_2, a_2, ...]`` so one sequence
    supervises ``num_queries`` retrievals, and its first three tokens are an
    evaluation query plus its answer. ``answer`` is the last label.
    """
    first = block_head_sample(rng, task, num_blocks, block_len, head=head)
    n_ctx = first.partition.ranges[-1][0]
    context = list(first.tokens[:n_ctx])
    blocks = [context[s:e] for s, e in first.partition.ranges[:-1]]
    query = list(first.tokens[n_ctx:]) + [first.answer]
    for _ in range(num_queries - 1):
        target = blocks[int(rng.integers(0, num_blocks))]
        is_head = bool(rng.integers(0, 2)) if head is None else head
        probe = target[0] if is_head else target[int(rng.integers(2, len(target)))]
        query += [task.sep, probe, target[1]]
    lengths = first.partition.lengths
    lengths[-1] = len(query)
    return Sample(tuple(context + query), BlockPartition.from_lengths(lengths), query[-1])


def repeat_sequence(
    rng: np.random.Generator, content: int, length: int = 40, span: tuple[int, int] = (8, 20)
) -> tuple[list[int], int]:
    """A random span of ``m`` symbols, an exact repeat of it, then filler; returns ``(tokens, m)``.

    Tokens ``m+1 .. 2m-1`` are predictable only by finding the earlier copy of
    the token before them, which is the induction step the block-head
    retrieval relies on.
    """
    m = int(rng.integers(span[0], span[1] + 1))
    if 2 * m > length:
        raise ValueError(f"span {m} does not fit twice into {length} tokens")
    x = [int(t) for t in rng.integers(0, content, size=m)]
    filler = [int(t) for t in rng.integers(0, content, size=length - 2 * m)]
    return x + x + filler, m
