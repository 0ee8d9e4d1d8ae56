"""Answer-quality metrics: LCS-based F-measure and corpus unigram precision.

The F-measure weights recall with beta^2 = 1.44 (beta = 1.2), the common
reference-tool setting. Unigram precision is corpus-level: clipped counts
and lengths are pooled over all pairs before the ratio and the brevity
penalty are taken.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, LengthMismatchError

ROUGE_BETA_SQ = 1.44


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length, O(|a|*|b|)."""
    if not a or not b:
        return 0
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    for x in a:
        cur = np.zeros_like(prev)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return int(prev[-1])


def rouge_l(candidate: Sequence[str], reference: Sequence[str],
            beta_sq: float = ROUGE_BETA_SQ) -> float:
    """((1 + b2) R P) / (R + b2 P) with R = LCS/|ref|, P = LCS/|cand|."""
    if not candidate or not reference:
        raise EmptyInputError("rouge_l needs nonempty candidate and reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    recall = lcs / len(reference)
    precision = lcs / len(candidate)
    return ((1 + beta_sq) * recall * precision) / (recall + beta_sq * precision)


def bleu_1(candidates: Sequence[Sequence[str]],
           references: Sequence[Sequence[str]]) -> float:
    """Corpus-level clipped unigram precision times the brevity penalty."""
    if not candidates or not references or len(candidates) != len(references):
        raise LengthMismatchError(
            f"{len(candidates)} candidates vs {len(references)} references")
    clipped = 0
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_counts = Counter(cand)
        ref_counts = Counter(ref)
        clipped += sum(min(n, ref_counts[tok]) for tok, n in cand_counts.items())
        cand_len += len(cand)
        ref_len += len(ref)
    if cand_len == 0 or clipped == 0:
        return 0.0
    precision = clipped / cand_len
    brevity = float(np.exp(min(0.0, 1.0 - ref_len / cand_len)))
    return precision * brevity


@dataclass
class ExampleScores:
    rouge_l: float
    bleu_1: float


@dataclass
class MetricReport:
    rouge_l: float
    bleu_1: float
    examples: list[ExampleScores]

    def to_dict(self) -> dict:
        return {
            "rouge_l": self.rouge_l,
            "bleu_1": self.bleu_1,
            "examples": [{"rouge_l": e.rouge_l, "bleu_1": e.bleu_1}
                         for e in self.examples],
        }


def evaluate_corpus(candidates: Sequence[Sequence[str]],
                    references: Sequence[Sequence[str]]) -> MetricReport:
    """Corpus report: mean per-example F-measure, corpus unigram precision.

    Empty candidates score 0 here instead of raising; generation can
    legitimately produce an empty answer before its EOS.
    """
    if not candidates or len(candidates) != len(references):
        raise LengthMismatchError(
            f"{len(candidates)} candidates vs {len(references)} references")
    per_example = []
    for cand, ref in zip(candidates, references):
        if not cand or not ref:
            per_example.append(ExampleScores(0.0, 0.0))
            continue
        per_example.append(ExampleScores(rouge_l(cand, ref), bleu_1([cand], [ref])))
    return MetricReport(
        rouge_l=float(np.mean([e.rouge_l for e in per_example])),
        bleu_1=bleu_1(candidates, references),
        examples=per_example,
    )
