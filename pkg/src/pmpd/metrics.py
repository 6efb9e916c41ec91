"""Rouge-L over token id sequences; the quality signal for calibration,
schedule search and label generation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import InputError


def lcs_len(a: Sequence, b: Sequence) -> int:
    """Length of the longest common subsequence, O(|a|*|b|) time, O(min) space."""
    if len(b) > len(a):
        a, b = b, a
    if not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def rouge_l(candidate: Sequence, reference: Sequence) -> RougeScore:
    """LCS-based precision/recall/F1; empty-sided scores are 0 by convention."""
    lcs = lcs_len(candidate, reference)
    p = lcs / len(candidate) if candidate else 0.0
    r = lcs / len(reference) if reference else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return RougeScore(p, r, f1)


def fidelity(trace, reference_trace) -> float:
    """Rouge-L F1 of a generation against the full-precision generation for
    the same prompt."""
    if list(trace.prompt_tokens) != list(reference_trace.prompt_tokens):
        raise InputError("fidelity requires traces generated from the same prompt")
    return rouge_l(trace.output_tokens, reference_trace.output_tokens).f1
