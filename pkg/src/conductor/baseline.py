"""Path baselines and the relevance-suppression comparison used to pick one."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import kernels
from .data import PAD_ID, RELEVANT, LabeledPair, TokenizedPair
from .model import CrossEncoder, group_by_length


class BaselineStrategy(str, Enum):
    ALL_PAD = "all_pad"
    QUERY_PAD = "query_pad"
    ALL_ZERO = "all_zero"
    QUERY_ZERO = "query_zero"


STRATEGIES = tuple(BaselineStrategy)


def _positions(pair: TokenizedPair, strategy: BaselineStrategy) -> list[int]:
    q0, q1 = pair.query_span
    if strategy in (BaselineStrategy.QUERY_PAD, BaselineStrategy.QUERY_ZERO):
        return list(range(q0, q1))
    p0, p1 = pair.passage_span
    return list(range(q0, q1)) + list(range(p0, p1))


def build_baseline(model: CrossEncoder, pair: TokenizedPair, strategy) -> np.ndarray:
    """Embeddings with the selected token components replaced.

    Position and segment terms are kept, and [CLS]/[SEP] rows are never
    touched, so the baseline differs from ``model.embed(pair)`` only in the
    token-embedding part of content positions.
    """
    strategy = BaselineStrategy(strategy)
    pair.validate(model.config.vocab_size, model.config.max_seq_len)
    rows = model.params["tok_emb"][list(pair.token_ids)].copy()
    pos = _positions(pair, strategy)
    if strategy in (BaselineStrategy.ALL_PAD, BaselineStrategy.QUERY_PAD):
        rows[pos] = model.params["tok_emb"][PAD_ID]
    else:
        rows[pos] = 0.0
    return model.embed_tokens(rows, pair)


@dataclass(frozen=True)
class SuppressionScore:
    strategy: str
    score: float
    original: float
    n_pairs: int


def _signed_diffs(model: CrossEncoder, embs: Sequence[np.ndarray]) -> np.ndarray:
    out = np.empty(len(embs))
    for idx in group_by_length(embs):
        probs = kernels.softmax_fwd(model.forward(np.stack([embs[i] for i in idx])))
        out[idx] = probs[:, 0] - probs[:, 1]
    return out


def suppression_score(model: CrossEncoder, pairs: Sequence[LabeledPair], strategy) -> SuppressionScore:
    """Mean of p(relevant) - p(non_relevant) at the baseline, plus the same at the input."""
    if not pairs:
        raise ValueError("suppression_score needs at least one pair")
    strategy = BaselineStrategy(strategy)
    orig = _signed_diffs(model, [model.embed(p.pair) for p in pairs])
    base = _signed_diffs(model, [build_baseline(model, p.pair, strategy) for p in pairs])
    return SuppressionScore(strategy.value, math.fsum(base) / len(base), math.fsum(orig) / len(orig), len(pairs))


def predicted_relevant(model: CrossEncoder, pairs: Sequence[LabeledPair]) -> list[LabeledPair]:
    diffs = _signed_diffs(model, [model.embed(p.pair) for p in pairs])
    return [p for p, d in zip(pairs, diffs) if d > 0]


def selection_pairs(model: CrossEncoder, pairs: Sequence[LabeledPair], n: int = 200,
                    use_all: bool = False, relevant_only: bool = False) -> list[LabeledPair]:
    """Pairs for the baseline comparison, in (dataset, qid, pid) order.

    By default only pairs the model predicts as relevant are kept;
    ``relevant_only`` further restricts to gold-relevant pairs.
    """
    pool = sorted(pairs, key=lambda p: p.key)
    if relevant_only:
        pool = [p for p in pool if p.label == RELEVANT]
    if not use_all:
        pool = predicted_relevant(model, pool)
    return pool[:n]


def rank_strategies(model: CrossEncoder, pairs: Sequence[LabeledPair], strategies=STRATEGIES) -> list[SuppressionScore]:
    """All strategies ordered from strongest suppression (smallest |score|) to weakest."""
    scores = [suppression_score(model, pairs, s) for s in strategies]
    return sorted(scores, key=lambda s: (abs(s.score), s.strategy))


def select_baseline(model: CrossEncoder, pairs: Sequence[LabeledPair]) -> BaselineStrategy:
    return BaselineStrategy(rank_strategies(model, pairs)[0].strategy)


def write_table(scores: Sequence[SuppressionScore], path) -> None:
    """CSV: strategy, mean_signed_diff, n_pairs (with the original-input row first)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["strategy", "mean_signed_diff", "n_pairs"])
        if scores:
            w.writerow(["original", repr(scores[0].original), scores[0].n_pairs])
        for s in scores:
            w.writerow([s.strategy, repr(s.score), s.n_pairs])
