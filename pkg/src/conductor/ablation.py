"""Pruning ablations: re-rank candidate lists with masked models and compare nDCG@10."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .data import Corpus
from .model import CrossEncoder, PruningMask, group_by_length
from .schemes import NeuronSet, random_matched_set

log = logging.getLogger(__name__)


def mask_for(s: NeuronSet | None, model: CrossEncoder) -> PruningMask | None:
    if s is None or not s.members:
        return None
    if s.model_hash != model.content_hash:
        raise ValueError(f"neuron set {s.provenance!r} was derived from a different model")
    return PruningMask(s.neuron_ids(model.config))


class RankingEvaluator:
    """Scores every candidate of a corpus; embeddings are built once and reused."""

    def __init__(self, model: CrossEncoder, corpus: Corpus, name: str = ""):
        self.model = model
        self.corpus = corpus
        self.name = name
        self.items = []  # (qid, pid)
        embs = []
        for qid in sorted(corpus.candidates):
            for pid in corpus.candidates[qid]:
                pair = corpus.pair(model.vocab, qid, pid)
                self.items.append((qid, pid))
                embs.append(model.embed(pair))
        self.groups = [(idx, np.stack([embs[i] for i in idx])) for idx in group_by_length(embs)]

    def scores(self, mask: PruningMask | None = None) -> np.ndarray:
        """Relevant-label logit for every (qid, pid) in ``self.items``."""
        out = np.empty(len(self.items))
        for idx, batch in self.groups:
            out[idx] = self.model.forward(batch, mask)[:, 0]
        return out

    def run(self, mask: PruningMask | None = None) -> dict[str, list[tuple[str, float]]]:
        scores = self.scores(mask)
        per_q: dict[str, list[tuple[str, float]]] = {}
        for (qid, pid), s in zip(self.items, scores):
            per_q.setdefault(qid, []).append((pid, float(s)))
        return {qid: sort_ranking(v) for qid, v in per_q.items()}

    def ndcg(self, mask: PruningMask | None = None, k: int = 10) -> dict[str, float]:
        out = {}
        for qid, ranked in self.run(mask).items():
            v = ndcg_at_k([pid for pid, _ in ranked], self.corpus.qrels.get(qid, {}), k)
            if v is None:
                log.warning("query %s has no relevant passage; skipped", qid)
                continue
            out[qid] = v
        return out


def sort_ranking(scored: Sequence[tuple[str, float]]) -> list[tuple[str, float]]:
    """Descending score, ties by passage id ascending."""
    return sorted(scored, key=lambda x: (-x[1], x[0]))


def rerank(model: CrossEncoder, corpus: Corpus, qid: str, pids: Sequence[str],
           mask: PruningMask | None = None) -> list[tuple[str, float]]:
    if not pids:
        raise ValueError("no candidates to rank")
    pairs = [corpus.pair(model.vocab, qid, pid) for pid in pids]
    scores = np.empty(len(pairs))
    for idx in group_by_length(pairs):
        batch = np.stack([model.embed(pairs[i]) for i in idx])
        scores[idx] = model.forward(batch, mask)[:, 0]
    return sort_ranking(list(zip(pids, scores.tolist())))


def ndcg_at_k(ranking: Sequence[str], qrels: Mapping[str, int], k: int = 10) -> float | None:
    """nDCG@k with gain ``2**rel - 1``; ``None`` when the query has no relevant passage."""
    ideal = sorted((r for r in qrels.values() if r > 0), reverse=True)[:k]
    if not ideal:
        return None
    dcg = sum((2 ** qrels.get(pid, 0) - 1) / math.log2(i + 2) for i, pid in enumerate(ranking[:k]))
    idcg = sum((2 ** r - 1) / math.log2(i + 2) for i, r in enumerate(ideal))
    return dcg / idcg


@dataclass(frozen=True)
class TTest:
    t: float
    p: float
    degenerate: bool = False


def paired_ttest(orig: Sequence[float], pruned: Sequence[float]) -> TTest:
    """Two-tailed paired Student's t-test on per-query differences.

    All-zero differences give ``t=0, p=1``; constant nonzero differences give
    ``t=+-inf, p=0`` with ``degenerate`` set.
    """
    if len(orig) != len(pruned):
        raise ValueError("paired samples must have equal length")
    if len(orig) < 2:
        raise ValueError("t-test needs at least two pairs")
    d = np.asarray(orig, dtype=np.float64) - np.asarray(pruned, dtype=np.float64)
    n = len(d)
    mean = math.fsum(d) / n
    if not np.any(d):
        return TTest(0.0, 1.0)
    sd = math.sqrt(math.fsum((d - mean) ** 2) / (n - 1))
    if sd == 0.0:
        return TTest(math.copysign(math.inf, mean), 0.0, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return TTest(t, min(p, 1.0))


def pct_diff(orig_mean: float, pruned_mean: float) -> float:
    """``100 * (orig - pruned) / orig``; positive means the pruned model is worse."""
    if not orig_mean > 0:
        raise ValueError("original mean must be positive")
    return 100.0 * (orig_mean - pruned_mean) / orig_mean


@dataclass
class AblationReport:
    scheme: str
    dataset: str
    level: float
    n_pruned: int
    n_queries: int
    orig_mean: float
    pruned_mean: float
    pct_diff: float
    t: float
    p: float
    random_pcts: list[float] = field(default_factory=list)

    @property
    def significant(self) -> bool:
        return self.p <= 0.05

    @property
    def random_mean(self) -> float:
        return float(np.mean(self.random_pcts)) if self.random_pcts else float("nan")

    @property
    def random_median(self) -> float:
        return float(np.median(self.random_pcts)) if self.random_pcts else float("nan")

    @property
    def random_p975(self) -> float:
        return float(np.percentile(self.random_pcts, 97.5)) if self.random_pcts else float("nan")


def _compare(orig: dict[str, float], pruned: dict[str, float]):
    qids = sorted(orig)
    o = [orig[q] for q in qids]
    p = [pruned[q] for q in qids]
    om, pm = math.fsum(o) / len(o), math.fsum(p) / len(p)
    tt = paired_ttest(o, p) if len(o) >= 2 else TTest(0.0, 1.0)
    return om, pm, pct_diff(om, pm), tt


def ablation_study(model: CrossEncoder, sets: Mapping[str, Mapping[float, NeuronSet]],
                   corpora: Mapping[str, Corpus], random_reps: int = 50, seed: int = 0,
                   evaluators: Mapping[str, RankingEvaluator] | None = None) -> list[AblationReport]:
    """Prune each (set, level) and compare nDCG@10 with the unpruned model.

    Every report also carries ``random_reps`` layer-matched random prunings
    (seeds ``seed + i``), scored on the same dataset.
    """
    evaluators = dict(evaluators or {})
    for name, corpus in sorted(corpora.items()):
        if name not in evaluators:
            evaluators[name] = RankingEvaluator(model, corpus, name)
    originals = {name: ev.ndcg() for name, ev in sorted(evaluators.items())}
    memo: dict = {}

    def scored(ds, mask):
        # identical masks recur (e.g. 0.01% and 0.1% of a small model are both one neuron)
        key = (ds, mask)
        if key not in memo:
            memo[key] = originals[ds] if mask is None else evaluators[ds].ndcg(mask)
        return memo[key]

    reports = []
    for scheme in sorted(sets):
        for level in sorted(sets[scheme]):
            s = sets[scheme][level]
            mask = mask_for(s, model)
            randoms = []
            if s.members and random_reps > 0:
                randoms = [mask_for(random_matched_set(s, model.config, seed + i), model) for i in range(random_reps)]
            for ds in sorted(evaluators):
                orig = originals[ds]
                if not orig:
                    raise ValueError(f"dataset {ds!r} has no query with a relevant passage")
                om, pm, pct, tt = _compare(orig, scored(ds, mask))
                rnd = [_compare(orig, scored(ds, m))[2] for m in randoms]
                reports.append(AblationReport(scheme, ds, level, len(s), len(orig), om, pm, pct, tt.t, tt.p, rnd))
                log.info("ablation %s @%g%% on %s: %.2f%% (p=%.3g)", scheme, level, ds, pct, tt.p)
    return reports


def write_report_csv(reports: Sequence[AblationReport], path, groups: Mapping[str, Sequence[str]] | None = None) -> None:
    """Table-shaped CSV; ``groups`` adds averaged rows (e.g. all out-of-domain sets)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scheme", "dataset", "level", "n_pruned", "pct_diff", "p", "n_sig",
                    "random_mean_pct", "random_median_pct", "random_p975_pct"])
        for r in reports:
            w.writerow([r.scheme, r.dataset, repr(r.level), r.n_pruned, repr(r.pct_diff), repr(r.p),
                        int(r.significant), repr(r.random_mean), repr(r.random_median), repr(r.random_p975)])
        for gname, members in sorted((groups or {}).items()):
            keyed: dict = {}
            for r in reports:
                if r.dataset in members:
                    keyed.setdefault((r.scheme, r.level), []).append(r)
            for (scheme, level), rs in sorted(keyed.items()):
                rmeans = [x.random_mean for x in rs if x.random_pcts]
                w.writerow([scheme, gname, repr(level), rs[0].n_pruned,
                            repr(math.fsum(x.pct_diff for x in rs) / len(rs)), "",
                            sum(x.significant for x in rs),
                            repr(math.fsum(rmeans) / len(rmeans)) if rmeans else "nan", "", ""])


def write_trec_run(run: Mapping[str, Sequence[tuple[str, float]]], path, tag: str = "conductor") -> None:
    with open(path, "w") as f:
        for qid in sorted(run):
            for rank, (pid, score) in enumerate(run[qid], 1):
                f.write(f"{qid} Q0 {pid} {rank} {score!r} {tag}\n")


def read_trec_run(path) -> dict[str, list[tuple[str, float]]]:
    run: dict[str, list[tuple[int, str, float]]] = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{n}: expected 'qid Q0 pid rank score tag'")
            qid, _, pid, rank, score, _ = parts
            run.setdefault(qid, []).append((int(rank), pid, float(score)))
    return {q: [(pid, s) for _, pid, s in sorted(v)] for q, v in run.items()}
