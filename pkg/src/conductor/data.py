"""Vocabulary, tokenized query/passage pairs and the synthetic relevance corpus.

Corpus layout on disk (one directory per dataset)::

    queries.jsonl     {"qid": ..., "text": ...}
    passages.jsonl    {"pid": ..., "text": ...}
    qrels.txt         qid 0 pid rel            (TREC 4-column)
    candidates.jsonl  {"qid": ..., "pids": [...]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, CLS, SEP = "[PAD]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, CLS, SEP)
PAD_ID, CLS_ID, SEP_ID = 0, 1, 2

RELEVANT = "relevant"
NON_RELEVANT = "non_relevant"
LABELS = (RELEVANT, NON_RELEVANT)


class Vocab:
    """Closed whitespace vocabulary; ids 0..2 are the special tokens."""

    def __init__(self, words):
        self.tokens = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        ids = []
        for tok in text.split():
            try:
                ids.append(self.index[tok])
            except KeyError:
                raise ValueError(f"token {tok!r} not in vocabulary") from None
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass(frozen=True)
class TokenizedPair:
    """``[CLS] query [SEP] passage [SEP]`` with segment ids and content spans."""

    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    query_span: tuple[int, int]
    passage_span: tuple[int, int]

    def __len__(self):
        return len(self.token_ids)

    @classmethod
    def build(cls, query_ids, passage_ids) -> TokenizedPair:
        q, p = list(query_ids), list(passage_ids)
        ids = [CLS_ID] + q + [SEP_ID] + p + [SEP_ID]
        segs = [0] * (len(q) + 2) + [1] * (len(p) + 1)
        return cls(
            tuple(ids),
            tuple(segs),
            (1, 1 + len(q)),
            (2 + len(q), 2 + len(q) + len(p)),
        )

    @property
    def special_positions(self) -> tuple[int, ...]:
        q0, q1 = self.query_span
        p0, p1 = self.passage_span
        return tuple(i for i in range(len(self)) if not (q0 <= i < q1 or p0 <= i < p1))

    def validate(self, vocab_size: int, max_seq_len: int) -> None:
        if len(self.token_ids) != len(self.segment_ids):
            raise ValueError("token and segment ids differ in length")
        if len(self) > max_seq_len:
            raise ValueError(f"pair length {len(self)} exceeds max_seq_len {max_seq_len}")
        bad = [t for t in self.token_ids if not 0 <= t < vocab_size]
        if bad:
            raise ValueError(f"token id {bad[0]} out of range for vocab_size {vocab_size}")


@dataclass(frozen=True)
class LabeledPair:
    pair: TokenizedPair
    label: str | None
    dataset: str
    qid: str
    pid: str

    @property
    def key(self):
        return (self.dataset, self.qid, self.pid)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Topic-clustered vocabulary and the overlap relevance rule.

    A passage is relevant to a query iff it contains at least ``min_overlap``
    of the query's (distinct) tokens. Distractors are drawn from the query's
    topic but stay below the threshold.
    """

    n_topics: int = 4
    words_per_topic: int = 16
    query_len: int = 3
    passage_len: int = 8
    min_overlap: int = 2
    n_distractors: int = 20
    topics: tuple[int, ...] | None = None
    relevant_only: bool = False

    def __post_init__(self):
        if self.topics is not None:
            object.__setattr__(self, "topics", tuple(self.topics))

    def words(self) -> list[str]:
        return [f"t{t}w{j}" for t in range(self.n_topics) for j in range(self.words_per_topic)]

    def topic_words(self, topic: int) -> list[str]:
        return [f"t{topic}w{j}" for j in range(self.words_per_topic)]

    def vocab(self) -> Vocab:
        return Vocab(self.words())

    @property
    def seq_len(self) -> int:
        return self.query_len + self.passage_len + 3

    def check(self) -> None:
        if min(self.n_topics, self.words_per_topic, self.query_len, self.passage_len) < 1:
            raise ValueError("synthetic spec sizes must be positive")
        if not 1 <= self.min_overlap <= min(self.query_len, self.passage_len):
            raise ValueError("min_overlap must be in [1, min(query_len, passage_len)]")
        if self.words_per_topic < self.query_len + self.passage_len:
            raise ValueError(
                f"infeasible spec: words_per_topic={self.words_per_topic} < "
                f"query_len + passage_len = {self.query_len + self.passage_len}"
            )
        if self.topics is not None and any(not 0 <= t < self.n_topics for t in self.topics):
            raise ValueError("topic index out of range")


def overlap(query: list[str], passage: list[str]) -> int:
    """Number of distinct query tokens present in the passage."""
    return len(set(query) & set(passage))


def is_relevant(query: list[str], passage: list[str], min_overlap: int) -> bool:
    return overlap(query, passage) >= min_overlap


def _sample_query(spec: SyntheticSpec, rng, topic: int) -> list[str]:
    words = spec.topic_words(topic)
    return [words[i] for i in rng.choice(len(words), spec.query_len, replace=False)]


def _sample_passage(spec: SyntheticSpec, rng, topic: int, query: list[str], relevant: bool) -> list[str]:
    if relevant:
        m = int(rng.integers(spec.min_overlap, min(spec.query_len, spec.passage_len) + 1))
    else:
        m = int(rng.integers(0, spec.min_overlap))
    shared = [query[i] for i in rng.choice(len(query), m, replace=False)]
    filler_pool = [w for w in spec.topic_words(topic) if w not in query]
    filler = [filler_pool[i] for i in rng.choice(len(filler_pool), spec.passage_len - m, replace=False)]
    toks = shared + filler
    return [toks[i] for i in rng.permutation(len(toks))]


def _topics(spec: SyntheticSpec) -> tuple[int, ...]:
    return spec.topics if spec.topics is not None else tuple(range(spec.n_topics))


@dataclass
class Corpus:
    queries: dict[str, str] = field(default_factory=dict)
    passages: dict[str, str] = field(default_factory=dict)
    qrels: dict[str, dict[str, int]] = field(default_factory=dict)
    candidates: dict[str, list[str]] = field(default_factory=dict)

    def write(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / "queries.jsonl", d / "passages.jsonl", d / "qrels.txt", d / "candidates.jsonl"]
        with open(paths[0], "w") as f:
            for qid, text in self.queries.items():
                f.write(json.dumps({"qid": qid, "text": text}) + "\n")
        with open(paths[1], "w") as f:
            for pid, text in self.passages.items():
                f.write(json.dumps({"pid": pid, "text": text}) + "\n")
        with open(paths[2], "w") as f:
            for qid, rels in self.qrels.items():
                for pid, rel in rels.items():
                    f.write(f"{qid} 0 {pid} {rel}\n")
        with open(paths[3], "w") as f:
            for qid, pids in self.candidates.items():
                f.write(json.dumps({"qid": qid, "pids": pids}) + "\n")
        return paths

    @classmethod
    def read(cls, directory) -> Corpus:
        d = Path(directory)
        c = cls()
        for rec in _jsonl(d / "queries.jsonl"):
            c.queries[rec["qid"]] = rec["text"]
        for rec in _jsonl(d / "passages.jsonl"):
            c.passages[rec["pid"]] = rec["text"]
        qrels_path = d / "qrels.txt"
        if qrels_path.exists():
            c.qrels = read_qrels(qrels_path)
        cand_path = d / "candidates.jsonl"
        if cand_path.exists():
            for rec in _jsonl(cand_path):
                c.candidates[rec["qid"]] = list(rec["pids"])
        return c

    def pair(self, vocab: Vocab, qid: str, pid: str) -> TokenizedPair:
        try:
            q, p = self.queries[qid], self.passages[pid]
        except KeyError as e:
            raise KeyError(f"unknown id {e.args[0]!r}") from None
        return TokenizedPair.build(vocab.encode(q), vocab.encode(p))

    def labeled_pairs(self, vocab: Vocab, dataset: str) -> list[LabeledPair]:
        """Every assessed (query, passage) pair; rel > 0 is relevant, rel == 0 non-relevant."""
        out = []
        for qid in sorted(self.qrels):
            for pid in sorted(self.qrels[qid]):
                label = RELEVANT if self.qrels[qid][pid] > 0 else NON_RELEVANT
                out.append(LabeledPair(self.pair(vocab, qid, pid), label, dataset, qid, pid))
        return out

    def file_names(self):
        return ["queries.jsonl", "passages.jsonl", "qrels.txt", "candidates.jsonl"]


def _jsonl(path):
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def read_qrels(path) -> dict[str, dict[str, int]]:
    qrels: dict[str, dict[str, int]] = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{n}: expected 'qid 0 pid rel'")
            qid, _, pid, rel = parts
            qrels.setdefault(qid, {})[pid] = int(rel)
    return qrels


def generate_synthetic_corpus(spec: SyntheticSpec, n_queries: int, seed: int, prefix: str = "") -> Corpus:
    """Queries with one relevant passage and ``n_distractors`` distractors each.

    Relevance judgments cover every candidate (distractors get rel 0) unless
    ``spec.relevant_only`` is set, in which case only the relevant passage is
    assessed.
    """
    spec.check()
    if n_queries < 1:
        raise ValueError("n_queries must be positive")
    rng = np.random.default_rng(seed)
    topics = _topics(spec)
    corpus = Corpus()
    npid = 0
    for qn in range(n_queries):
        topic = topics[int(rng.integers(len(topics)))]
        query = _sample_query(spec, rng, topic)
        qid = f"{prefix}q{qn}"
        corpus.queries[qid] = " ".join(query)
        flags = [True] + [False] * spec.n_distractors
        pids = []
        rels = {}
        for relevant in flags:
            pid = f"{prefix}p{npid}"
            npid += 1
            corpus.passages[pid] = " ".join(_sample_passage(spec, rng, topic, query, relevant))
            pids.append(pid)
            if relevant or not spec.relevant_only:
                rels[pid] = int(relevant)
        corpus.qrels[qid] = rels
        corpus.candidates[qid] = [pids[i] for i in rng.permutation(len(pids))]
    return corpus


def generate_training_pairs(spec: SyntheticSpec, n_pairs: int, seed: int):
    """Balanced (query_ids, passage_ids, label_index) triples; label 0 = relevant."""
    spec.check()
    rng = np.random.default_rng(seed)
    vocab = spec.vocab()
    topics = _topics(spec)
    out = []
    for i in range(n_pairs):
        topic = topics[int(rng.integers(len(topics)))]
        query = _sample_query(spec, rng, topic)
        relevant = i % 2 == 0
        passage = _sample_passage(spec, rng, topic, query, relevant)
        out.append((vocab.encode(" ".join(query)), vocab.encode(" ".join(passage)), 0 if relevant else 1))
    return out
