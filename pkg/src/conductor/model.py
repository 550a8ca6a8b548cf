"""A small post-LN BERT-style cross-encoder with enumerable neurons.

The forward graph takes embeddings that already include position and segment
terms, so attribution paths can be built purely in embedding space. Every
linear-transformation output is a named neuron site and can be zeroed by a
:class:`PruningMask`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import kernels
from .data import LABELS, PAD_ID, TokenizedPair, Vocab
from .tape import Eager

FORMAT_VERSION = 1

SITES = (
    "query_proj",
    "key_proj",
    "value_proj",
    "attention_output",
    "ffn_intermediate",
    "ffn_output",
)

_SITE_PARAMS = {
    "query_proj": ("wq", "bq"),
    "key_proj": ("wk", "bk"),
    "value_proj": ("wv", "bv"),
    "attention_output": ("wo", "bo"),
    "ffn_intermediate": ("w1", "b1"),
    "ffn_output": ("w2", "b2"),
}

LN_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    d_model: int = 32
    num_heads: int = 4
    d_ff: int = 64
    vocab_size: int = 67
    max_seq_len: int = 14
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def site_width(self, site: str) -> int:
        return self.d_ff if site == "ffn_intermediate" else self.d_model

    @property
    def num_neurons(self) -> int:
        return self.num_layers * (5 * self.d_model + self.d_ff)


class NeuronId(NamedTuple):
    layer: int
    site: str
    unit: int

    def as_dict(self):
        return {"layer": self.layer, "site": self.site, "unit": self.unit}


def enumerate_neurons(config: ModelConfig) -> list[NeuronId]:
    """All neurons ordered by (layer, site, unit); sites in :data:`SITES` order."""
    return [
        NeuronId(layer, site, unit)
        for layer in range(config.num_layers)
        for site in SITES
        for unit in range(config.site_width(site))
    ]


def site_offsets(config: ModelConfig) -> dict[tuple[int, str], int]:
    """Start index of each (layer, site) block in :func:`enumerate_neurons` order."""
    out, pos = {}, 0
    for layer in range(config.num_layers):
        for site in SITES:
            out[(layer, site)] = pos
            pos += config.site_width(site)
    return out


class PruningMask(frozenset):
    """A set of :class:`NeuronId` whose activations are forced to zero."""

    def validate(self, config: ModelConfig) -> None:
        for n in self:
            if not (0 <= n.layer < config.num_layers and n.site in SITES
                    and 0 <= n.unit < config.site_width(n.site)):
                raise ValueError(f"neuron {tuple(n)} is out of range for this model")

    def site_masks(self, config: ModelConfig) -> dict[tuple[int, str], np.ndarray]:
        self.validate(config)
        out: dict[tuple[int, str], np.ndarray] = {}
        for n in sorted(self):
            key = (n.layer, n.site)
            if key not in out:
                out[key] = np.ones(config.site_width(n.site))
            out[key][n.unit] = 0.0
        return out


def layer_param_names():
    return ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
            "w1", "b1", "w2", "b2", "ln2_g", "ln2_b"]


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    d, f = config.d_model, config.d_ff

    def w(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = rng.normal(0.0, 1.0, size=(config.vocab_size, d))
    p["tok_emb"][PAD_ID] = 0.0
    p["pos_emb"] = rng.normal(0.0, 0.5, size=(config.max_seq_len, d))
    p["seg_emb"] = rng.normal(0.0, 0.5, size=(2, d))
    p["emb_ln_g"] = np.ones(d)
    p["emb_ln_b"] = np.zeros(d)
    for layer in range(config.num_layers):
        pre = f"L{layer}."
        for wn, bn, n_in, n_out in (("wq", "bq", d, d), ("wk", "bk", d, d), ("wv", "bv", d, d),
                                    ("wo", "bo", d, d), ("w1", "b1", d, f), ("w2", "b2", f, d)):
            p[pre + wn] = w(n_in, n_out)
            p[pre + bn] = np.zeros(n_out)
        for ln in ("ln1", "ln2"):
            p[pre + ln + "_g"] = np.ones(d)
            p[pre + ln + "_b"] = np.zeros(d)
    p["pool_w"] = w(d, d)
    p["pool_b"] = np.zeros(d)
    p["cls_w"] = w(d, 2)
    p["cls_b"] = np.zeros(2)
    return p


def graph(ops, P, emb, site_masks=None, config: ModelConfig | None = None):
    """The forward computation, written once for eager and traced evaluation.

    ``P`` maps parameter names to handles (arrays or trace vars). ``emb`` has
    shape ``[..., seq, d_model]``; the result has shape ``[..., 1, 2]``.
    Marks: ``("site", layer, site)`` for every neuron site and
    ``("resid", l)`` for the residual-stream state entering layer ``l``
    (``l == num_layers`` is the final hidden state).
    """
    site_masks = site_masks or {}
    H = config.num_heads
    dh = config.d_model // H
    inv = 1.0 / math.sqrt(dh)

    def layernorm(x, g, b):
        return ops.add(ops.mul(ops.layernorm(x, LN_EPS), g), b)

    def linear(x, layer, site):
        wn, bn = _SITE_PARAMS[site]
        pre = f"L{layer}."
        y = ops.add(ops.matmul(x, P[pre + wn]), P[pre + bn])
        m = site_masks.get((layer, site))
        if m is not None:
            y = ops.mul(y, m)
        return ops.mark(("site", layer, site), y)

    h = ops.mark(("resid", 0), layernorm(emb, P["emb_ln_g"], P["emb_ln_b"]))
    for layer in range(config.num_layers):
        pre = f"L{layer}."
        q = linear(h, layer, "query_proj")
        k = linear(h, layer, "key_proj")
        v = linear(h, layer, "value_proj")
        heads = []
        for i in range(H):
            lo, hi = i * dh, (i + 1) * dh
            qh = ops.slice(q, -1, lo, hi)
            kh = ops.slice(k, -1, lo, hi)
            vh = ops.slice(v, -1, lo, hi)
            scores = ops.scale(ops.matmul(qh, ops.transpose(kh)), inv)
            heads.append(ops.matmul(ops.softmax(scores), vh))
        ctx = heads[0] if H == 1 else ops.concat(*heads, axis=-1)
        a = linear(ctx, layer, "attention_output")
        h = layernorm(ops.add(h, a), P[pre + "ln1_g"], P[pre + "ln1_b"])
        inter = linear(h, layer, "ffn_intermediate")
        o = linear(ops.gelu(inter), layer, "ffn_output")
        h = layernorm(ops.add(h, o), P[pre + "ln2_g"], P[pre + "ln2_b"])
        h = ops.mark(("resid", layer + 1), h)
    cls = ops.slice(h, -2, 0, 1)
    pooled = ops.tanh(ops.add(ops.matmul(cls, P["pool_w"]), P["pool_b"]))
    return ops.add(ops.matmul(pooled, P["cls_w"]), P["cls_b"])


_GRAPH_PARAMS_SKIP = ("tok_emb", "pos_emb", "seg_emb")


class CrossEncoder:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 vocab: Vocab | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.vocab = vocab
        self._hash = None
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} tokens, config says {config.vocab_size}")

    # -- embeddings ---------------------------------------------------------

    def embed_tokens(self, token_rows: np.ndarray, pair: TokenizedPair) -> np.ndarray:
        """Add positional and segment terms to given token-embedding rows."""
        s = len(pair)
        return (token_rows + self.params["pos_emb"][:s]) + self.params["seg_emb"][list(pair.segment_ids)]

    def embed(self, pair: TokenizedPair) -> np.ndarray:
        pair.validate(self.config.vocab_size, self.config.max_seq_len)
        return self.embed_tokens(self.params["tok_emb"][list(pair.token_ids)], pair)

    # -- forward --------------------------------------------------------------

    def apply(self, ops, emb, mask: PruningMask | None = None):
        """``graph`` with parameters injected as constants of ``ops``."""
        P = {k: ops.const(v) for k, v in self.params.items() if k not in _GRAPH_PARAMS_SKIP}
        masks = {k: ops.const(v) for k, v in mask.site_masks(self.config).items()} if mask else None
        return graph(ops, P, emb, masks, self.config)

    def forward(self, emb: np.ndarray, mask: PruningMask | None = None) -> np.ndarray:
        """Logits ``[..., 2]`` for (relevant, non_relevant)."""
        return self.apply(Eager(), emb, mask)[..., 0, :]

    def logits(self, pair: TokenizedPair, mask: PruningMask | None = None) -> np.ndarray:
        return self.forward(self.embed(pair), mask)

    def predict_label(self, pair: TokenizedPair, mask: PruningMask | None = None):
        """Returns (label, probabilities) with probabilities ordered as :data:`LABELS`."""
        probs = kernels.softmax_fwd(self.logits(pair, mask))
        return LABELS[int(np.argmax(probs))], probs

    # -- persistence --------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "config": asdict(self.config),
            "vocab": self.vocab.tokens if self.vocab is not None else None,
            "params": {
                k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                for k, v in self.params.items()
            },
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> CrossEncoder:
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
        config = ModelConfig(**doc["config"])
        params = {
            k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in doc["params"].items()
        }
        vocab = None
        if doc.get("vocab") is not None:
            vocab = Vocab(doc["vocab"][3:])
        return cls(config, params, vocab)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> CrossEncoder:
        return cls.from_json(Path(path).read_text())

    @property
    def content_hash(self) -> str:
        """sha256 of the serialized checkpoint."""
        if self._hash is None:
            self._hash = hashlib.sha256(self.to_json().encode()).hexdigest()
        return self._hash


def embed_batch(model: CrossEncoder, pairs: Iterable[TokenizedPair]) -> np.ndarray:
    """Stack embeddings of equal-length pairs into ``[B, seq, d_model]``."""
    embs = [model.embed(p) for p in pairs]
    if len({e.shape for e in embs}) > 1:
        raise ValueError("embed_batch needs pairs of equal length")
    return np.stack(embs)


def group_by_length(items, key=len):
    """Indices of ``items`` grouped by length, groups in ascending length order."""
    groups: dict[int, list[int]] = {}
    for i, it in enumerate(items):
        groups.setdefault(key(it), []).append(i)
    return [groups[k] for k in sorted(groups)]
