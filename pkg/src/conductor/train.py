"""Desk-scale cross-entropy training of the toy cross-encoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .data import PAD_ID, SyntheticSpec, TokenizedPair, generate_training_pairs
from .model import CrossEncoder, ModelConfig, graph, init_params
from .tape import Tracer, backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


DEFAULT_EPOCHS = 12


@dataclass(frozen=True)
class TrainSettings:
    n_train: int = 20000
    n_heldout: int = 1000
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 1.0
    optimizer: str = "sgd"
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class TrainReport:
    heldout_accuracy: float
    epoch_losses: list[float] = field(default_factory=list)
    epoch_accuracies: list[float] = field(default_factory=list)


def config_for(spec: SyntheticSpec, **overrides) -> ModelConfig:
    """Model config whose vocabulary and length limits match ``spec``."""
    base = dict(vocab_size=len(spec.vocab()), max_seq_len=spec.seq_len)
    base.update(overrides)
    return ModelConfig(**base)


def _batch_embed(params, ids: np.ndarray, segs: np.ndarray):
    s = ids.shape[1]
    return (params["tok_emb"][ids] + params["pos_emb"][:s]) + params["seg_emb"][segs]


def _encode(pairs):
    tps = [TokenizedPair.build(q, p) for q, p, _ in pairs]
    ids = np.array([t.token_ids for t in tps])
    segs = np.array([t.segment_ids for t in tps])
    labels = np.array([y for _, _, y in pairs])
    return ids, segs, labels


def loss_and_grads(config: ModelConfig, params, ids, segs, labels):
    """Mean cross-entropy over a batch of equal-length pairs and its parameter gradients."""
    tracer = Tracer()
    emb = tracer.input(_batch_embed(params, ids, segs))
    P = {k: tracer.const(v, requires_grad=True) for k, v in params.items()
         if k not in ("tok_emb", "pos_emb", "seg_emb")}
    out = graph(tracer, P, emb, None, config)
    logits = out.value[:, 0, :]
    probs = kernels.softmax_fwd(logits)
    n = len(labels)
    loss = float(-np.mean(np.log(probs[np.arange(n), labels])))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    trace = tracer.trace
    adj = backward(trace, {out.id: dlogits[:, None, :]})
    grads = {k: adj.get(v.id, np.zeros_like(params[k])) for k, v in P.items()}
    g_emb = adj.get(emb.id)
    if g_emb is None:
        g_emb = np.zeros(emb.value.shape)
    g_tok = np.zeros_like(params["tok_emb"])
    np.add.at(g_tok, ids, g_emb)
    g_tok[PAD_ID] = 0.0
    grads["tok_emb"] = g_tok
    g_pos = np.zeros_like(params["pos_emb"])
    g_pos[: ids.shape[1]] = g_emb.sum(axis=0)
    grads["pos_emb"] = g_pos
    g_seg = np.zeros_like(params["seg_emb"])
    np.add.at(g_seg, segs, g_emb)
    grads["seg_emb"] = g_seg
    return loss, grads, logits


def accuracy(model: CrossEncoder, pairs) -> float:
    ids, segs, labels = _encode(pairs)
    logits = model.forward(_batch_embed(model.params, ids, segs))
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def train_toy(config: ModelConfig, spec: SyntheticSpec, epochs: int, seed: int,
              settings: TrainSettings = TrainSettings()) -> tuple[CrossEncoder, TrainReport]:
    """Train with SGD (momentum, global-norm gradient clipping) on synthetic pairs.

    Parameters are initialised from ``seed`` (overriding ``config.seed``) and
    the same seed drives data generation and shuffling, so a run is fully
    determined by its arguments.
    """
    vocab = spec.vocab()
    if config.vocab_size != len(vocab):
        raise ValueError(f"config.vocab_size={config.vocab_size} but spec vocabulary has {len(vocab)}")
    if config.max_seq_len < spec.seq_len:
        raise ValueError("config.max_seq_len shorter than the synthetic pair length")
    config = replace(config, seed=seed)
    params = init_params(config)
    train = generate_training_pairs(spec, settings.n_train, seed + 1)
    heldout = generate_training_pairs(spec, settings.n_heldout, seed + 2)
    ids, segs, labels = _encode(train)
    rng = np.random.default_rng(seed + 3)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    second = {k: np.zeros_like(v) for k, v in params.items()}
    if settings.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {settings.optimizer!r}")
    step = 0
    report = TrainReport(heldout_accuracy=float("nan"))
    model = CrossEncoder(config, params, vocab)
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        nb = 0
        for start in range(0, len(order), settings.batch_size):
            b = order[start:start + settings.batch_size]
            loss, grads, _ = loss_and_grads(config, params, ids[b], segs[b], labels[b])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {nb}")
            norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
            if not np.isfinite(norm):
                raise TrainingError(f"non-finite gradient norm at epoch {epoch}, batch {nb}")
            scale = min(1.0, settings.clip_norm / norm) if norm > 0 else 1.0
            step += 1
            for k, g in grads.items():
                g = scale * g
                if settings.optimizer == "sgd":
                    velocity[k] = settings.momentum * velocity[k] + g
                    params[k] -= settings.lr * velocity[k]
                else:
                    b1, b2 = settings.momentum, settings.beta2
                    velocity[k] = b1 * velocity[k] + (1 - b1) * g
                    second[k] = b2 * second[k] + (1 - b2) * g * g
                    mhat = velocity[k] / (1 - b1**step)
                    vhat = second[k] / (1 - b2**step)
                    params[k] -= settings.lr * mhat / (np.sqrt(vhat) + settings.adam_eps)
            params["tok_emb"][PAD_ID] = 0.0
            total += loss
            nb += 1
        report.epoch_losses.append(total / max(nb, 1))
        acc = accuracy(model, heldout)
        report.epoch_accuracies.append(acc)
        log.info("epoch %d loss %.4f heldout acc %.3f", epoch, report.epoch_losses[-1], acc)
    report.heldout_accuracy = accuracy(model, heldout)
    model = CrossEncoder(config, params, vocab)
    return model, report
