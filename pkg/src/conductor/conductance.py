"""Neuron conductance by Riemann-sum path integration.

For a neuron activation ``a`` recorded at path points ``t_k = k / N`` between
a baseline ``x'`` (t=0) and the input ``x`` (t=1), the conductance is

    sum_k  w_k(dF/da) * (a(t_{k+1}) - a(t_k))

where the gradient weight is ``dF/da`` at ``t_k`` (left rule) or the mean of
its values at ``t_k`` and ``t_{k+1}`` (trapezoid rule). Using recorded
activation differences rather than ``da/dt`` makes the per-neuron sum of
increments telescope to ``a(1) - a(0)``, and makes the conductance summed
over any cut of the network approach ``F(x) - F(x')``.

Token positions are summed to give one value per neuron.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .baseline import BaselineStrategy, build_baseline
from .data import LABELS, LabeledPair, TokenizedPair
from .model import SITES, CrossEncoder, ModelConfig, NeuronId, enumerate_neurons
from .tape import Tracer, backward

log = logging.getLogger(__name__)

QUADRATURES = ("riemann_left", "riemann_trapezoid")
INPUT = "input"


class ConductanceError(ValueError):
    pass


@dataclass(frozen=True)
class PathSpec:
    steps: int = 100
    quadrature: str = "riemann_trapezoid"

    def __post_init__(self):
        if self.steps < 1:
            raise ConductanceError("path needs at least one step")
        if self.quadrature not in QUADRATURES:
            raise ConductanceError(f"unknown quadrature {self.quadrature!r}")

    def as_dict(self):
        return {"N": self.steps, "quadrature": self.quadrature}


def path_point(x: np.ndarray, x_base: np.ndarray, t) -> np.ndarray:
    """``x_base + t * (x - x_base)``; an array ``t`` gives a leading batch axis."""
    x = np.asarray(x, dtype=np.float64)
    x_base = np.asarray(x_base, dtype=np.float64)
    if x.shape != x_base.shape:
        raise ConductanceError(f"shape mismatch: {x.shape} vs {x_base.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim:
        t = t.reshape(t.shape + (1,) * x.ndim)
    return x_base + t * (x - x_base)


@dataclass
class PathIntegral:
    """Result of one path integration.

    ``values[key]`` is the per-element conductance of the marked tensor,
    ``f_input``/``f_baseline`` the target at t=1 and t=0, and
    ``increments[key]`` the summed activation differences (equal to the
    activation change between the endpoints).
    """

    values: dict
    f_input: float
    f_baseline: float
    increments: dict = field(repr=False)
    endpoints: dict = field(repr=False)

    @property
    def delta_f(self) -> float:
        return self.f_input - self.f_baseline


def integrate_path(fn: Callable, x: np.ndarray, x_base: np.ndarray, target_index: int,
                   keys: Sequence[Hashable], path: PathSpec, batch_size: int = 256) -> PathIntegral:
    """Integrate gradients of one output element along the straight path.

    ``fn(ops, emb)`` must broadcast over a leading batch axis; ``target_index``
    is the flat index of the target within one batch element's output.
    ``keys`` are mark keys of ``fn`` or :data:`INPUT` for the path variable.
    """
    n = path.steps
    if n < 1:
        raise ConductanceError("N must be >= 1")
    ts = np.arange(n + 1, dtype=np.float64) / n
    acc: dict = {}
    inc: dict = {}
    ends: dict = {}
    carry: dict = {}
    f0 = f1 = None
    left = path.quadrature == "riemann_left"
    for start in range(0, n + 1, batch_size):
        tb = ts[start:start + batch_size]
        tracer = Tracer()
        emb = tracer.input(path_point(x, x_base, tb), requires_grad=True)
        out = fn(tracer, emb)
        nodes = {}
        for k in keys:
            nodes[k] = emb.id if k == INPUT else tracer.trace.marks[k]
        seed = np.zeros(out.value.shape)
        seed.reshape(len(tb), -1)[:, target_index] = 1.0
        adj = backward(tracer.trace, {out.id: seed}, keep=set(nodes.values()))
        fvals = out.value.reshape(len(tb), -1)[:, target_index]
        if start == 0:
            f0 = float(fvals[0])
        if start + len(tb) == n + 1:
            f1 = float(fvals[-1])
        for k, nid in nodes.items():
            a = tracer.trace.value(nid)
            if not tracer.trace[nid].requires_grad:
                a = np.broadcast_to(a, (len(tb),) + a.shape)
            g = adj.get(nid)
            g = np.zeros(a.shape) if g is None else np.broadcast_to(g, a.shape)
            bad = ~np.isfinite(g).reshape(len(tb), -1).all(axis=1)
            if bad.any():
                raise ConductanceError(f"non-finite gradient for {k!r} at path step {start + int(np.argmax(bad))}")
            if k in carry:
                ga, aa = carry[k]
                a_all = np.concatenate([aa[None], a])
                g_all = np.concatenate([ga[None], g])
            else:
                a_all, g_all = a, g
                ends[k] = [a[0].copy(), None]
            da = a_all[1:] - a_all[:-1]
            w = g_all[:-1] if left else 0.5 * (g_all[1:] + g_all[:-1])
            part = (w * da).sum(axis=0)
            acc[k] = acc[k] + part if k in acc else part
            dsum = da.sum(axis=0)
            inc[k] = inc[k] + dsum if k in inc else dsum
            carry[k] = (g[-1].copy(), a[-1].copy())
    for k in keys:
        ends[k][1] = carry[k][1]
        a0, a1 = ends[k]
        scale = max(1.0, float(np.max(np.abs(a0))), float(np.max(np.abs(a1))))
        err = float(np.max(np.abs(inc[k] - (a1 - a0))))
        if err > 1e-9 * scale * max(1, n) ** 0.5:
            raise ConductanceError(f"activation increments for {k!r} do not telescope (err {err:.3g})")
    return PathIntegral(acc, f1, f0, inc, ends)


# ---------------------------------------------------------------------------
# model-level attribution
# ---------------------------------------------------------------------------


def _target_fn(model: CrossEncoder, target: str):
    if target == "logit":
        return lambda ops, emb: model.apply(ops, emb)
    if target == "prob":
        return lambda ops, emb: ops.softmax(model.apply(ops, emb))
    raise ConductanceError(f"unknown target {target!r} (expected 'logit' or 'prob')")


def _label_index(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    try:
        return LABELS.index(label)
    except ValueError:
        raise ConductanceError(f"unknown label {label!r}") from None


def _baseline(model, pair, strategy):
    if isinstance(strategy, np.ndarray):
        return strategy
    return build_baseline(model, pair, strategy)


def site_keys(config: ModelConfig):
    return [("site", layer, site) for layer in range(config.num_layers) for site in SITES]


def resid_keys(config: ModelConfig):
    return [("resid", layer) for layer in range(config.num_layers + 1)]


@dataclass(frozen=True)
class AttributionRecord:
    neuron: NeuronId
    per_token: np.ndarray
    total: float


@dataclass
class PairAttribution:
    """Per-token conductance of every neuron site for one pair."""

    config: ModelConfig
    per_token: dict  # (layer, site) -> [seq, width]
    f_input: float
    f_baseline: float

    def token_summed(self) -> np.ndarray:
        """One value per neuron, in :func:`enumerate_neurons` order."""
        return np.concatenate([
            self.per_token[(layer, site)].sum(axis=0)
            for layer in range(self.config.num_layers) for site in SITES
        ])

    @property
    def records(self) -> list[AttributionRecord]:
        out = []
        for layer in range(self.config.num_layers):
            for site in SITES:
                v = self.per_token[(layer, site)]
                tot = v.sum(axis=0)
                for unit in range(v.shape[1]):
                    out.append(AttributionRecord(NeuronId(layer, site, unit), v[:, unit], float(tot[unit])))
        return out


def conductance(model: CrossEncoder, pair: TokenizedPair, baseline, target_label, path: PathSpec,
                keys, target: str = "logit", batch_size: int = 256) -> PathIntegral:
    """Path integral for arbitrary marks of the model (sites, residual cuts, input)."""
    x = model.embed(pair)
    xb = _baseline(model, pair, baseline)
    return integrate_path(_target_fn(model, target), x, xb, _label_index(target_label),
                          list(keys), path, batch_size)


def nig_attribute(model: CrossEncoder, pair: TokenizedPair, baseline, target_label,
                  path: PathSpec = PathSpec(), target: str = "logit",
                  batch_size: int = 256) -> PairAttribution:
    """Neuron conductance for every neuron site of the model."""
    keys = site_keys(model.config)
    res = conductance(model, pair, baseline, target_label, path, keys, target, batch_size)
    per_token = {(k[1], k[2]): res.values[k] for k in keys}
    return PairAttribution(model.config, per_token, res.f_input, res.f_baseline)


def oracle_nig(model: CrossEncoder, pair: TokenizedPair, baseline, target_label,
               dense_steps: int = 100_000, target: str = "logit") -> PairAttribution:
    """High-resolution trapezoid reference for :func:`nig_attribute`."""
    if dense_steps < 10_000:
        raise ConductanceError("oracle needs dense_steps >= 10000")
    return nig_attribute(model, pair, baseline, target_label,
                         PathSpec(dense_steps, "riemann_trapezoid"), target, batch_size=2048)


@dataclass
class InputAttribution:
    attributions: np.ndarray
    residual: float
    f_input: float
    f_baseline: float


def ig_input(model: CrossEncoder, pair: TokenizedPair, baseline, target_label,
             path: PathSpec = PathSpec(), target: str = "logit", batch_size: int = 256) -> InputAttribution:
    """Integrated gradients on embedding elements, with the completeness residual."""
    res = conductance(model, pair, baseline, target_label, path, [INPUT], target, batch_size)
    attr = res.values[INPUT]
    resid = abs(math.fsum(attr.ravel()) - res.delta_f)
    return InputAttribution(attr, resid, res.f_input, res.f_baseline)


# ---------------------------------------------------------------------------
# dataset-level schemes
# ---------------------------------------------------------------------------


@dataclass
class AttributionScheme:
    """Mean token-summed conductance of every neuron for one (dataset, label)."""

    dataset: str
    label: str
    values: np.ndarray
    n_samples: int
    path: PathSpec
    model_hash: str
    baseline: str = "all_pad"
    target: str = "logit"
    excluded: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.n_samples < 1:
            raise ConductanceError("scheme needs at least one sample")

    def to_json(self) -> str:
        doc = {
            "dataset": self.dataset,
            "label": self.label,
            "n_samples": self.n_samples,
            "path": self.path.as_dict(),
            "baseline": self.baseline,
            "target": self.target,
            "excluded": self.excluded,
            "model_hash": self.model_hash,
            "values": self.values.tolist(),
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> AttributionScheme:
        d = json.loads(text)
        return cls(d["dataset"], d["label"], np.asarray(d["values"], dtype=np.float64),
                   d["n_samples"], PathSpec(d["path"]["N"], d["path"]["quadrature"]),
                   d["model_hash"], d.get("baseline", "all_pad"), d.get("target", "logit"),
                   d.get("excluded", {}))

    def digest(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()


def fsum_mean(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Columnwise correctly-rounded mean; independent of row order."""
    m = np.stack(rows)
    return np.array([math.fsum(col) for col in m.T]) / len(rows)


def filter_pairs(model: CrossEncoder, pairs: Sequence[LabeledPair], label: str):
    """Keep pairs whose gold label is ``label`` and whose prediction agrees."""
    included, excluded = [], {"other_label": 0, "unlabeled": 0, "mispredicted": 0}
    for p in sorted(pairs, key=lambda p: p.key):
        if p.label is None:
            excluded["unlabeled"] += 1
        elif p.label != label:
            excluded["other_label"] += 1
        elif model.predict_label(p.pair)[0] != p.label:
            excluded["mispredicted"] += 1
        else:
            included.append(p)
    return included, excluded


def _pair_job(args):
    model, pair, baseline, label, path, target = args
    return nig_attribute(model, pair, baseline, label, path, target).token_summed()


def attribute_dataset(model: CrossEncoder, pairs: Sequence[LabeledPair], label: str, baseline,
                      path: PathSpec = PathSpec(), target: str = "logit", dataset: str | None = None,
                      workers: int = 1, max_pairs: int | None = None) -> AttributionScheme:
    """Average token-summed conductance over correctly predicted pairs of one label.

    With ``max_pairs`` only the first pairs in (dataset, qid, pid) order are
    used; the rest are counted as ``over_limit`` in ``excluded``.
    """
    _label_index(label)
    included, excluded = filter_pairs(model, pairs, label)
    if max_pairs is not None:
        excluded["over_limit"] = max(0, len(included) - max_pairs)
        included = included[:max_pairs]
    if not included:
        raise ConductanceError(f"no pair included for label {label!r}; excluded: {excluded}")
    if dataset is None:
        dataset = included[0].dataset
    jobs = [(model, p.pair, baseline, label, path, target) for p in included]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_pair_job, jobs))
    else:
        rows = [_pair_job(j) for j in jobs]
    name = baseline.value if isinstance(baseline, BaselineStrategy) else str(baseline)
    return AttributionScheme(dataset, label, fsum_mean(rows), len(rows), path, model.content_hash,
                             name, target, excluded)


def neuron_count(config: ModelConfig) -> int:
    return len(enumerate_neurons(config))
