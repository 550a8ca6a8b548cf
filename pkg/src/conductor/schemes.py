"""Neuron sets derived from attribution schemes.

Sets store neuron *indices* into :func:`~conductor.model.enumerate_neurons`
order; a model config turns them back into :class:`NeuronId` values.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .conductance import AttributionScheme, ConductanceError, fsum_mean
from .data import NON_RELEVANT, RELEVANT
from .model import SITES, ModelConfig, NeuronId, enumerate_neurons

DEFAULT_LEVELS = (0.01, 0.1, 1.0)


class SchemeError(ValueError):
    pass


def scheme_name(scheme: AttributionScheme) -> str:
    """``P_<dataset>`` / ``N_<dataset>`` for base schemes, the fusion expression otherwise."""
    if scheme.label == RELEVANT:
        return f"P_{scheme.dataset}"
    if scheme.label == NON_RELEVANT:
        return f"N_{scheme.dataset}"
    return scheme.dataset


@dataclass(frozen=True)
class NeuronSet:
    provenance: str
    level: float | None
    members: frozenset
    n_total: int
    model_hash: str

    def __len__(self):
        return len(self.members)

    def __contains__(self, idx):
        return idx in self.members

    def sorted_members(self) -> list[int]:
        return sorted(self.members)

    def neuron_ids(self, config: ModelConfig) -> list[NeuronId]:
        neurons = enumerate_neurons(config)
        if len(neurons) != self.n_total:
            raise SchemeError("set does not belong to this model config")
        return [neurons[i] for i in self.sorted_members()]

    def to_json(self, config: ModelConfig) -> str:
        doc = {
            "provenance": self.provenance,
            "X": self.level,
            "model_hash": self.model_hash,
            "n_total": self.n_total,
            "neuron_ids": [n.as_dict() for n in self.neuron_ids(config)],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str, config: ModelConfig) -> NeuronSet:
        d = json.loads(text)
        index = {n: i for i, n in enumerate(enumerate_neurons(config))}
        try:
            members = frozenset(index[NeuronId(n["layer"], n["site"], n["unit"])] for n in d["neuron_ids"])
        except KeyError as e:
            raise SchemeError(f"neuron {e.args[0]} not in this model") from None
        return cls(d["provenance"], d["X"], members, len(index), d["model_hash"])


def top_count(level: float, total: int) -> int:
    """``ceil(level / 100 * total)`` in exact arithmetic."""
    x = Fraction(str(level)) if isinstance(level, float) else Fraction(level)
    if not 0 < x <= 100:
        raise SchemeError(f"pruning level must be in (0, 100], got {level}")
    return math.ceil(x * total / 100)


def ranking(values: np.ndarray) -> np.ndarray:
    """Neuron indices by descending value; ties keep neuron order."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise SchemeError("scheme contains non-finite values")
    return np.argsort(-values, kind="stable")


def top_percent(scheme: AttributionScheme, level: float, name: str | None = None) -> NeuronSet:
    """The ``level``% of neurons with the largest mean conductance."""
    k = top_count(level, len(scheme.values))
    members = frozenset(int(i) for i in ranking(scheme.values)[:k])
    name = name or scheme_name(scheme)
    return NeuronSet(f"top({name},{level:g}%)", level, members, len(scheme.values), scheme.model_hash)


def _check_compatible(items, what):
    hashes = {i.model_hash for i in items}
    if len(hashes) > 1:
        raise SchemeError(f"cannot combine {what} from different models")


def intersect(sets: Sequence[NeuronSet]) -> NeuronSet:
    if not sets:
        raise SchemeError("intersect needs at least one set")
    _check_compatible(sets, "sets")
    if len({s.n_total for s in sets}) > 1:
        raise SchemeError("sets come from different neuron spaces")
    members = frozenset.intersection(*[s.members for s in sets])
    levels = {s.level for s in sets}
    level = levels.pop() if len(levels) == 1 else None
    prov = "inter(" + ", ".join(s.provenance for s in sets) + ")"
    return NeuronSet(prov, level, members, sets[0].n_total, sets[0].model_hash)


def fuse(schemes: Sequence[AttributionScheme], name: str | None = None) -> AttributionScheme:
    """Elementwise mean of the schemes' values."""
    if len(schemes) < 2:
        raise SchemeError("fuse needs at least two schemes")
    _check_compatible(schemes, "schemes")
    if len({len(s.values) for s in schemes}) > 1:
        raise SchemeError("schemes cover different neuron spaces")
    name = name or "fuse(" + ", ".join(scheme_name(s) for s in schemes) + ")"
    try:
        return AttributionScheme(
            dataset=name,
            label="fused",
            values=fsum_mean([s.values for s in schemes]),
            n_samples=sum(s.n_samples for s in schemes),
            path=schemes[0].path,
            model_hash=schemes[0].model_hash,
            baseline=schemes[0].baseline,
            target=schemes[0].target,
        )
    except ConductanceError as e:
        raise SchemeError(str(e)) from None


def _layers(config: ModelConfig, n_total: int) -> np.ndarray:
    neurons = enumerate_neurons(config)
    if len(neurons) != n_total:
        raise SchemeError("set does not belong to this model config")
    return np.array([n.layer for n in neurons])


def layer_counts(s: NeuronSet, config: ModelConfig) -> dict[int, int]:
    layers = _layers(config, s.n_total)
    counts = {layer: 0 for layer in range(config.num_layers)}
    for i in s.members:
        counts[int(layers[i])] += 1
    return counts


def random_matched_set(reference: NeuronSet, config: ModelConfig, seed: int) -> NeuronSet:
    """Uniformly random neurons with the reference's per-layer counts."""
    if not reference.members:
        raise SchemeError("reference set is empty")
    layers = _layers(config, reference.n_total)
    rng = np.random.default_rng(seed)
    chosen = []
    for layer, count in sorted(layer_counts(reference, config).items()):
        if count:
            pool = np.flatnonzero(layers == layer)
            chosen.extend(int(i) for i in rng.choice(pool, size=count, replace=False))
    return NeuronSet(f"random({reference.provenance},seed={seed})", reference.level,
                     frozenset(chosen), reference.n_total, reference.model_hash)


def overlap_pct(a: NeuronSet, b: NeuronSet) -> float:
    """``100 * |a & b| / |a|``."""
    if not a.members:
        return 0.0
    return 100.0 * len(a.members & b.members) / len(a.members)


def intersection_curve(a: AttributionScheme, b: AttributionScheme, grid: Iterable[float]):
    """``(X, percent of top(a, X) also in top(b, X))`` for every X in ``grid``."""
    return [(float(x), overlap_pct(top_percent(a, x), top_percent(b, x))) for x in grid]


def layer_distribution(s: NeuronSet, config: ModelConfig) -> dict[tuple[int, str], int]:
    counts = {(layer, site): 0 for layer in range(config.num_layers) for site in SITES}
    for n in s.neuron_ids(config):
        counts[(n.layer, n.site)] += 1
    return counts


def write_curve_csv(rows, path, header=("X", "intersection_pct")) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def write_distribution_csv(counts: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "site", "count"])
        for (layer, site), c in counts.items():
            w.writerow([layer, site, c])


def default_grid() -> list[float]:
    """Pruning percentages for intersection curves (log-spaced, 0.01% to 100%)."""
    return [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0]
