"""End-to-end orchestration over an artifact directory.

Every stage reads only what earlier stages wrote under the output directory,
so any stage can be deleted and re-run on its own. Layout::

    corpora/<id>/        queries, passages, qrels, candidates
    model/               model.json, train_report.json
    baseline/            suppression table, selected strategy
    schemes/             one file per (dataset, label), plus fused schemes
    sets/                <name>@<X>.json neuron sets
    ablation/            table CSV, per-dataset TREC runs of the unpruned model
    report/              P/N overlap, intersection curves, layer histograms
    manifest.json        sha256 of every file read or written
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import ablation, baseline, schemes
from .conductance import AttributionScheme, PathSpec, attribute_dataset
from .data import LABELS, NON_RELEVANT, Corpus, SyntheticSpec, generate_synthetic_corpus
from .expr import evaluate, evaluate_set
from .model import CrossEncoder
from .train import DEFAULT_EPOCHS, TrainSettings, config_for, train_toy

log = logging.getLogger(__name__)

STAGES = ("gen-corpus", "train", "baseline-report", "attribute", "combine", "ablate", "report")
ROLES = ("attribution", "evaluation")
DOMAINS = ("in_domain", "out_of_domain")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    id: str
    role: str
    domain: str = "in_domain"
    path: str | None = None
    n_queries: int = 50
    topics: tuple[int, ...] | None = None
    relevant_only: bool = False
    seed: int | None = None


@dataclass
class WorkbenchConfig:
    seed: int = 0
    model: dict = field(default_factory=dict)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    epochs: int = DEFAULT_EPOCHS
    train: TrainSettings = field(default_factory=TrainSettings)
    baseline: str = "auto"
    baseline_pairs: int = 200
    baseline_use_all: bool = False
    path: PathSpec = field(default_factory=PathSpec)
    target: str = "logit"
    max_pairs: int | None = 50
    levels: tuple[float, ...] = schemes.DEFAULT_LEVELS
    random_reps: int = 50
    ablate: tuple[str, ...] = ()
    sets: dict[str, str] = field(default_factory=dict)
    datasets: list[DatasetConfig] = field(default_factory=list)
    base_dir: Path = Path(".")

    def by_role(self, role: str) -> list[DatasetConfig]:
        return [d for d in self.datasets if d.role == role]

    def dataset_seed(self, i: int) -> int:
        d = self.datasets[i]
        return d.seed if d.seed is not None else self.seed + 101 * (i + 1)

    def validate(self) -> None:
        ids = [d.id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise ConfigError("dataset ids must be unique")
        for d in self.datasets:
            if d.role not in ROLES:
                raise ConfigError(f"dataset {d.id!r}: role must be one of {ROLES}")
            if d.domain not in DOMAINS:
                raise ConfigError(f"dataset {d.id!r}: domain must be one of {DOMAINS}")
            if not d.id.replace("_", "").replace("-", "").isalnum():
                raise ConfigError(f"dataset id {d.id!r} may only use letters, digits, '_' and '-'")
        if not self.by_role("attribution") or not self.by_role("evaluation"):
            raise ConfigError("need at least one attribution and one evaluation dataset")
        choices = ("auto",) + tuple(b.value for b in baseline.STRATEGIES)
        if self.baseline not in choices:
            raise ConfigError(f"baseline strategy must be one of {choices}, got {self.baseline!r}")
        if not self.levels:
            raise ConfigError("at least one pruning level is required")
        for lv in self.levels:
            schemes.top_count(lv, 1)
        if self.random_reps < 0:
            raise ConfigError("random_reps must be >= 0")
        self.synthetic.check()


def _pick(section: dict, cls, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    return dict(section)


def _expect(doc: dict, allowed: set, where: str):
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")


def parse_config(doc: dict, base_dir: Path = Path(".")) -> WorkbenchConfig:
    top = {"seed", "model", "synthetic", "train", "baseline", "attribution", "ablation", "sets", "datasets"}
    _expect(doc, top, "top level")
    cfg = WorkbenchConfig(base_dir=Path(base_dir))
    cfg.seed = int(doc.get("seed", 0))
    model = dict(doc.get("model", {}))
    _expect(model, {"num_layers", "d_model", "num_heads", "d_ff"}, "model")
    cfg.model = model
    cfg.synthetic = SyntheticSpec(**_pick(doc.get("synthetic", {}), SyntheticSpec, "synthetic"))
    train = dict(doc.get("train", {}))
    cfg.epochs = int(train.pop("epochs", DEFAULT_EPOCHS))
    cfg.train = TrainSettings(**_pick(train, TrainSettings, "train"))
    b = doc.get("baseline", {})
    _expect(b, {"strategy", "n_pairs", "use_all"}, "baseline")
    cfg.baseline = b.get("strategy", "auto")
    cfg.baseline_pairs = int(b.get("n_pairs", 200))
    cfg.baseline_use_all = bool(b.get("use_all", False))
    a = doc.get("attribution", {})
    _expect(a, {"steps", "quadrature", "target", "max_pairs"}, "attribution")
    cfg.path = PathSpec(int(a.get("steps", 100)), a.get("quadrature", "riemann_trapezoid"))
    cfg.target = a.get("target", "logit")
    mp = a.get("max_pairs", 50)
    cfg.max_pairs = None if mp in (None, 0) else int(mp)
    ab = doc.get("ablation", {})
    _expect(ab, {"levels", "random_reps", "schemes"}, "ablation")
    cfg.levels = tuple(float(x) for x in ab.get("levels", schemes.DEFAULT_LEVELS))
    cfg.random_reps = int(ab.get("random_reps", 50))
    cfg.ablate = tuple(ab.get("schemes", ()))
    cfg.sets = {str(k): str(v) for k, v in doc.get("sets", {}).items()}
    for d in doc.get("datasets", []):
        d = _pick(d, DatasetConfig, "datasets")
        if "topics" in d:
            d["topics"] = tuple(d["topics"])
        cfg.datasets.append(DatasetConfig(**d))
    cfg.validate()
    return cfg


def load_config(path) -> WorkbenchConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_config(doc, path.parent)


# ---------------------------------------------------------------------------
# artifact bookkeeping
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _level_tag(level: float) -> str:
    return f"{level:g}"


class Workbench:
    def __init__(self, config: WorkbenchConfig, out, workers: int = 1):
        self.cfg = config
        self.out = Path(out)
        self.workers = max(1, int(workers))

    # paths -----------------------------------------------------------------

    def corpus_dir(self, ds: str) -> Path:
        return self.out / "corpora" / ds

    @property
    def model_path(self) -> Path:
        return self.out / "model" / "model.json"

    def scheme_path(self, name: str) -> Path:
        return self.out / "schemes" / f"{name}.json"

    def set_path(self, name: str, level: float) -> Path:
        return self.out / "sets" / f"{name}@{_level_tag(level)}.json"

    # loaders ---------------------------------------------------------------

    def _require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"{path.relative_to(self.out)} missing; run '{stage}' first")
        return path

    def load_model(self) -> CrossEncoder:
        return CrossEncoder.load(self._require(self.model_path, "train"))

    def load_corpus(self, ds: str) -> Corpus:
        self._require(self.corpus_dir(ds) / "queries.jsonl", "gen-corpus")
        return Corpus.read(self.corpus_dir(ds))

    def load_schemes(self) -> dict[str, AttributionScheme]:
        index = json.loads(self._require(self.out / "schemes" / "index.json", "attribute").read_text())
        return {n: AttributionScheme.from_json(self.scheme_path(n).read_text()) for n in index["schemes"]}

    def selected_baseline(self) -> str:
        if self.cfg.baseline != "auto":
            return self.cfg.baseline
        sel = self._require(self.out / "baseline" / "selected.json", "baseline-report")
        return json.loads(sel.read_text())["strategy"]

    # stages ----------------------------------------------------------------

    def gen_corpus(self):
        for i, d in enumerate(self.cfg.datasets):
            if d.path:
                src = self.cfg.base_dir / d.path
                corpus = Corpus.read(src)
            else:
                spec = SyntheticSpec(**{**asdict(self.cfg.synthetic), "topics": d.topics,
                                        "relevant_only": d.relevant_only})
                corpus = generate_synthetic_corpus(spec, d.n_queries, self.cfg.dataset_seed(i), prefix=f"{d.id}-")
            corpus.write(self.corpus_dir(d.id))
            log.info("corpus %s: %d queries", d.id, len(corpus.queries))

    def train(self):
        spec = self.cfg.synthetic
        model, report = train_toy(config_for(spec, **self.cfg.model), spec, self.cfg.epochs,
                                  self.cfg.seed, self.cfg.train)
        model.save(self.model_path)
        _write_json(self.out / "model" / "train_report.json", {
            "heldout_accuracy": report.heldout_accuracy,
            "epoch_losses": report.epoch_losses,
            "epoch_accuracies": report.epoch_accuracies,
            "model_hash": model.content_hash,
        })
        log.info("trained model: held-out accuracy %.3f", report.heldout_accuracy)

    def baseline_report(self):
        model = self.load_model()
        pool = []
        for d in self.cfg.by_role("attribution"):
            pool.extend(self.load_corpus(d.id).labeled_pairs(model.vocab, d.id))
        pairs = baseline.selection_pairs(model, pool, n=self.cfg.baseline_pairs, use_all=self.cfg.baseline_use_all)
        if not pairs:
            raise ValueError("no predicted-relevant pair available for the baseline comparison")
        ranked = baseline.rank_strategies(model, pairs)
        (self.out / "baseline").mkdir(parents=True, exist_ok=True)
        baseline.write_table(ranked, self.out / "baseline" / "baseline_table.csv")
        chosen = self.cfg.baseline if self.cfg.baseline != "auto" else ranked[0].strategy
        _write_json(self.out / "baseline" / "selected.json", {
            "strategy": chosen, "mode": self.cfg.baseline, "n_pairs": len(pairs),
        })
        log.info("baseline: %s", chosen)

    def attribute(self):
        model = self.load_model()
        strategy = self.selected_baseline()
        names = []
        for d in self.cfg.by_role("attribution"):
            pairs = self.load_corpus(d.id).labeled_pairs(model.vocab, d.id)
            for label in LABELS:
                if label == NON_RELEVANT and d.relevant_only:
                    log.warning("dataset %s has only relevant judgments; skipping its %s scheme", d.id, label)
                    continue
                s = attribute_dataset(model, pairs, label, strategy, self.cfg.path, self.cfg.target,
                                      dataset=d.id, workers=self.workers, max_pairs=self.cfg.max_pairs)
                name = schemes.scheme_name(s)
                self.scheme_path(name).parent.mkdir(parents=True, exist_ok=True)
                self.scheme_path(name).write_text(s.to_json() + "\n")
                names.append(name)
                log.info("scheme %s from %d pairs", name, s.n_samples)
        _write_json(self.out / "schemes" / "index.json", {"schemes": names, "derived": []})

    def combine(self):
        model = self.load_model()
        env = self.load_schemes()
        index = json.loads((self.out / "schemes" / "index.json").read_text())
        base = list(index["schemes"])
        derived = []
        for d in self.cfg.by_role("attribution"):
            p, n = f"P_{d.id}", f"N_{d.id}"
            if p in env and n in env:
                name = f"F_{d.id}"
                env[name] = schemes.fuse([env[p], env[n]], name=name)
                derived.append(name)
        set_exprs = {}
        for name, text in self.cfg.sets.items():
            if name in env:
                raise ValueError(f"set name {name!r} shadows a scheme")
            # a set expression only sees schemes defined before it
            value = evaluate(text, env, self.cfg.levels[0])
            if isinstance(value, AttributionScheme):
                env[name] = AttributionScheme(**{**value.__dict__, "dataset": name})
                derived.append(name)
            else:
                set_exprs[name] = (text, dict(env))
        for name in derived:
            self.scheme_path(name).write_text(env[name].to_json() + "\n")
        _write_json(self.out / "schemes" / "index.json", {"schemes": base, "derived": derived})
        written = []
        for name in base + derived + list(set_exprs):
            for level in self.cfg.levels:
                if name in set_exprs:
                    text, scope = set_exprs[name]
                    s = evaluate_set(text, scope, level)
                else:
                    s = schemes.top_percent(env[name], level)
                path = self.set_path(name, level)
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(s.to_json(model.config) + "\n")
                written.append({"name": name, "X": level, "file": path.name, "size": len(s)})
        _write_json(self.out / "sets" / "index.json", {"sets": written})

    def load_sets(self, model: CrossEncoder) -> dict[str, dict[float, schemes.NeuronSet]]:
        index = json.loads(self._require(self.out / "sets" / "index.json", "combine").read_text())
        out: dict[str, dict[float, schemes.NeuronSet]] = {}
        for e in index["sets"]:
            text = (self.out / "sets" / e["file"]).read_text()
            out.setdefault(e["name"], {})[e["X"]] = schemes.NeuronSet.from_json(text, model.config)
        return out

    def ablate(self):
        model = self.load_model()
        sets = self.load_sets(model)
        wanted = self.cfg.ablate or tuple(sorted(sets))
        missing = [n for n in wanted if n not in sets]
        if missing:
            raise ValueError(f"ablation requested for unknown sets: {missing}")
        evals = {d.id: self.load_corpus(d.id) for d in self.cfg.by_role("evaluation")}
        evaluators = {k: ablation.RankingEvaluator(model, c, k) for k, c in evals.items()}
        run_dir = self.out / "ablation" / "runs"
        run_dir.mkdir(parents=True, exist_ok=True)
        for k, ev in sorted(evaluators.items()):
            ablation.write_trec_run(ev.run(), run_dir / f"{k}.orig.trec")
        reports = ablation.ablation_study(model, {n: sets[n] for n in wanted}, evals,
                                          self.cfg.random_reps, self.cfg.seed, evaluators)
        groups = {}
        for dom in DOMAINS:
            members = [d.id for d in self.cfg.by_role("evaluation") if d.domain == dom]
            if members:
                groups[f"avg_{dom}"] = members
        ablation.write_report_csv(reports, self.out / "ablation" / "ablation_table.csv", groups)
        _write_json(self.out / "ablation" / "random_draws.json", {
            f"{r.scheme}@{_level_tag(r.level)}/{r.dataset}": r.random_pcts for r in reports
        })

    def report(self):
        model = self.load_model()
        env = self.load_schemes()
        rdir = self.out / "report"
        rdir.mkdir(parents=True, exist_ok=True)
        rows = []
        for d in self.cfg.by_role("attribution"):
            p, n = env.get(f"P_{d.id}"), env.get(f"N_{d.id}")
            if p is None or n is None:
                continue
            for level in schemes.DEFAULT_LEVELS:
                a, b = schemes.top_percent(p, level), schemes.top_percent(n, level)
                rows.append([d.id, level, len(a), len(b), len(a.members & b.members), schemes.overlap_pct(a, b)])
        with open(rdir / "overlap_PN.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["dataset", "X", "n_P", "n_N", "n_common", "overlap_pct"])
            for r in rows:
                w.writerow([r[0], repr(r[1]), r[2], r[3], r[4], repr(r[5])])
        grid = schemes.default_grid()
        base = [x for x in env if x[:2] in ("P_", "N_")]
        (rdir / "curves").mkdir(exist_ok=True)
        for i, a in enumerate(base):
            for b in base[i + 1:]:
                # same label across datasets, or P vs N on one dataset
                if a[:2] == b[:2] or a[2:] == b[2:]:
                    curve = schemes.intersection_curve(env[a], env[b], grid)
                    schemes.write_curve_csv(curve, rdir / "curves" / f"{a}__{b}.csv")
        (rdir / "layers").mkdir(exist_ok=True)
        sets = self.load_sets(model)
        for name in sorted(sets):
            for level, s in sorted(sets[name].items()):
                schemes.write_distribution_csv(schemes.layer_distribution(s, model.config),
                                               rdir / "layers" / f"{name}@{_level_tag(level)}.csv")

    # manifest --------------------------------------------------------------

    def write_manifest(self, config_path: Path | None = None) -> Path:
        entries = []
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                entries.append({"path": p.relative_to(self.out).as_posix(), "sha256": sha256_file(p),
                                "bytes": p.stat().st_size})
        doc: dict[str, Any] = {"artifacts": entries}
        if config_path is not None:
            doc["config"] = {"name": Path(config_path).name, "sha256": sha256_file(config_path)}
        for d in self.cfg.datasets:
            if d.path:
                src = self.cfg.base_dir / d.path
                doc.setdefault("inputs", []).extend(
                    {"path": f"{d.id}/{f.name}", "sha256": sha256_file(f)}
                    for f in sorted(src.iterdir()) if f.is_file()
                )
        return _write_json(self.out / "manifest.json", doc)

    def run_stage(self, stage: str, config_path: Path | None = None):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        fn = getattr(self, stage.replace("-", "_"))
        self.out.mkdir(parents=True, exist_ok=True)
        try:
            fn()
        except Exception as e:
            raise StageError(stage, e) from e
        self.write_manifest(config_path)


def run_pipeline(config: WorkbenchConfig, out, workers: int = 1, config_path=None) -> Path:
    """Run every stage in order; returns the manifest path."""
    wb = Workbench(config, out, workers)
    for stage in STAGES:
        log.info("stage %s", stage)
        wb.run_stage(stage, config_path)
    return wb.out / "manifest.json"


def default_config_text() -> str:
    """A documented config matching the library defaults."""
    return DEFAULT_CONFIG


DEFAULT_CONFIG = """\
# conductor workbench config (TOML)
seed = 0

[model]
num_layers = 2
d_model = 32
num_heads = 4
d_ff = 64

[synthetic]
n_topics = 4
words_per_topic = 16
query_len = 3
passage_len = 8
min_overlap = 2
n_distractors = 20

[train]
epochs = 12
n_train = 20000
lr = 0.05
momentum = 0.9

[baseline]
strategy = "auto"     # or all_pad | query_pad | all_zero | query_zero
n_pairs = 200
use_all = false       # true: every assessed pair, not only predicted-relevant ones

[attribution]
steps = 100
quadrature = "riemann_trapezoid"
target = "logit"
max_pairs = 50        # per (dataset, label); 0 = all

[ablation]
levels = [0.01, 0.1, 1.0]
random_reps = 50
schemes = ["P_ms", "N_ms", "F_ms", "iP_o", "iN_o", "iP_a", "iN_a", "iF_o", "iF_a", "F_A"]

# Named expressions. Scheme-valued ones (fuse) become new schemes;
# bare schemes inside inter() are cut at each pruning level.
[sets]
iP_o = "inter(P_ood*)"
iN_o = "inter(N_ood*)"
iP_a = "inter(P_*)"
iN_a = "inter(N_*)"
iF_o = "inter(F_ood*)"
iF_a = "inter(F_*)"
F_A = "fuse(P_*, N_*)"

[[datasets]]
id = "ms"
role = "attribution"
domain = "in_domain"
n_queries = 60

[[datasets]]
id = "ood0"
role = "attribution"
domain = "out_of_domain"
topics = [0]
n_queries = 40

[[datasets]]
id = "ood1"
role = "attribution"
domain = "out_of_domain"
topics = [1]
n_queries = 40

[[datasets]]
id = "ood2"
role = "attribution"
domain = "out_of_domain"
topics = [2]
n_queries = 40
relevant_only = true

[[datasets]]
id = "dev"
role = "evaluation"
domain = "in_domain"
n_queries = 60

[[datasets]]
id = "dev_ood0"
role = "evaluation"
domain = "out_of_domain"
topics = [0, 1]
n_queries = 50

[[datasets]]
id = "dev_ood1"
role = "evaluation"
domain = "out_of_domain"
topics = [2, 3]
n_queries = 50
"""
