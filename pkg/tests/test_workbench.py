import json
import logging
import shutil
import sys

import pytest

from conductor import cli
from conductor.workbench import (
    ConfigError,
    StageError,
    Workbench,
    default_config_text,
    load_config,
    parse_config,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

FAST = """
seed = 5
[baseline]
n_pairs = 10
use_all = true
[attribution]
steps = 4
max_pairs = 3
[ablation]
levels = [1.0, 10.0]
random_reps = 2
[sets]
F_A = "fuse(P_*, N_*)"
iP = "inter(P_*)"
[[datasets]]
id = "ms"
role = "attribution"
n_queries = 4
[[datasets]]
id = "ood"
role = "attribution"
domain = "out_of_domain"
topics = [1]
n_queries = 3
relevant_only = true
[[datasets]]
id = "dev"
role = "evaluation"
n_queries = 4
"""

DOWNSTREAM = ("gen-corpus", "baseline-report", "attribute", "combine", "ablate", "report")


@pytest.fixture(scope="module")
def fast_run(tmp_path_factory, trained_model):
    root = tmp_path_factory.mktemp("wb")
    cfg_path = root / "fast.toml"
    cfg_path.write_text(FAST)
    wb = Workbench(load_config(cfg_path), root / "out")
    trained_model.save(wb.model_path)
    for stage in DOWNSTREAM:
        wb.run_stage(stage, cfg_path)
    return wb, cfg_path


def _doc(text):
    return tomllib.loads(text)


@pytest.mark.parametrize("edit,msg", [
    (lambda d: d.update(bogus=1), "unknown key"),
    (lambda d: d["attribution"].update(quadrature="simpson"), "quadrature"),
    (lambda d: d["datasets"].pop(), "evaluation"),
    (lambda d: d["datasets"].__setitem__(1, dict(d["datasets"][0])), "unique"),
    (lambda d: d["datasets"][0].update(role="training"), "role"),
    (lambda d: d["baseline"].update(strategy="all_mask"), "strategy must be one of"),
])
def test_config_errors(edit, msg):
    doc = _doc(FAST)
    edit(doc)
    with pytest.raises((ConfigError, ValueError), match=msg):
        parse_config(doc)


def test_example_config_parses():
    cfg = parse_config(_doc(default_config_text()))
    assert cfg.by_role("attribution") and cfg.by_role("evaluation")
    assert cfg.baseline == "auto"


def test_pipeline_artifacts(fast_run):
    wb, _ = fast_run
    man = json.loads((wb.out / "manifest.json").read_text())
    paths = {a["path"] for a in man["artifacts"]}
    assert len(paths) >= 6
    for p in ("model/model.json", "baseline/baseline_table.csv", "schemes/P_ms.json", "schemes/F_ms.json",
              "sets/F_A@1.json", "ablation/ablation_table.csv", "report/overlap_PN.csv"):
        assert p in paths
    assert "schemes/N_ood.json" not in paths
    assert man["config"]["name"] == "fast.toml"
    assert [a["path"] for a in man["artifacts"]] == sorted(paths)


def test_relevant_only_skip_warns(fast_run, caplog):
    wb, cfg_path = fast_run
    with caplog.at_level(logging.WARNING, logger="conductor"):
        wb.run_stage("attribute", cfg_path)
    assert any("ood" in r.getMessage() and "skipping" in r.getMessage() for r in caplog.records)


def test_stage_isolation_reproduces_bytes(fast_run):
    wb, cfg_path = fast_run
    before = {p.name: p.read_bytes() for p in (wb.out / "sets").iterdir()}
    table = (wb.out / "ablation" / "ablation_table.csv").read_bytes()
    shutil.rmtree(wb.out / "sets")
    shutil.rmtree(wb.out / "ablation")
    wb.run_stage("combine", cfg_path)
    wb.run_stage("ablate", cfg_path)
    assert {p.name: p.read_bytes() for p in (wb.out / "sets").iterdir()} == before
    assert (wb.out / "ablation" / "ablation_table.csv").read_bytes() == table


def test_missing_upstream_names_stage(tmp_path):
    cfg = parse_config(_doc(FAST))
    with pytest.raises(StageError, match="stage 'attribute' failed.*run 'train' first"):
        Workbench(cfg, tmp_path).run_stage("attribute")


def test_cli_out_resolution_and_exit_codes(tmp_path, monkeypatch, capsys):
    cfg_path = tmp_path / "fast.toml"
    cfg_path.write_text(FAST)
    monkeypatch.setenv("CONDUCTOR_OUT", str(tmp_path / "env-out"))
    assert cli.main(["gen-corpus", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "env-out" / "corpora" / "dev" / "queries.jsonl").exists()
    assert "manifest.json" in capsys.readouterr().out
    assert cli.main(["gen-corpus", "--config", str(cfg_path), "--out", str(tmp_path / "flag-out"),
                     "--seed", "9"]) == 0
    assert (tmp_path / "flag-out" / "manifest.json").exists()
    assert cli.main(["attribute", "--config", str(cfg_path)]) == 1
    assert "stage 'attribute' failed" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = 1\nnope = 2\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "absent.toml")]) == 2
    assert cli.main(["example-config"]) == 0
    assert "[[datasets]]" in capsys.readouterr().out
    with pytest.raises(SystemExit):
        cli.main(["train"])


MINIMAL = """
seed = 2
[baseline]
strategy = "all_pad"
[attribution]
steps = 4
max_pairs = 2
[ablation]
levels = [1.0]
random_reps = 2
[[datasets]]
id = "att"
role = "attribution"
path = "att_corpus"
[[datasets]]
id = "ev"
role = "evaluation"
n_queries = 3
"""


def test_minimal_config_and_manifest_completeness(tmp_path, trained_model, spec):
    from conductor.data import generate_synthetic_corpus

    generate_synthetic_corpus(spec, 4, seed=21, prefix="a-").write(tmp_path / "att_corpus")
    cfg_path = tmp_path / "min.toml"
    cfg_path.write_text(MINIMAL)
    wb = Workbench(load_config(cfg_path), tmp_path / "out")
    trained_model.save(wb.model_path)
    for stage in ("gen-corpus", "attribute", "combine", "ablate", "report"):
        wb.run_stage(stage, cfg_path)
    man = json.loads((wb.out / "manifest.json").read_text())
    listed = {a["path"] for a in man["artifacts"]}
    assert len(listed) >= 6
    on_disk = {p.relative_to(wb.out).as_posix() for p in wb.out.rglob("*") if p.is_file()} - {"manifest.json"}
    assert listed == on_disk
    inputs = {i["path"] for i in man["inputs"]}
    assert inputs == {f"att/{p.name}" for p in (tmp_path / "att_corpus").iterdir()}
    assert man["config"]["sha256"]
